//! Whitespace tokenizer over a frequency-ordered vocabulary.
//!
//! Vocabulary file format: comment lines starting with `#` document the
//! reserved ids, then one token per line. The n-th token line (0-based) has id
//! `n + RESERVED`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const RESERVED: u32 = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<s>";
pub const UNK_TOKEN: &str = "<unk>";

/// Non-empty id sequence without interior padding.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if ids.contains(&PAD_ID) {
            return Err(Error::Input("pad id inside token sequence".into()));
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from whitespace-separated texts. More frequent tokens
    /// get smaller ids; ties are broken lexicographically. At most `max_tokens`
    /// non-reserved entries are kept.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_tokens: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for tok in text.split_whitespace() {
                if !matches!(tok, PAD_TOKEN | BOS_TOKEN | UNK_TOKEN) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_tokens);
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()).collect())
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32 + RESERVED))
            .collect();
        Self { tokens, index }
    }

    /// Number of ids including the reserved ones.
    pub fn size(&self) -> usize {
        self.tokens.len() + RESERVED as usize
    }

    pub fn id(&self, token: &str) -> u32 {
        match token {
            BOS_TOKEN => BOS_ID,
            UNK_TOKEN => UNK_ID,
            PAD_TOKEN => PAD_ID,
            t => self.index.get(t).copied().unwrap_or(UNK_ID),
        }
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        match id {
            PAD_ID => Some(PAD_TOKEN),
            BOS_ID => Some(BOS_TOKEN),
            UNK_ID => Some(UNK_TOKEN),
            i => self.tokens.get((i - RESERVED) as usize).map(String::as_str),
        }
    }

    /// Non-reserved tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Splits on whitespace, maps through the vocabulary (unknown tokens map to
    /// the unk id) and truncates to `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<TokenSequence> {
        let ids: Vec<u32> = text
            .split_whitespace()
            .take(max_len)
            .map(|t| self.id(t))
            .collect();
        if ids.is_empty() {
            return Err(Error::Input("text is empty after trimming".into()));
        }
        TokenSequence::new(ids)
    }

    pub fn tokenize_words(&self, words: &[String], max_len: usize) -> Result<TokenSequence> {
        self.tokenize(&words.join(" "), max_len)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = format!(
            "# reserved ids: {PAD_ID}={PAD_TOKEN} {BOS_ID}={BOS_TOKEN} {UNK_ID}={UNK_TOKEN}\n"
        );
        s.push_str(&format!(
            "# token on line n (0-based, excluding comments) has id n + {RESERVED}\n"
        ));
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for line in text.lines() {
            if line.starts_with('#') {
                continue;
            }
            let tok = line.trim();
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(Error::Format(format!("bad vocabulary line {line:?}")));
            }
            tokens.push(tok.to_string());
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        let v = Vocabulary::from_tokens(vec!["a".into(), "b".into()]);
        assert_eq!(v.tokenize("a a b", 64).unwrap().ids(), &[3, 3, 4]);
        assert_eq!(v.tokenize("zzz", 64).unwrap().ids(), &[UNK_ID]);
        assert!(matches!(v.tokenize("   ", 64), Err(Error::Input(_))));
        assert_eq!(v.tokenize("a b a b", 3).unwrap().len(), 3);
    }

    #[test]
    fn frequency_order_matches_sort_by_count() {
        let corpus = ["d c b a e", "c b a", "b a", "a", "f"];
        let v = Vocabulary::build(corpus, 100);
        // sort-by-count oracle
        let mut counts: Vec<(String, usize)> = Vec::new();
        for tok in corpus.iter().flat_map(|t| t.split_whitespace()) {
            match counts.iter_mut().find(|(t, _)| t == tok) {
                Some(e) => e.1 += 1,
                None => counts.push((tok.to_string(), 1)),
            }
        }
        counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let expect: Vec<String> = counts.into_iter().map(|(t, _)| t).collect();
        assert_eq!(v.tokens(), expect.as_slice());
        assert_eq!(v.id("a"), RESERVED);
        assert!(v.id("a") < v.id("b") && v.id("b") < v.id("c"));
    }

    #[test]
    fn file_round_trip() {
        let v = Vocabulary::build(["x y y z z z"], 10);
        let text = v.to_file_string();
        assert!(text.starts_with('#'));
        assert_eq!(Vocabulary::parse(&text).unwrap(), v);
    }

    #[test]
    fn sequence_rejects_pad_and_empty() {
        assert!(TokenSequence::new(vec![]).is_err());
        assert!(TokenSequence::new(vec![3, 0, 4]).is_err());
    }
}
