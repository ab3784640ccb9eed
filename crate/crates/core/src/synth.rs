//! Synthetic task generators.
//!
//! Token vocabularies are small on purpose: the frozen encoder is random, so
//! its features are close to context-free token identities, and a handful of
//! distinct token types keeps per-token decisions linearly separable.

use serde::{Deserialize, Serialize};

use crate::data::{BioSentence, ClassificationRecord, QaRecord, RawDataset};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// The class is which of `N` disjoint trigger sets contributes the one
    /// trigger token among filler.
    KeywordClassification,
    /// Entities are a head token followed by tail tokens; their type is set
    /// by a cue token elsewhere in the sentence.
    TriggerBio,
    /// The answer is the run from an open sentinel to a close sentinel,
    /// inclusive.
    SentinelSpanQa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub generator: Generator,
    /// Training examples.
    pub size: usize,
    pub dev_size: usize,
    /// Distinct filler tokens.
    pub vocab_size: usize,
    /// Fraction of labels replaced by a wrong one.
    pub noise: f64,
    pub seed: u64,
    /// Classes (classification) or entity types (tagging).
    pub classes: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            generator: Generator::KeywordClassification,
            size: 500,
            dev_size: 200,
            vocab_size: 24,
            noise: 0.0,
            seed: 0,
            classes: 3,
            min_len: 8,
            max_len: 16,
        }
    }
}

/// Trigger tokens per class.
pub const TRIGGERS_PER_CLASS: usize = 4;
/// Distinct entity head and tail tokens.
pub const ENTITY_TOKENS: usize = 6;
pub const ANSWER_TOKENS: usize = 8;
pub const QUESTION_LEN: usize = 3;
pub const OPEN_SENTINEL: &str = "<<";
pub const CLOSE_SENTINEL: &str = ">>";
const ENTITY_TYPES: [&str; 4] = ["PER", "LOC", "ORG", "MISC"];

pub fn trigger_token(class: usize, i: usize) -> String {
    format!("k{class}_{i}")
}

/// Name of class `c`: its first trigger token, so that class-name
/// initialization has a meaningful embedding to start from.
pub fn class_name(class: usize) -> String {
    trigger_token(class, 0)
}

pub fn entity_type(t: usize) -> String {
    ENTITY_TYPES
        .get(t)
        .map_or_else(|| format!("T{t}"), |s| s.to_string())
}

pub fn cue_token(t: usize) -> String {
    format!("cue_{}", entity_type(t).to_lowercase())
}

fn filler(rng: &mut Rng, spec: &SyntheticSpec) -> String {
    format!("w{}", rng.below(spec.vocab_size))
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Config(format!(
                "noise must be in [0, 1), got {}",
                self.noise
            )));
        }
        if self.vocab_size == 0 || self.size == 0 {
            return Err(Error::Config("size and vocab_size must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        let floor = match self.generator {
            Generator::KeywordClassification => 1,
            Generator::TriggerBio => 4,
            Generator::SentinelSpanQa => 3,
        };
        if self.min_len < floor || self.max_len < self.min_len {
            return Err(Error::Config(format!(
                "lengths must satisfy {floor} <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    /// Generates `(train, dev)` splits.
    pub fn generate(&self) -> Result<(RawDataset, RawDataset)> {
        self.validate()?;
        let mut rng = Rng::derive(self.seed, 0x5EED);
        let train = self.split(&mut rng, self.size);
        let dev = self.split(&mut rng, self.dev_size);
        Ok((train, dev))
    }

    fn split(&self, rng: &mut Rng, n: usize) -> RawDataset {
        match self.generator {
            Generator::KeywordClassification => {
                RawDataset::Classification((0..n).map(|i| self.keyword_example(rng, i)).collect())
            }
            Generator::TriggerBio => {
                RawDataset::Bio((0..n).map(|i| self.bio_example(rng, i)).collect())
            }
            Generator::SentinelSpanQa => {
                RawDataset::Qa((0..n).map(|i| self.qa_example(rng, i)).collect())
            }
        }
    }

    fn length(&self, rng: &mut Rng) -> usize {
        self.min_len + rng.below(self.max_len - self.min_len + 1)
    }

    fn keyword_example(&self, rng: &mut Rng, i: usize) -> ClassificationRecord {
        let class = rng.below(self.classes);
        let len = self.length(rng);
        let mut toks: Vec<String> = (0..len).map(|_| filler(rng, self)).collect();
        let pos = rng.below(len);
        toks[pos] = trigger_token(class, rng.below(TRIGGERS_PER_CLASS));
        let mut label = class;
        if rng.unit() < self.noise {
            label = (class + 1 + rng.below(self.classes - 1)) % self.classes;
        }
        ClassificationRecord {
            text: toks.join(" "),
            label: class_name(label),
            line: i + 1,
        }
    }

    fn bio_example(&self, rng: &mut Rng, i: usize) -> BioSentence {
        let ty = rng.below(self.classes);
        let len = self.length(rng);
        let mut tokens: Vec<String> = (0..len).map(|_| filler(rng, self)).collect();
        let mut tags = vec!["O".to_string(); len];
        let cue_pos = rng.below(len);
        tokens[cue_pos] = cue_token(ty);
        let entities = 1 + rng.below(2);
        for _ in 0..entities {
            let span = 1 + rng.below(3);
            if span > len {
                continue;
            }
            let start = rng.below(len - span + 1);
            if (start..start + span).any(|p| p == cue_pos || tags[p] != "O")
                || (start > 0 && tags[start - 1] != "O")
                || (start + span < len && tags[start + span] != "O")
            {
                continue;
            }
            let mut t = ty;
            if rng.unit() < self.noise {
                t = (ty + 1 + rng.below(self.classes - 1)) % self.classes;
            }
            let name = entity_type(t);
            for (j, p) in (start..start + span).enumerate() {
                if j == 0 {
                    tokens[p] = format!("h{}", rng.below(ENTITY_TOKENS));
                    tags[p] = format!("B-{name}");
                } else {
                    tokens[p] = format!("t{}", rng.below(ENTITY_TOKENS));
                    tags[p] = format!("I-{name}");
                }
            }
        }
        BioSentence {
            tokens,
            tags,
            line: i + 1,
        }
    }

    fn qa_example(&self, rng: &mut Rng, i: usize) -> QaRecord {
        let len = self.length(rng);
        let mut context: Vec<String> = (0..len).map(|_| filler(rng, self)).collect();
        let inner = rng.below((len - 2).min(4) + 1);
        let span = inner + 2;
        let mut begin = rng.below(len - span + 1);
        let mut end = begin + span - 1;
        context[begin] = OPEN_SENTINEL.to_string();
        for p in begin + 1..end {
            context[p] = format!("a{}", rng.below(ANSWER_TOKENS));
        }
        context[end] = CLOSE_SENTINEL.to_string();
        if rng.unit() < self.noise {
            begin = rng.below(len);
            end = begin + rng.below(len - begin);
        }
        let question = (0..QUESTION_LEN)
            .map(|_| format!("q{}", rng.below(4)))
            .collect();
        QaRecord {
            context_tokens: context,
            question_tokens: question,
            begin,
            end,
            line: i + 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::bio_violations;

    #[test]
    fn keyword_is_separable_at_zero_noise() {
        let (train, _) = SyntheticSpec::default().generate().unwrap();
        let RawDataset::Classification(recs) = train else {
            panic!()
        };
        for r in &recs {
            let triggers: Vec<&str> = r.text.split(' ').filter(|t| t.starts_with('k')).collect();
            assert_eq!(triggers.len(), 1);
            let class: usize = triggers[0][1..].split('_').next().unwrap().parse().unwrap();
            assert_eq!(r.label, class_name(class));
        }
    }

    #[test]
    fn bio_is_well_formed() {
        let spec = SyntheticSpec {
            generator: Generator::TriggerBio,
            classes: 2,
            ..Default::default()
        };
        let (train, _) = spec.generate().unwrap();
        let RawDataset::Bio(sents) = train else {
            panic!()
        };
        for s in &sents {
            assert!(bio_violations(&s.tags).is_empty());
            let cue = s.tokens.iter().find(|t| t.starts_with("cue_")).unwrap();
            for tag in s.tags.iter().filter(|t| *t != "O") {
                assert_eq!(cue_token(if tag.ends_with("PER") { 0 } else { 1 }), *cue);
            }
        }
    }

    #[test]
    fn qa_spans_are_bracketed() {
        let spec = SyntheticSpec {
            generator: Generator::SentinelSpanQa,
            ..Default::default()
        };
        let (train, _) = spec.generate().unwrap();
        let RawDataset::Qa(recs) = train else {
            panic!()
        };
        for r in &recs {
            assert!(r.begin <= r.end);
            assert_eq!(r.context_tokens[r.begin], OPEN_SENTINEL);
            assert_eq!(r.context_tokens[r.end], CLOSE_SENTINEL);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let spec = SyntheticSpec::default();
        assert_eq!(spec.generate().unwrap(), spec.generate().unwrap());
    }
}
