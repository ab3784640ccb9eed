//! Dataset file formats.
//!
//! * Classification: UTF-8 TSV, `text<TAB>label` per line.
//! * Sequence labeling: `token<TAB>tag` per line, blank line between
//!   sentences.
//! * Span QA: JSON lines with `context_tokens`, `question_tokens`, `begin`,
//!   `end` (inclusive token indices into the context).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{Example, Target, TaskKind, QA_LABELS};
use crate::metrics::{bio_violations, repair_bio};
use crate::vocab::{TokenSequence, Vocabulary};

/// Token placed between QA context and question.
pub const SEP_TOKEN: &str = "[SEP]";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassificationRecord {
    pub text: String,
    pub label: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BioSentence {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
    /// Line of the first token.
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaRecord {
    pub context_tokens: Vec<String>,
    pub question_tokens: Vec<String>,
    pub begin: usize,
    pub end: usize,
    #[serde(skip)]
    pub line: usize,
}

/// A non-fatal finding while reading a file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Warning {
    pub path: PathBuf,
    pub line: usize,
    pub msg: String,
}

impl std::fmt::Display for Warning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}: {}", self.path.display(), self.line, self.msg)
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn validation_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Validation {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

pub fn read_classification(
    path: &Path,
    labels: Option<&[String]>,
) -> Result<Vec<ClassificationRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (t, label) = raw
            .split_once('\t')
            .ok_or_else(|| parse_err(path, line, "expected text<TAB>label"))?;
        let label = label.trim();
        if t.trim().is_empty() || label.is_empty() || label.contains('\t') {
            return Err(parse_err(path, line, "expected non-empty text<TAB>label"));
        }
        if let Some(ls) = labels {
            if !ls.iter().any(|l| l == label) {
                return Err(validation_err(
                    path,
                    line,
                    format!("label {label:?} not in label set"),
                ));
            }
        }
        out.push(ClassificationRecord {
            text: t.trim().to_string(),
            label: label.to_string(),
            line,
        });
    }
    Ok(out)
}

pub fn write_classification(path: &Path, records: &[ClassificationRecord]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        writeln!(s, "{}\t{}", r.text, r.label).expect("string write");
    }
    fs::write(path, s)?;
    Ok(())
}

/// Reads a BIO file. `I-X` tags that do not continue an `X` entity produce
/// warnings; with `repair` they are rewritten to `B-X`.
pub fn read_bio(
    path: &Path,
    labels: Option<&[String]>,
    repair: bool,
) -> Result<(Vec<BioSentence>, Vec<Warning>)> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    let mut cur = BioSentence {
        tokens: Vec::new(),
        tags: Vec::new(),
        line: 0,
    };
    let mut lines_of = Vec::new();
    let mut finish =
        |cur: &mut BioSentence, lines_of: &mut Vec<usize>, out: &mut Vec<BioSentence>| {
            if cur.tokens.is_empty() {
                return;
            }
            for bad in bio_violations(&cur.tags) {
                warnings.push(Warning {
                    path: path.to_path_buf(),
                    line: lines_of[bad],
                    msg: format!(
                        "{} does not continue an entity of the same type",
                        cur.tags[bad]
                    ),
                });
            }
            if repair {
                repair_bio(&mut cur.tags);
            }
            out.push(std::mem::replace(
                cur,
                BioSentence {
                    tokens: Vec::new(),
                    tags: Vec::new(),
                    line: 0,
                },
            ));
            lines_of.clear();
        };
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            finish(&mut cur, &mut lines_of, &mut out);
            continue;
        }
        let (tok, tag) = raw
            .split_once('\t')
            .ok_or_else(|| parse_err(path, line, "expected token<TAB>tag"))?;
        let (tok, tag) = (tok.trim(), tag.trim());
        if tok.is_empty() || tok.contains(char::is_whitespace) || tag.is_empty() {
            return Err(parse_err(path, line, "expected a single token and a tag"));
        }
        let well_formed = tag == "O"
            || tag
                .strip_prefix("B-")
                .or(tag.strip_prefix("I-"))
                .is_some_and(|t| !t.is_empty());
        if !well_formed {
            return Err(validation_err(
                path,
                line,
                format!("tag {tag:?} is not O, B-X or I-X"),
            ));
        }
        if let Some(ls) = labels {
            if !ls.iter().any(|l| l == tag) {
                return Err(validation_err(
                    path,
                    line,
                    format!("tag {tag:?} not in label set"),
                ));
            }
        }
        if cur.tokens.is_empty() {
            cur.line = line;
        }
        cur.tokens.push(tok.to_string());
        cur.tags.push(tag.to_string());
        lines_of.push(line);
    }
    finish(&mut cur, &mut lines_of, &mut out);
    Ok((out, warnings))
}

pub fn write_bio(path: &Path, sentences: &[BioSentence]) -> Result<()> {
    let mut s = String::new();
    for (i, sent) in sentences.iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        for (t, g) in sent.tokens.iter().zip(&sent.tags) {
            writeln!(s, "{t}\t{g}").expect("string write");
        }
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_qa(path: &Path) -> Result<Vec<QaRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut r: QaRecord =
            serde_json::from_str(raw).map_err(|e| parse_err(path, line, e.to_string()))?;
        r.line = line;
        if r.context_tokens.is_empty() {
            return Err(validation_err(path, line, "empty context"));
        }
        if r.begin > r.end || r.end >= r.context_tokens.len() {
            return Err(validation_err(
                path,
                line,
                format!(
                    "span ({}, {}) outside context of {} tokens",
                    r.begin,
                    r.end,
                    r.context_tokens.len()
                ),
            ));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn write_qa(path: &Path, records: &[QaRecord]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// A dataset as read from disk, before tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RawDataset {
    Classification(Vec<ClassificationRecord>),
    Bio(Vec<BioSentence>),
    Qa(Vec<QaRecord>),
}

impl RawDataset {
    pub fn kind(&self) -> TaskKind {
        match self {
            RawDataset::Classification(_) => TaskKind::Classification,
            RawDataset::Bio(_) => TaskKind::SequenceLabeling,
            RawDataset::Qa(_) => TaskKind::SpanQa,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            RawDataset::Classification(r) => r.len(),
            RawDataset::Bio(r) => r.len(),
            RawDataset::Qa(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reads `path` in the format of `kind`; warnings (BIO only) are returned
    /// alongside.
    pub fn read(
        kind: TaskKind,
        path: &Path,
        labels: Option<&[String]>,
        repair_bio: bool,
    ) -> Result<(Self, Vec<Warning>)> {
        Ok(match kind {
            TaskKind::Classification => (
                RawDataset::Classification(read_classification(path, labels)?),
                Vec::new(),
            ),
            TaskKind::SequenceLabeling => {
                let (s, w) = read_bio(path, labels, repair_bio)?;
                (RawDataset::Bio(s), w)
            }
            TaskKind::SpanQa => (RawDataset::Qa(read_qa(path)?), Vec::new()),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        match self {
            RawDataset::Classification(r) => write_classification(path, r),
            RawDataset::Bio(r) => write_bio(path, r),
            RawDataset::Qa(r) => write_qa(path, r),
        }
    }

    /// Whitespace-joined texts for vocabulary building.
    pub fn texts(&self) -> Vec<String> {
        match self {
            RawDataset::Classification(r) => r.iter().map(|x| x.text.clone()).collect(),
            RawDataset::Bio(r) => r.iter().map(|x| x.tokens.join(" ")).collect(),
            RawDataset::Qa(r) => r
                .iter()
                .map(|x| {
                    format!(
                        "{} {SEP_TOKEN} {}",
                        x.context_tokens.join(" "),
                        x.question_tokens.join(" ")
                    )
                })
                .collect(),
        }
    }

    /// Label names in canonical order: sorted class names; `O` then
    /// `B-X`, `I-X` per sorted entity type; or BEGIN, END.
    pub fn label_names(&self) -> Vec<String> {
        match self {
            RawDataset::Classification(r) => r
                .iter()
                .map(|x| x.label.clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
            RawDataset::Bio(r) => {
                let types: BTreeSet<&str> = r
                    .iter()
                    .flat_map(|s| s.tags.iter())
                    .filter_map(|t| t.get(2..).filter(|_| t != "O"))
                    .collect();
                let mut names = vec!["O".to_string()];
                for t in types {
                    names.push(format!("B-{t}"));
                    names.push(format!("I-{t}"));
                }
                names
            }
            RawDataset::Qa(_) => QA_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Tokenizes into examples against `labels`, truncating to `max_len`
    /// tokens. For QA the question is truncated first; an answer that no
    /// longer fits is a validation error.
    pub fn to_examples(
        &self,
        vocab: &Vocabulary,
        labels: &[String],
        max_len: usize,
        path: &Path,
    ) -> Result<Vec<Example>> {
        let index = |name: &str, line: usize| {
            labels.iter().position(|l| l == name).ok_or_else(|| {
                validation_err(path, line, format!("label {name:?} not in label set"))
            })
        };
        match self {
            RawDataset::Classification(r) => r
                .iter()
                .map(|x| {
                    Ok(Example {
                        tokens: vocab.tokenize(&x.text, max_len)?,
                        target: Target::Class(index(&x.label, x.line)?),
                    })
                })
                .collect(),
            RawDataset::Bio(r) => r
                .iter()
                .map(|s| {
                    let n = s.tokens.len().min(max_len);
                    let ids = s.tokens[..n].iter().map(|t| vocab.id(t)).collect();
                    let tags = s.tags[..n]
                        .iter()
                        .map(|t| index(t, s.line))
                        .collect::<Result<_>>()?;
                    Ok(Example {
                        tokens: TokenSequence::new(ids)?,
                        target: Target::Tags(tags),
                    })
                })
                .collect(),
            RawDataset::Qa(r) => r
                .iter()
                .map(|q| {
                    let ctx = q.context_tokens.len();
                    if q.end >= ctx.min(max_len) {
                        return Err(validation_err(
                            path,
                            q.line,
                            format!(
                                "answer end {} beyond {} usable tokens",
                                q.end,
                                ctx.min(max_len)
                            ),
                        ));
                    }
                    let mut ids: Vec<u32> = q.context_tokens.iter().map(|t| vocab.id(t)).collect();
                    ids.push(vocab.id(SEP_TOKEN));
                    ids.extend(q.question_tokens.iter().map(|t| vocab.id(t)));
                    ids.truncate(max_len);
                    Ok(Example {
                        tokens: TokenSequence::new(ids)?,
                        target: Target::Span {
                            begin: q.begin,
                            end: q.end,
                            context_len: ctx.min(max_len),
                        },
                    })
                })
                .collect(),
        }
    }
}
