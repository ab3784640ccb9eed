//! Accuracy, BIO entity F1 and span overlap metrics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{Target, TaskKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prediction {
    Class(usize),
    Tags(Vec<usize>),
    Span(usize, usize),
}

/// A typed entity covering tokens `start..=end`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Entity {
    pub start: usize,
    pub end: usize,
    pub kind: String,
}

/// Extracts entities from BIO tags. An `I-X` that does not continue an `X`
/// entity opens a new one; anything not `B-`/`I-` closes the current entity.
pub fn bio_entities<S: AsRef<str>>(tags: &[S]) -> Vec<Entity> {
    let mut out = Vec::new();
    let mut open: Option<Entity> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        let (prefix, kind) = match tag.split_once('-') {
            Some((p @ ("B" | "I"), k)) => (p, k),
            _ => ("O", ""),
        };
        let continues = prefix == "I" && open.as_ref().is_some_and(|e| e.kind == kind);
        if continues {
            if let Some(e) = open.as_mut() {
                e.end = i;
            }
            continue;
        }
        out.extend(open.take());
        if prefix != "O" {
            open = Some(Entity {
                start: i,
                end: i,
                kind: kind.to_string(),
            });
        }
    }
    out.extend(open);
    out
}

/// Positions of `I-X` tags that do not follow `B-X` or `I-X`.
pub fn bio_violations<S: AsRef<str>>(tags: &[S]) -> Vec<usize> {
    let mut bad = Vec::new();
    let mut prev: Option<&str> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        if let Some(kind) = tag.strip_prefix("I-") {
            let ok = prev.is_some_and(|p| p == format!("B-{kind}") || p == tag);
            if !ok {
                bad.push(i);
            }
        }
        prev = Some(tag);
    }
    bad
}

/// Rewrites invalid `I-X` tags to `B-X`.
pub fn repair_bio(tags: &mut [String]) {
    for i in bio_violations(tags) {
        tags[i] = format!("B-{}", &tags[i][2..]);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

/// Micro-averaged entity scores over aligned sentences.
pub fn entity_prf<S: AsRef<str>>(predicted: &[Vec<S>], gold: &[Vec<S>]) -> Result<Prf> {
    if predicted.len() != gold.len() {
        return Err(Error::Usage(format!(
            "{} predictions for {} sentences",
            predicted.len(),
            gold.len()
        )));
    }
    let (mut correct, mut n_pred, mut n_gold) = (0, 0, 0);
    for (p, g) in predicted.iter().zip(gold) {
        let pe = bio_entities(p);
        let ge = bio_entities(g);
        n_pred += pe.len();
        n_gold += ge.len();
        let mut pool: HashMap<&Entity, usize> = HashMap::new();
        for e in &ge {
            *pool.entry(e).or_default() += 1;
        }
        for e in &pe {
            if let Some(c) = pool.get_mut(e).filter(|c| **c > 0) {
                *c -= 1;
                correct += 1;
            }
        }
    }
    Ok(Prf::from_counts(correct, n_pred, n_gold))
}

/// Token-overlap F1 between two inclusive spans.
pub fn span_f1(pred: (usize, usize), gold: (usize, usize)) -> f64 {
    let lo = pred.0.max(gold.0);
    let hi = pred.1.min(gold.1);
    if hi < lo {
        return 0.0;
    }
    let overlap = hi - lo + 1;
    Prf::from_counts(overlap, pred.1 - pred.0 + 1, gold.1 - gold.0 + 1).f1
}

pub fn accuracy(predicted: &[usize], gold: &[usize]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::Usage(format!(
            "{} predictions for {} targets",
            predicted.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let hits = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Task metrics. Fields not relevant to the task are `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub entity: Option<Prf>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub token_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub exact_match: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub span_f1: Option<f64>,
}

impl Metrics {
    /// The headline number: accuracy, entity F1 or exact match.
    pub fn primary(&self) -> f64 {
        self.accuracy
            .or(self.entity.map(|e| e.f1))
            .or(self.exact_match)
            .unwrap_or(0.0)
    }

    pub fn primary_name(&self) -> &'static str {
        if self.accuracy.is_some() {
            "accuracy"
        } else if self.entity.is_some() {
            "entity_f1"
        } else {
            "exact_match"
        }
    }
}

/// Scores predictions against targets. `labels` maps tag indices to BIO
/// names for sequence labeling.
pub fn evaluate(
    kind: TaskKind,
    labels: &[String],
    predictions: &[Prediction],
    targets: &[Target],
) -> Result<Metrics> {
    if predictions.len() != targets.len() {
        return Err(Error::Usage(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mismatch = || {
        Error::Usage(format!(
            "prediction kind does not match task {}",
            kind.name()
        ))
    };
    let mut m = Metrics::default();
    match kind {
        TaskKind::Classification => {
            let mut p = Vec::with_capacity(targets.len());
            let mut g = Vec::with_capacity(targets.len());
            for (pr, t) in predictions.iter().zip(targets) {
                match (pr, t) {
                    (Prediction::Class(a), Target::Class(b)) => {
                        p.push(*a);
                        g.push(*b);
                    }
                    _ => return Err(mismatch()),
                }
            }
            m.accuracy = Some(accuracy(&p, &g)?);
        }
        TaskKind::SequenceLabeling => {
            let name = |i: &usize| labels.get(*i).cloned().unwrap_or_else(|| "O".into());
            let (mut ps, mut gs) = (Vec::new(), Vec::new());
            let (mut hits, mut total) = (0, 0);
            for (pr, t) in predictions.iter().zip(targets) {
                match (pr, t) {
                    (Prediction::Tags(a), Target::Tags(b)) if a.len() == b.len() => {
                        hits += a.iter().zip(b).filter(|(x, y)| x == y).count();
                        total += b.len();
                        ps.push(a.iter().map(name).collect::<Vec<_>>());
                        gs.push(b.iter().map(name).collect::<Vec<_>>());
                    }
                    _ => return Err(mismatch()),
                }
            }
            m.entity = Some(entity_prf(&ps, &gs)?);
            m.token_accuracy = Some(if total == 0 {
                0.0
            } else {
                hits as f64 / total as f64
            });
        }
        TaskKind::SpanQa => {
            let (mut em, mut f1) = (0.0, 0.0);
            for (pr, t) in predictions.iter().zip(targets) {
                match (pr, t) {
                    (Prediction::Span(b, e), Target::Span { begin, end, .. }) => {
                        if (b, e) == (begin, end) {
                            em += 1.0;
                        }
                        f1 += span_f1((*b, *e), (*begin, *end));
                    }
                    _ => return Err(mismatch()),
                }
            }
            let n = targets.len().max(1) as f64;
            m.exact_match = Some(em / n);
            m.span_f1 = Some(f1 / n);
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_entity_match() {
        let gold = vec![vec!["O", "B-PER", "I-PER", "O", "B-LOC"]];
        let pred = vec![vec!["O", "B-PER", "I-PER", "O", "O"]];
        let prf = entity_prf(&pred, &gold).unwrap();
        assert_eq!(prf.precision, 1.0);
        assert_eq!(prf.recall, 0.5);
        assert!((prf.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn span_overlap() {
        assert!((span_f1((2, 4), (3, 5)) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(span_f1((0, 1), (3, 5)), 0.0);
        assert_eq!(span_f1((3, 5), (3, 5)), 1.0);
    }

    #[test]
    fn bio_checks() {
        let tags = ["O", "I-PER", "B-LOC", "I-LOC", "I-PER"];
        assert_eq!(bio_violations(&tags), vec![1, 4]);
        let mut owned: Vec<String> = tags.iter().map(|s| s.to_string()).collect();
        repair_bio(&mut owned);
        assert_eq!(owned, ["O", "B-PER", "B-LOC", "I-LOC", "B-PER"]);
        assert_eq!(bio_entities(&tags).len(), 3);
    }

    #[test]
    fn length_mismatch_is_usage_error() {
        assert!(matches!(accuracy(&[1], &[1, 2]), Err(Error::Usage(_))));
        let r = evaluate(TaskKind::Classification, &[], &[Prediction::Class(0)], &[]);
        assert!(matches!(r, Err(Error::Usage(_))));
    }
}
