//! Losses and decoders for classification, sequence labeling and span QA.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};
use crate::vocab::TokenSequence;

/// Default hinge margin of the triplet loss.
pub const DEFAULT_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    SequenceLabeling,
    SpanQa,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::SequenceLabeling => "sequence_labeling",
            TaskKind::SpanQa => "span_qa",
        }
    }

    /// Whether predictions are made per token from top-layer features.
    pub fn token_level(self) -> bool {
        !matches!(self, TaskKind::Classification)
    }

    pub fn default_axis(self) -> SoftmaxAxis {
        match self {
            TaskKind::SpanQa => SoftmaxAxis::Token,
            _ => SoftmaxAxis::Label,
        }
    }
}

/// Label names used for span QA.
pub const QA_LABELS: [&str; 2] = ["BEGIN", "END"];

/// Direction of normalization for token-label logit matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxAxis {
    /// Per token, over labels.
    Label,
    /// Per label, over tokens.
    Token,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Class(usize),
    Tags(Vec<usize>),
    /// Inclusive token span inside the first `context_len` positions.
    Span {
        begin: usize,
        end: usize,
        context_len: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: TokenSequence,
    pub target: Target,
}

impl Example {
    /// Checks the target against the task, label count and sequence length.
    pub fn validate(&self, kind: TaskKind, num_labels: usize) -> Result<()> {
        let m = self.tokens.len();
        match (&self.target, kind) {
            (Target::Class(c), TaskKind::Classification) if *c < num_labels => Ok(()),
            (Target::Tags(t), TaskKind::SequenceLabeling)
                if t.len() == m && t.iter().all(|&x| x < num_labels) =>
            {
                Ok(())
            }
            (
                Target::Span {
                    begin,
                    end,
                    context_len,
                },
                TaskKind::SpanQa,
            ) if begin <= end && end < context_len && *context_len <= m => Ok(()),
            (t, k) => Err(Error::Input(format!(
                "target {t:?} invalid for {} over {m} tokens",
                k.name()
            ))),
        }
    }
}

/// `Σ_{y' ≠ gold} max(s(y') − s(gold) + margin, 0)` over scalar score vars.
pub fn triplet_loss(tape: &mut Tape, scores: &[Var], gold: usize, margin: f64) -> Result<Var> {
    check_gold(scores.len(), gold, margin)?;
    let mut terms = Vec::with_capacity(scores.len() - 1);
    for (c, &s) in scores.iter().enumerate() {
        if c == gold {
            continue;
        }
        let d = tape.sub(s, scores[gold])?;
        let d = tape.add_scalar(d, margin);
        terms.push(tape.relu(d));
    }
    tape.sum_scalars(&terms)
}

/// Value-only triplet loss.
pub fn triplet_loss_value(scores: &[f64], gold: usize, margin: f64) -> Result<f64> {
    check_gold(scores.len(), gold, margin)?;
    Ok(scores
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != gold)
        .map(|(_, s)| {
            let d = s - scores[gold] + margin;
            if d < 0.0 {
                0.0
            } else {
                d
            }
        })
        .sum())
}

fn check_gold(n: usize, gold: usize, margin: f64) -> Result<()> {
    if n < 2 {
        return Err(Error::Usage(format!(
            "triplet loss needs at least 2 scores, got {n}"
        )));
    }
    if gold >= n {
        return Err(Error::Usage(format!(
            "gold class {gold} out of range for {n} scores"
        )));
    }
    if !(margin >= 0.0) {
        return Err(Error::Usage(format!(
            "margin must be non-negative, got {margin}"
        )));
    }
    Ok(())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict_class(scores: &[f64]) -> usize {
    argmax(scores)
}

/// `M × N` logits: top-layer hidden states dotted with fused label rows.
/// With `k > 1` replicas per label, replica logits are summed per class.
pub fn token_label_logits(tape: &mut Tape, hidden: Var, label_rows: Var, k: usize) -> Result<Var> {
    let (h, r) = (tape.value(hidden).cols(), tape.value(label_rows).cols());
    if h != r {
        return Err(Error::Config(format!(
            "hidden width {h} differs from label width {r}"
        )));
    }
    let logits = tape.matmul_bt(hidden, label_rows)?;
    if k == 1 {
        return Ok(logits);
    }
    let nk = tape.value(label_rows).rows();
    let mut fold = Tensor::zeros(&[nk, nk / k]);
    for j in 0..nk {
        fold.row_mut(j)[j / k] = 1.0;
    }
    let fold = tape.constant(fold);
    tape.matmul(logits, fold)
}

/// Mean over tokens of the negative log-probability of each gold tag.
pub fn seq_label_loss(
    tape: &mut Tape,
    logits: Var,
    tags: &[usize],
    axis: SoftmaxAxis,
) -> Result<Var> {
    let m = tape.value(logits).rows();
    if tags.len() != m {
        return Err(Error::Usage(format!("{} tags for {m} tokens", tags.len())));
    }
    let picks: Vec<(usize, usize)> = tags.iter().copied().enumerate().collect();
    let mean = match axis {
        SoftmaxAxis::Label => {
            let lp = tape.log_softmax_rows(logits);
            tape.pick_mean(lp, &picks)
        }
        SoftmaxAxis::Token => {
            let t = tape.transpose(logits);
            let lp = tape.log_softmax_rows(t);
            let flipped: Vec<(usize, usize)> = picks.iter().map(|&(r, c)| (c, r)).collect();
            tape.pick_mean(lp, &flipped)
        }
    };
    Ok(tape.scale(mean, -1.0))
}

/// Normalized `M × N` probabilities along the chosen axis.
pub fn normalize(logits: &Tensor, axis: SoftmaxAxis) -> Tensor {
    match axis {
        SoftmaxAxis::Label => tensor::softmax_rows(logits),
        SoftmaxAxis::Token => tensor::softmax_rows(&logits.transpose()).transpose(),
    }
}

/// Per-token argmax over labels of the normalized logits.
pub fn seq_label_predict(logits: &Tensor, axis: SoftmaxAxis) -> Vec<usize> {
    let p = normalize(logits, axis);
    (0..p.rows()).map(|i| argmax(p.row(i))).collect()
}

/// Span loss over the first `context_len` tokens: the mean of the BEGIN and
/// END negative log-likelihoods.
pub fn qa_loss(
    tape: &mut Tape,
    logits: Var,
    begin: usize,
    end: usize,
    context_len: usize,
    axis: SoftmaxAxis,
) -> Result<Var> {
    let (m, c) = (tape.value(logits).rows(), tape.value(logits).cols());
    if c != 2 || context_len == 0 || context_len > m || begin > end || end >= context_len {
        return Err(Error::Usage(format!(
            "span ({begin}, {end}) invalid for {m}×{c} logits with context {context_len}"
        )));
    }
    let ctx = if context_len == m {
        logits
    } else {
        let idx: Vec<usize> = (0..context_len).collect();
        tape.gather_rows(logits, &idx)
    };
    let mean = match axis {
        SoftmaxAxis::Token => {
            let t = tape.transpose(ctx);
            let lp = tape.log_softmax_rows(t);
            tape.pick_mean(lp, &[(0, begin), (1, end)])
        }
        SoftmaxAxis::Label => {
            let lp = tape.log_softmax_rows(ctx);
            tape.pick_mean(lp, &[(begin, 0), (end, 1)])
        }
    };
    Ok(tape.scale(mean, -1.0))
}

/// Most probable span `(i, j)` with `i ≤ j` under `p_BEGIN(i) · p_END(j)`,
/// with probabilities normalized along `axis`. Ties go to the earliest end,
/// then the earliest begin.
pub fn qa_predict_span(logits: &Tensor, axis: SoftmaxAxis) -> (usize, usize) {
    let p = normalize(logits, axis);
    let mut best_begin = 0;
    let mut best = (0, 0);
    let mut best_score = f64::NEG_INFINITY;
    for j in 0..p.rows() {
        if p.at(j, 0) > p.at(best_begin, 0) {
            best_begin = j;
        }
        let s = p.at(best_begin, 0) * p.at(j, 1);
        if s > best_score {
            best_score = s;
            best = (best_begin, j);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplet_examples() {
        assert_eq!(triplet_loss_value(&[0.9, 0.2], 0, 0.1).unwrap(), 0.0);
        assert!((triplet_loss_value(&[0.5, 0.55], 0, 0.1).unwrap() - 0.15).abs() < 1e-12);
        assert!((triplet_loss_value(&[0.3, 0.3, 0.3], 1, 0.1).unwrap() - 0.2).abs() < 1e-12);
        assert!(matches!(
            triplet_loss_value(&[0.3, 0.3], 2, 0.1),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn triplet_tape_matches_value_and_gradient_signs() {
        let mut tape = Tape::new();
        let s: Vec<Var> = [0.5, 0.55, 0.1]
            .iter()
            .map(|&v| tape.constant(Tensor::scalar(v)))
            .collect();
        let loss = triplet_loss(&mut tape, &s, 0, 0.1).unwrap();
        let want = triplet_loss_value(&[0.5, 0.55, 0.1], 0, 0.1).unwrap();
        assert!((tape.value(loss).item() - want).abs() < 1e-15);
        let g = tape.gradients(loss).unwrap();
        let grad = |v: Var| g[v.index()].as_ref().map_or(0.0, |t| t.item());
        assert_eq!(grad(s[1]), 1.0);
        assert_eq!(grad(s[0]), -1.0);
        assert_eq!(grad(s[2]), 0.0);
    }

    #[test]
    fn predict_ties_low() {
        assert_eq!(predict_class(&[0.1, 0.9]), 1);
        assert_eq!(predict_class(&[0.5, 0.5]), 0);
    }

    #[test]
    fn token_logits_basis_and_zero() {
        let mut tape = Tape::new();
        let h =
            tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]]).unwrap());
        let reps = tape.constant(Tensor::identity(3));
        let l = token_label_logits(&mut tape, h, reps, 1).unwrap();
        assert_eq!(tape.value(l).row(0), &[1.0, 2.0, 3.0]);
        assert_eq!(tape.value(l).row(1), &[0.0, 0.0, 0.0]);
        let bad = tape.constant(Tensor::identity(2));
        assert!(matches!(
            token_label_logits(&mut tape, h, bad, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn token_logits_fold_replicas() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let reps = tape.constant(
            Tensor::from_rows(&[
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, 1.0],
                vec![0.0, 0.0],
            ])
            .unwrap(),
        );
        let l = token_label_logits(&mut tape, h, reps, 2).unwrap();
        assert_eq!(tape.value(l).data(), &[3.0, 3.0]);
    }

    #[test]
    fn uniform_losses() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[4, 3]));
        let l = seq_label_loss(&mut tape, z, &[0, 1, 2, 0], SoftmaxAxis::Label).unwrap();
        assert!((tape.value(l).item() - 3f64.ln()).abs() < 1e-12);
        let z = tape.constant(Tensor::zeros(&[5, 2]));
        let l = qa_loss(&mut tape, z, 1, 3, 5, SoftmaxAxis::Token).unwrap();
        assert!((tape.value(l).item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn span_examples() {
        let peaked = |b: usize, e: usize| {
            let mut t = Tensor::zeros(&[8, 2]);
            t.row_mut(b)[0] = 10.0;
            t.row_mut(e)[1] = 10.0;
            t
        };
        assert_eq!(qa_predict_span(&peaked(2, 5), SoftmaxAxis::Token), (2, 5));
        assert_eq!(qa_predict_span(&peaked(3, 3), SoftmaxAxis::Token), (3, 3));
        let (b, e) = qa_predict_span(&peaked(5, 2), SoftmaxAxis::Token);
        assert!(b <= e);
    }
}
