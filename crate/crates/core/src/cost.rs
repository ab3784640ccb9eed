//! Attention cost model per adaptation paradigm, instrumented measurements
//! that check it, and the feature-reuse timing benchmark.
//!
//! The cost unit is one query/key pair scored by an attention call, summed
//! over calls; head count and width do not enter. An encoder layer over `M`
//! tokens therefore costs `M²` units.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::encoder::{EncoderConfig, FrozenEncoder};
use crate::error::{Error, Result};
use crate::fuser::{param_count, FuserConfig, InitStrategy, LabelFuser, LabelSet, LayerFeatures};
use crate::instrument::{self, MacCounts};
use crate::model::{Model, ModelSpec};
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::store::{FeatureStore, StoreMode};
use crate::synth::{Generator, SyntheticSpec};
use crate::trainer::{self, TrainConfig};
use crate::vocab::{TokenSequence, Vocabulary, RESERVED};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    FineTuning,
    FeatureBased,
    Adapter,
    Prompt,
    YTuning,
}

impl Paradigm {
    pub const ALL: [Paradigm; 5] = [
        Paradigm::FineTuning,
        Paradigm::FeatureBased,
        Paradigm::Adapter,
        Paradigm::Prompt,
        Paradigm::YTuning,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Paradigm::FineTuning => "fine_tuning",
            Paradigm::FeatureBased => "feature_based",
            Paradigm::Adapter => "adapter",
            Paradigm::Prompt => "prompt",
            Paradigm::YTuning => "y_tuning",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s || p.name().replace('_', "") == s.replace(['_', '-'], ""))
    }

    /// Whether training has to back-propagate through the encoder.
    pub fn needs_encoder_backward(self) -> bool {
        !matches!(self, Paradigm::FeatureBased | Paradigm::YTuning)
    }
}

/// Sizes entering the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostQuery {
    /// Encoder layers `L`.
    pub layers: usize,
    /// Input length `M`.
    pub seq_len: usize,
    /// Prompt length `P` (prompt paradigm only).
    pub prompt_len: usize,
    /// Labels `N`.
    pub labels: usize,
    /// Embeddings per label.
    pub k: usize,
    /// Fuser applications `L_d`.
    pub fuser_layers: usize,
}

impl Default for CostQuery {
    fn default() -> Self {
        Self {
            layers: 4,
            seq_len: 16,
            prompt_len: 0,
            labels: 3,
            k: 1,
            fuser_layers: 1,
        }
    }
}

impl CostQuery {
    /// Label-side rows `1 + N·k`.
    pub fn label_rows(&self) -> u64 {
        1 + (self.labels * self.k) as u64
    }

    fn validate(&self, paradigm: Paradigm) -> Result<()> {
        if self.layers == 0 || self.seq_len == 0 {
            return Err(Error::Config("L and M must be positive".into()));
        }
        if paradigm == Paradigm::Prompt && self.prompt_len == 0 {
            return Err(Error::Config("prompt paradigm needs P > 0".into()));
        }
        if paradigm == Paradigm::YTuning
            && (self.labels == 0 || self.k == 0 || self.fuser_layers == 0)
        {
            return Err(Error::Config("N, k and L_d must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder term `L·M²`, or `L·(M+P)²` for prompts.
pub fn encoder_attention_cost(paradigm: Paradigm, q: &CostQuery) -> u64 {
    let m = q.seq_len as u64
        + if paradigm == Paradigm::Prompt {
            q.prompt_len as u64
        } else {
            0
        };
    q.layers as u64 * m * m
}

/// Fuser term `L_d·(N'² + M·N')` with `N' = 1 + N·k`.
pub fn fuser_attention_cost(q: &CostQuery) -> u64 {
    let n = q.label_rows();
    q.fuser_layers as u64 * (n * n + q.seq_len as u64 * n)
}

pub fn attention_cost(paradigm: Paradigm, q: &CostQuery) -> u64 {
    let enc = encoder_attention_cost(paradigm, q);
    match paradigm {
        Paradigm::YTuning => enc + fuser_attention_cost(q),
        _ => enc,
    }
}

/// Counts attention pairs actually evaluated by one forward pass of a
/// randomly initialized encoder (with a `P`-row prefix for prompts) and,
/// for label tuning, the fuser.
pub fn measure_attention(paradigm: Paradigm, q: &CostQuery) -> Result<MacCounts> {
    q.validate(paradigm)?;
    let prefix_len = if paradigm == Paradigm::Prompt {
        q.prompt_len
    } else {
        0
    };
    let cfg = EncoderConfig {
        layers: q.layers,
        hidden: 8,
        heads: 2,
        ffn_dim: 16,
        vocab_size: 64,
        max_len: q.seq_len + prefix_len,
        seed: 11,
    };
    let encoder = FrozenEncoder::new(cfg)?;
    let mut rng = Rng::derive(7, q.seq_len as u64);
    let ids = (0..q.seq_len)
        .map(|_| RESERVED + rng.below(60) as u32)
        .collect();
    let seq = TokenSequence::new(ids)?;
    let prefix = (prefix_len > 0).then(|| rng.normal_tensor(&[prefix_len, 8], 1.0));

    let mut fuser_parts = None;
    if paradigm == Paradigm::YTuning {
        let labels = LabelSet::new((0..q.labels.max(2)).map(|i| format!("l{i}")).collect(), q.k)?;
        if q.labels < 2 {
            return Err(Error::Config("need N >= 2 labels".into()));
        }
        let mut store = ParamStore::new();
        let fcfg = FuserConfig {
            layers: q.fuser_layers,
            heads: 2,
            ..FuserConfig::default()
        };
        let fuser = LabelFuser::new(
            &mut store,
            fcfg,
            labels,
            &encoder,
            None,
            InitStrategy::RandomUniform,
            0,
        )?;
        fuser_parts = Some((fuser, store));
    }

    let (res, counts) = instrument::measure(|| -> Result<()> {
        let all = encoder.encode_with_prefix(&seq, prefix.as_ref())?;
        if let Some((fuser, store)) = &fuser_parts {
            let feats = LayerFeatures::select(all, fuser.layer_mask());
            fuser.fuse(&mut Tape::new(), store, &feats)?;
        }
        Ok(())
    });
    res?;
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParadigmCost {
    pub paradigm: Paradigm,
    pub attention_macs: u64,
    pub tunable_params: usize,
    pub needs_encoder_backward: bool,
}

/// Bottleneck width of modeled adapters.
pub fn adapter_bottleneck(hidden: usize) -> usize {
    (hidden / 8).max(1)
}

/// Cost and tunable parameters of every paradigm for one encoder and task.
/// Adapters and prompts are modeled, not run: two bottleneck adapters per
/// layer, and `P` trainable prompt vectors.
pub fn paradigm_table(
    encoder: &EncoderConfig,
    fuser: &FuserConfig,
    q: &CostQuery,
) -> Vec<ParadigmCost> {
    let h = encoder.hidden;
    let n = q.labels;
    let head = h * n + n;
    let per_layer = 4 * (h * h + h)
        + 2 * h
        + (h * encoder.ffn_dim + encoder.ffn_dim)
        + (encoder.ffn_dim * h + h)
        + 2 * h;
    let encoder_params = encoder.vocab_size * h + encoder.layers * per_layer;
    let r = adapter_bottleneck(h);
    let adapters = encoder.layers * 2 * (2 * h * r + r + h);
    Paradigm::ALL
        .into_iter()
        .map(|p| {
            let tunable_params = match p {
                Paradigm::FineTuning => encoder_params + head,
                Paradigm::FeatureBased => head,
                Paradigm::Adapter => adapters + head,
                Paradigm::Prompt => q.prompt_len * h,
                Paradigm::YTuning => {
                    let labels =
                        LabelSet::new((0..n.max(2)).map(|i| i.to_string()).collect(), q.k.max(1))
                            .expect("generated names are unique");
                    param_count(
                        &FuserConfig {
                            layers: q.fuser_layers,
                            ..fuser.clone()
                        },
                        &labels,
                        h,
                        h,
                    )
                }
            };
            ParadigmCost {
                paradigm: p,
                attention_macs: attention_cost(p, q),
                tunable_params,
                needs_encoder_backward: p.needs_encoder_backward(),
            }
        })
        .collect()
}

/// Plain-text rendering of [`paradigm_table`].
pub fn render_table(rows: &[ParadigmCost]) -> String {
    let mut s = format!(
        "{:<14} {:>16} {:>14} {:>16}\n",
        "paradigm", "attention_units", "tunable", "encoder_backward"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<14} {:>16} {:>14} {:>16}\n",
            r.paradigm.name(),
            r.attention_macs,
            r.tunable_params,
            if r.needs_encoder_backward {
                "yes"
            } else {
                "no"
            }
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub encoder: EncoderConfig,
    pub fuser: FuserConfig,
    /// Fixed input length `M`.
    pub seq_len: usize,
    pub examples: usize,
    /// Epochs per mode, including the warm-up epoch.
    pub epochs: usize,
    pub labels: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            fuser: FuserConfig::default(),
            seq_len: 64,
            examples: 64,
            epochs: 4,
            labels: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTimes {
    pub feature_reuse: Vec<f64>,
    pub live: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct BenchReport {
    pub paradigm: Paradigm,
    pub L: usize,
    pub M: usize,
    pub P: usize,
    pub N: usize,
    pub L_d: usize,
    /// Attention units predicted by the cost model for one forward pass.
    pub model_macs: u64,
    /// Attention units counted during one forward pass.
    pub measured_macs: u64,
    pub epoch_times_ms: EpochTimes,
    /// Median live epoch time over median cached epoch time, warm-up
    /// epochs excluded.
    pub steady_state_ratio: f64,
    /// Counted matmul MACs of one encoder forward pass.
    pub encoder_matmul_macs: u64,
    /// Counted matmul MACs of one fuser training step (forward and backward).
    pub fuser_matmul_macs: u64,
    /// `(encoder + fuser) / fuser` from the counted matmul MACs.
    pub predicted_ratio: f64,
    /// Same ratio from attention units alone.
    pub attention_ratio: f64,
    pub losses_identical: bool,
}

impl BenchReport {
    pub fn render(&self) -> String {
        let ms = |v: &[f64]| {
            v.iter()
                .map(|t| format!("{t:.1}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!(
            "paradigm {}  L={} M={} N={} L_d={}\n\
             attention units: model {} measured {}\n\
             matmul MACs: encoder forward {} fuser step {}\n\
             epoch ms, feature reuse: {}\n\
             epoch ms, live encoding: {}\n\
             steady-state ratio {:.2} (predicted {:.2}, attention-only {:.2})\n\
             losses identical: {}\n",
            self.paradigm.name(),
            self.L,
            self.M,
            self.N,
            self.L_d,
            self.model_macs,
            self.measured_macs,
            self.encoder_matmul_macs,
            self.fuser_matmul_macs,
            ms(&self.epoch_times_ms.feature_reuse),
            ms(&self.epoch_times_ms.live),
            self.steady_state_ratio,
            self.predicted_ratio,
            self.attention_ratio,
            self.losses_identical
        )
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Trains the same model twice over identical data, once encoding every
/// epoch and once replaying cached features from a store created under
/// `work_dir`, and compares per-epoch wall clock. Runs single-threaded.
pub fn bench_feature_reuse(cfg: &BenchConfig, work_dir: &Path) -> Result<BenchReport> {
    if cfg.epochs < 3 {
        return Err(Error::Config("benchmark needs at least 3 epochs".into()));
    }
    let spec = SyntheticSpec {
        generator: Generator::KeywordClassification,
        size: cfg.examples,
        dev_size: 0,
        classes: cfg.labels,
        min_len: cfg.seq_len,
        max_len: cfg.seq_len,
        seed: cfg.seed,
        ..SyntheticSpec::default()
    };
    let (train_raw, _) = spec.generate()?;
    let encoder = FrozenEncoder::new(cfg.encoder.clone())?;
    let texts = train_raw.texts();
    let vocab = Vocabulary::build(
        texts.iter().map(String::as_str),
        cfg.encoder.vocab_size - RESERVED as usize,
    );
    let labels = train_raw.label_names();
    let examples = train_raw.to_examples(&vocab, &labels, cfg.encoder.max_len, work_dir)?;
    let mut mspec = ModelSpec::new(train_raw.kind(), labels.clone());
    mspec.fuser = cfg.fuser.clone();
    mspec.seed = cfg.seed;
    let tcfg = TrainConfig {
        epochs: cfg.epochs,
        patience: None,
        seed: cfg.seed,
        threads: 1,
        ..TrainConfig::default()
    };

    let mut live_model = Model::new(mspec.clone(), &encoder, Some(&vocab))?;
    let live = trainer::train(&tcfg, &encoder, &mut live_model, &examples, &[], None)?;

    let store_path = work_dir.join("bench-features.ytfs");
    let mut store = FeatureStore::open(&store_path, StoreMode::Create)?;
    let mut fr_model = Model::new(mspec, &encoder, Some(&vocab))?;
    let fr_cfg = TrainConfig {
        use_feature_store: true,
        ..tcfg.clone()
    };
    let fr = trainer::train(
        &fr_cfg,
        &encoder,
        &mut fr_model,
        &examples,
        &[],
        Some(&mut store),
    )?;
    drop(store);
    let _ = std::fs::remove_file(&store_path);

    let to_ms = |v: &[f64]| v.iter().map(|s| s * 1e3).collect::<Vec<_>>();
    let live_ms = to_ms(&live.epoch_seconds);
    let fr_ms = to_ms(&fr.epoch_seconds);
    let steady_state_ratio = median(&live_ms[1..]) / median(&fr_ms[1..]);

    let sample = &examples[0];
    let (all, enc_counts) = instrument::measure(|| encoder.encode(&sample.tokens));
    let features = LayerFeatures::select(all?, fr_model.feature_mask());
    let (step, fuser_counts) = instrument::measure(|| -> Result<()> {
        let mut store = fr_model.params().clone();
        let mut tape = Tape::new();
        let loss = fr_model.loss_with(&store, &mut tape, &features, &sample.target)?;
        tape.backward(loss, &mut store)
    });
    step?;
    let (_, fwd_counts) = instrument::measure(|| fr_model.scores(&features));
    let query = CostQuery {
        layers: cfg.encoder.layers,
        seq_len: cfg.seq_len,
        prompt_len: 0,
        labels: cfg.labels,
        k: 1,
        fuser_layers: cfg.fuser.layers,
    };
    let enc_units = encoder_attention_cost(Paradigm::YTuning, &query) as f64;
    let fus_units = fuser_attention_cost(&query) as f64;
    let live_losses: Vec<f64> = live.history.iter().map(|h| h.train_loss).collect();
    let fr_losses: Vec<f64> = fr.history.iter().map(|h| h.train_loss).collect();
    Ok(BenchReport {
        paradigm: Paradigm::YTuning,
        L: cfg.encoder.layers,
        M: cfg.seq_len,
        P: 0,
        N: cfg.labels,
        L_d: cfg.fuser.layers,
        model_macs: attention_cost(Paradigm::YTuning, &query),
        measured_macs: enc_counts.attention_pairs + fwd_counts.attention_pairs,
        epoch_times_ms: EpochTimes {
            feature_reuse: fr_ms,
            live: live_ms,
        },
        steady_state_ratio,
        encoder_matmul_macs: enc_counts.matmul_macs,
        fuser_matmul_macs: fuser_counts.matmul_macs,
        predicted_ratio: (enc_counts.matmul_macs + fuser_counts.matmul_macs) as f64
            / fuser_counts.matmul_macs as f64,
        attention_ratio: (enc_units + fus_units) / fus_units,
        losses_identical: live_losses
            .iter()
            .zip(&fr_losses)
            .all(|(a, b)| a.to_bits() == b.to_bits())
            && live_losses.len() == fr_losses.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_examples() {
        let q = CostQuery {
            layers: 4,
            seq_len: 16,
            ..Default::default()
        };
        assert_eq!(attention_cost(Paradigm::FineTuning, &q), 4 * 16 * 16);
        let p = CostQuery { prompt_len: 8, ..q };
        assert_eq!(attention_cost(Paradigm::Prompt, &p), 4 * 24 * 24);
        let y = CostQuery {
            labels: 3,
            k: 1,
            fuser_layers: 1,
            ..q
        };
        assert_eq!(fuser_attention_cost(&y), 4 * 4 + 16 * 4);
    }

    #[test]
    fn backward_flags() {
        let flags: Vec<bool> = Paradigm::ALL
            .iter()
            .map(|p| p.needs_encoder_backward())
            .collect();
        assert_eq!(flags, [true, false, true, true, false]);
    }

    #[test]
    fn parse_names() {
        assert_eq!(Paradigm::parse("prompt"), Some(Paradigm::Prompt));
        assert_eq!(Paradigm::parse("y-tuning"), Some(Paradigm::YTuning));
        assert_eq!(Paradigm::parse("ytuning"), Some(Paradigm::YTuning));
        assert_eq!(Paradigm::parse("nope"), None);
    }

    #[test]
    fn fine_tuning_counts_every_encoder_scalar() {
        let enc = EncoderConfig::default();
        let total = FrozenEncoder::new(enc.clone())
            .unwrap()
            .params()
            .total_scalars();
        let q = CostQuery::default();
        let rows = paradigm_table(&enc, &FuserConfig::default(), &q);
        let head = enc.hidden * q.labels + q.labels;
        assert_eq!(rows[0].tunable_params, total + head);
        assert_eq!(rows[1].tunable_params, head);
    }

    #[test]
    fn measured_matches_model() {
        for p in Paradigm::ALL {
            let q = CostQuery {
                layers: 3,
                seq_len: 7,
                prompt_len: 4,
                labels: 3,
                k: 2,
                fuser_layers: 2,
            };
            let c = measure_attention(p, &q).unwrap();
            assert_eq!(c.attention_pairs, attention_cost(p, &q), "{}", p.name());
        }
    }

    #[test]
    fn median_even_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
