//! Sweeps over label replicas, fuser depth and label initialization on a
//! synthetic classification task.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, FrozenEncoder};
use crate::error::{Error, Result};
use crate::fuser::{FuserConfig, InitStrategy};
use crate::model::{Model, ModelSpec};
use crate::run::{prepare, Prepared};
use crate::store::{FeatureStore, StoreMode};
use crate::synth::{Generator, SyntheticSpec};
use crate::trainer::{self, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub encoder: EncoderConfig,
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub ks: Vec<usize>,
    pub depths: Vec<usize>,
    /// Init strategies swept at `k = 1`, one fuser layer.
    pub inits: Vec<InitStrategy>,
    /// Largest allowed dev-accuracy drop (points) of a deeper fuser vs one
    /// layer at the same `k`.
    pub max_depth_drop: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            data: SyntheticSpec::default(),
            train: TrainConfig {
                use_feature_store: true,
                ..TrainConfig::default()
            },
            ks: vec![1, 2, 4],
            depths: vec![1, 2, 4],
            inits: InitStrategy::ALL.to_vec(),
            max_depth_drop: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    Shape,
    Init,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub sweep: Sweep,
    pub k: usize,
    pub fuser_layers: usize,
    pub init: InitStrategy,
    pub tunable_params: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Dev accuracy in percent.
    pub dev_accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Worst accuracy loss (points) of a deeper fuser against one layer.
    pub worst_depth_drop: f64,
    pub depth_ok: bool,
    /// Max minus min accuracy over the init sweep.
    pub init_spread: f64,
}

impl AblationReport {
    pub fn shape_rows(&self) -> impl Iterator<Item = &AblationRow> {
        self.rows.iter().filter(|r| r.sweep == Sweep::Shape)
    }

    pub fn init_rows(&self) -> impl Iterator<Item = &AblationRow> {
        self.rows.iter().filter(|r| r.sweep == Sweep::Init)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("## Label replicas and fuser depth\n\n");
        s.push_str("| k | L_d | tunable params | best epoch | epochs | dev acc (%) | seconds |\n");
        s.push_str("|---|-----|----------------|------------|--------|-------------|---------|\n");
        for r in self.shape_rows() {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} | {:.1} | {:.1} |\n",
                r.k,
                r.fuser_layers,
                r.tunable_params,
                r.best_epoch,
                r.epochs_run,
                r.dev_accuracy,
                r.seconds
            ));
        }
        s.push_str(&format!(
            "\nWorst drop of a deeper fuser vs one layer: {:.1} points ({}).\n",
            self.worst_depth_drop,
            if self.depth_ok {
                "within bound"
            } else {
                "exceeds bound"
            }
        ));
        if self.init_rows().next().is_some() {
            s.push_str("\n## Label initialization\n\n");
            s.push_str("| init | best epoch | epochs | dev acc (%) | seconds |\n");
            s.push_str("|------|------------|--------|-------------|---------|\n");
            for r in self.init_rows() {
                s.push_str(&format!(
                    "| {} | {} | {} | {:.1} | {:.1} |\n",
                    r.init.name(),
                    r.best_epoch,
                    r.epochs_run,
                    r.dev_accuracy,
                    r.seconds
                ));
            }
            s.push_str(&format!(
                "\nSpread across strategies: {:.1} points.\n",
                self.init_spread
            ));
        }
        s
    }
}

/// Trains one configuration and returns its row.
#[allow(clippy::too_many_arguments)]
pub fn train_variant(
    encoder: &FrozenEncoder,
    data: &Prepared,
    train: &TrainConfig,
    sweep: Sweep,
    k: usize,
    fuser_layers: usize,
    init: InitStrategy,
    store: Option<&mut FeatureStore>,
) -> Result<AblationRow> {
    let mut spec = ModelSpec::new(data.kind, data.labels.clone());
    spec.k = k;
    spec.init = init;
    spec.seed = train.seed;
    spec.fuser = FuserConfig {
        layers: fuser_layers,
        ..FuserConfig::default()
    };
    train.apply_overrides(&mut spec);
    let mut model = Model::new(spec, encoder, Some(&data.vocab))?;
    let start = Instant::now();
    let out = trainer::train(train, encoder, &mut model, &data.train, &data.dev, store)?;
    let acc = out.final_dev().and_then(|m| m.accuracy).unwrap_or(f64::NAN);
    Ok(AblationRow {
        sweep,
        k,
        fuser_layers,
        init,
        tunable_params: model.params().trainable_scalars(),
        best_epoch: out.best_epoch,
        epochs_run: out.history.len(),
        dev_accuracy: 100.0 * acc,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs the replica-by-depth grid and the init sweep. Features are cached
/// in a store under `work_dir` shared by all runs. `progress` sees each row
/// as it finishes.
pub fn run_ablation(
    cfg: &AblationConfig,
    work_dir: &Path,
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationReport> {
    if cfg.data.generator != Generator::KeywordClassification {
        return Err(Error::Config(
            "the ablation sweeps a classification task".into(),
        ));
    }
    if cfg.ks.is_empty() || cfg.depths.is_empty() {
        return Err(Error::Config("ks and depths must be non-empty".into()));
    }
    let (train_raw, dev_raw) = cfg.data.generate()?;
    let data = prepare(
        &cfg.encoder,
        &train_raw,
        Some(&dev_raw),
        None,
        None,
        (work_dir, work_dir),
    )?;
    let encoder = FrozenEncoder::new(cfg.encoder.clone())?;
    let store_path = work_dir.join("ablation-features.ytfs");
    let mut store = if cfg.train.use_feature_store {
        Some(FeatureStore::open(&store_path, StoreMode::Append)?)
    } else {
        None
    };

    let mut rows = Vec::new();
    for &k in &cfg.ks {
        for &depth in &cfg.depths {
            let row = train_variant(
                &encoder,
                &data,
                &cfg.train,
                Sweep::Shape,
                k,
                depth,
                InitStrategy::SampledVocab,
                store.as_mut(),
            )?;
            progress(&row);
            rows.push(row);
        }
    }
    for &init in &cfg.inits {
        let row = train_variant(
            &encoder,
            &data,
            &cfg.train,
            Sweep::Init,
            1,
            1,
            init,
            store.as_mut(),
        )?;
        progress(&row);
        rows.push(row);
    }
    drop(store);

    let mut worst = f64::NEG_INFINITY;
    for &k in &cfg.ks {
        let at = |d: usize| {
            rows.iter()
                .find(|r| r.sweep == Sweep::Shape && r.k == k && r.fuser_layers == d)
                .map(|r| r.dev_accuracy)
        };
        let base = at(cfg.depths[0]);
        for &d in &cfg.depths[1..] {
            if let (Some(b), Some(a)) = (base, at(d)) {
                worst = worst.max(b - a);
            }
        }
    }
    let worst_depth_drop = if worst.is_finite() {
        worst.max(0.0)
    } else {
        0.0
    };
    let accs: Vec<f64> = rows
        .iter()
        .filter(|r| r.sweep == Sweep::Init)
        .map(|r| r.dev_accuracy)
        .collect();
    let init_spread = if accs.is_empty() {
        0.0
    } else {
        accs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - accs.iter().copied().fold(f64::INFINITY, f64::min)
    };
    Ok(AblationReport {
        rows,
        worst_depth_drop,
        depth_ok: worst_depth_drop <= cfg.max_depth_drop,
        init_spread,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(k: usize, d: usize, acc: f64) -> AblationRow {
        AblationRow {
            sweep: Sweep::Shape,
            k,
            fuser_layers: d,
            init: InitStrategy::SampledVocab,
            tunable_params: 0,
            best_epoch: 1,
            epochs_run: 1,
            dev_accuracy: acc,
            seconds: 0.0,
        }
    }

    #[test]
    fn markdown_has_a_line_per_row() {
        let report = AblationReport {
            rows: vec![row(1, 1, 100.0), row(1, 2, 99.0)],
            worst_depth_drop: 1.0,
            depth_ok: true,
            init_spread: 0.0,
        };
        let md = report.to_markdown();
        assert_eq!(md.lines().filter(|l| l.starts_with("| 1 |")).count(), 2);
        assert!(!md.contains("Label initialization"));
    }
}
