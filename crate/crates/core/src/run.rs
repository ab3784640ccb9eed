//! File-driven training runs: configuration, dataset preparation, and the
//! artifacts written to an output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{RawDataset, Warning};
use crate::encoder::{EncoderConfig, FrozenEncoder};
use crate::error::{Error, Result};
use crate::fuser::{FuserConfig, InitStrategy};
use crate::heads::{Example, SoftmaxAxis, TaskKind, DEFAULT_MARGIN};
use crate::metrics::{Metrics, Prediction};
use crate::model::{Architecture, Model, ModelSpec};
use crate::store::{FeatureKey, FeatureRecord, FeatureStore, StoreMode};
use crate::trainer::{self, Checkpoint, EpochRecord, TrainConfig, TrainOutcome};
use crate::vocab::{Vocabulary, RESERVED};

pub const CONFIG_ECHO: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CHECKPOINT_FILE: &str = "model.ytck";
pub const METRICS_FILE: &str = "metrics.json";

/// Model options that do not depend on the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOptions {
    pub k: usize,
    pub architecture: Architecture,
    pub fuser: FuserConfig,
    pub init: InitStrategy,
    pub softmax_axis: Option<SoftmaxAxis>,
    pub margin: f64,
    pub seed: u64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        let spec = ModelSpec::new(TaskKind::Classification, Vec::new());
        Self {
            k: spec.k,
            architecture: spec.architecture,
            fuser: spec.fuser,
            init: spec.init,
            softmax_axis: None,
            margin: DEFAULT_MARGIN,
            seed: 0,
        }
    }
}

impl ModelOptions {
    pub fn to_spec(&self, task: TaskKind, labels: Vec<String>) -> ModelSpec {
        ModelSpec {
            task,
            labels,
            k: self.k,
            architecture: self.architecture,
            fuser: self.fuser.clone(),
            init: self.init,
            softmax_axis: self.softmax_axis,
            margin: self.margin,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    pub train_path: PathBuf,
    #[serde(default)]
    pub dev_path: Option<PathBuf>,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub model: ModelOptions,
    #[serde(default)]
    pub train: TrainConfig,
    /// Label names in index order; read from the training file when absent.
    #[serde(default)]
    pub labels: Option<Vec<String>>,
    /// Existing vocabulary; built from the training file when absent.
    #[serde(default)]
    pub vocab_path: Option<PathBuf>,
    /// Feature store used when `train.use_feature_store` is set.
    #[serde(default)]
    pub store_path: Option<PathBuf>,
    /// Checkpoint whose fuser weights initialize the model.
    #[serde(default)]
    pub warm_start: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub repair_bio: bool,
}

fn must_exist(what: &str, p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{what} {} does not exist",
            p.display()
        )))
    }
}

fn parent_exists(what: &str, p: &Path) -> Result<()> {
    match p.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(d) => must_exist(&format!("directory of {what}"), d),
        None => Ok(()),
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    if p.exists() {
        return Ok(fs::canonicalize(p)?);
    }
    Ok(std::path::absolute(p)?)
}

impl RunConfig {
    pub fn new(
        task: TaskKind,
        train_path: impl Into<PathBuf>,
        output_dir: impl Into<PathBuf>,
    ) -> Self {
        Self {
            task,
            train_path: train_path.into(),
            dev_path: None,
            encoder: EncoderConfig::default(),
            model: ModelOptions::default(),
            train: TrainConfig::default(),
            labels: None,
            vocab_path: None,
            store_path: None,
            warm_start: None,
            output_dir: output_dir.into(),
            repair_bio: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        must_exist("training file", &self.train_path)?;
        if let Some(p) = &self.dev_path {
            must_exist("dev file", p)?;
        }
        if let Some(p) = &self.vocab_path {
            must_exist("vocabulary", p)?;
        }
        if let Some(p) = &self.warm_start {
            must_exist("warm-start checkpoint", p)?;
        }
        if let Some(p) = &self.store_path {
            parent_exists("feature store", p)?;
        }
        if self.train.use_feature_store && self.store_path.is_none() {
            return Err(Error::Config("use_feature_store needs store_path".into()));
        }
        parent_exists("output directory", &self.output_dir)?;
        self.encoder.validate()?;
        self.train.validate()
    }

    /// Copy with every path made absolute, as written to the echo.
    pub fn resolved(&self) -> Result<Self> {
        let opt = |p: &Option<PathBuf>| p.as_deref().map(absolute).transpose();
        Ok(Self {
            train_path: absolute(&self.train_path)?,
            dev_path: opt(&self.dev_path)?,
            vocab_path: opt(&self.vocab_path)?,
            store_path: opt(&self.store_path)?,
            warm_start: opt(&self.warm_start)?,
            output_dir: absolute(&self.output_dir)?,
            ..self.clone()
        })
    }
}

/// Tokenized train and dev splits with the vocabulary and labels used.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub kind: TaskKind,
    pub vocab: Vocabulary,
    pub labels: Vec<String>,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub warnings: Vec<Warning>,
}

/// Tokenizes raw splits. The vocabulary is built from the training texts
/// when not given, capped to what the encoder can embed.
pub fn prepare(
    encoder: &EncoderConfig,
    train: &RawDataset,
    dev: Option<&RawDataset>,
    labels: Option<Vec<String>>,
    vocab: Option<Vocabulary>,
    paths: (&Path, &Path),
) -> Result<Prepared> {
    let vocab = match vocab {
        Some(v) => v,
        None => {
            let texts = train.texts();
            Vocabulary::build(
                texts.iter().map(String::as_str),
                encoder.vocab_size - RESERVED as usize,
            )
        }
    };
    if vocab.size() > encoder.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} ids but the encoder embeds {}",
            vocab.size(),
            encoder.vocab_size
        )));
    }
    let labels = labels.unwrap_or_else(|| train.label_names());
    let train_ex = train.to_examples(&vocab, &labels, encoder.max_len, paths.0)?;
    let dev_ex = match dev {
        Some(d) => d.to_examples(&vocab, &labels, encoder.max_len, paths.1)?,
        None => Vec::new(),
    };
    Ok(Prepared {
        kind: train.kind(),
        vocab,
        labels,
        train: train_ex,
        dev: dev_ex,
        warnings: Vec::new(),
    })
}

/// Reads the files named by `cfg` and tokenizes them.
pub fn load_data(cfg: &RunConfig) -> Result<Prepared> {
    let labels = cfg.labels.as_deref();
    let (train, mut warnings) =
        RawDataset::read(cfg.task, &cfg.train_path, labels, cfg.repair_bio)?;
    let dev = match &cfg.dev_path {
        Some(p) => {
            let (d, w) = RawDataset::read(cfg.task, p, labels, cfg.repair_bio)?;
            warnings.extend(w);
            Some(d)
        }
        None => None,
    };
    let vocab = cfg
        .vocab_path
        .as_deref()
        .map(Vocabulary::load)
        .transpose()?;
    let dev_path = cfg.dev_path.as_deref().unwrap_or(&cfg.train_path);
    let mut p = prepare(
        &cfg.encoder,
        &train,
        dev.as_ref(),
        cfg.labels.clone(),
        vocab,
        (&cfg.train_path, dev_path),
    )?;
    p.warnings = warnings;
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub task: TaskKind,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Metrics of the kept parameters on the training file.
    pub train: Metrics,
    #[serde(default)]
    pub dev: Option<Metrics>,
    pub history: Vec<EpochRecord>,
    pub trainable_params: usize,
    pub encoder_params: usize,
    pub encoder_hash: String,
}

#[derive(Debug)]
pub struct RunSummary {
    pub metrics: RunMetrics,
    pub outcome: TrainOutcome,
    pub warnings: Vec<Warning>,
}

fn open_store(cfg: &RunConfig) -> Result<Option<FeatureStore>> {
    match (&cfg.store_path, cfg.train.use_feature_store) {
        (Some(p), true) => Ok(Some(FeatureStore::open(p, StoreMode::Append)?)),
        _ => Ok(None),
    }
}

/// Trains as configured and writes the vocabulary, resolved config,
/// checkpoint and metrics to `cfg.output_dir`.
pub fn run_training(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let cfg = cfg.resolved()?;
    let data = load_data(&cfg)?;
    let encoder = FrozenEncoder::new(cfg.encoder.clone())?;
    let mut spec = cfg.model.to_spec(cfg.task, data.labels.clone());
    cfg.train.apply_overrides(&mut spec);
    let mut model = Model::new(spec, &encoder, Some(&data.vocab))?;
    if let Some(p) = &cfg.warm_start {
        trainer::warm_start(&mut model, &Checkpoint::load(p)?)?;
    }
    let mut store = open_store(&cfg)?;
    let outcome = trainer::train(
        &cfg.train,
        &encoder,
        &mut model,
        &data.train,
        &data.dev,
        store.as_mut(),
    )?;

    let feats = trainer::encode_examples(
        &encoder,
        &data.train,
        model.feature_mask(),
        cfg.train.threads,
    )?;
    let (_, train_metrics, _) = trainer::evaluate_model(&model, &feats, &data.train)?;
    let metrics = RunMetrics {
        task: cfg.task,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.len(),
        train: train_metrics,
        dev: outcome.final_dev().cloned(),
        history: outcome.history.clone(),
        trainable_params: model.params().trainable_scalars(),
        encoder_params: encoder.params().total_scalars(),
        encoder_hash: format!("{:016x}", encoder.param_hash()),
    };

    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    data.vocab.save(&out.join(VOCAB_FILE))?;
    fs::write(out.join(CONFIG_ECHO), cfg.to_json()?)?;
    outcome.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    fs::write(
        out.join(METRICS_FILE),
        serde_json::to_string_pretty(&metrics)?,
    )?;
    Ok(RunSummary {
        metrics,
        outcome,
        warnings: data.warnings,
    })
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub loss: f64,
    pub predictions: Vec<Prediction>,
}

/// Scores a dataset file with a saved checkpoint and its vocabulary.
pub fn evaluate_file(
    checkpoint: &Path,
    vocab: &Path,
    data: &Path,
    repair_bio: bool,
    threads: usize,
) -> Result<Evaluation> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let vocab = Vocabulary::load(vocab)?;
    let encoder = FrozenEncoder::new(ckpt.meta.encoder.clone())?;
    let model = ckpt.restore(&encoder, Some(&vocab))?;
    let labels = model.spec().labels.clone();
    let (raw, _) = RawDataset::read(model.task(), data, Some(&labels), repair_bio)?;
    let examples = raw.to_examples(&vocab, &labels, encoder.config().max_len, data)?;
    let feats = trainer::encode_examples(&encoder, &examples, model.feature_mask(), threads)?;
    let (loss, metrics, predictions) = trainer::evaluate_model(&model, &feats, &examples)?;
    Ok(Evaluation {
        metrics,
        loss,
        predictions,
    })
}

/// Encodes every train and dev example the configured model would read and
/// stores any that are missing. Returns `(added, total)` record counts.
pub fn populate_cache(cfg: &RunConfig) -> Result<(usize, usize)> {
    cfg.validate()?;
    let path = cfg
        .store_path
        .as_deref()
        .ok_or_else(|| Error::Config("cache needs store_path".into()))?;
    let data = load_data(cfg)?;
    let encoder = FrozenEncoder::new(cfg.encoder.clone())?;
    let mut spec = cfg.model.to_spec(cfg.task, data.labels.clone());
    cfg.train.apply_overrides(&mut spec);
    let model = Model::new(spec, &encoder, Some(&data.vocab))?;
    let mask = model.feature_mask();
    let mut store = FeatureStore::open(path, StoreMode::Append)?;
    let mut added = 0;
    for ex in data.train.iter().chain(&data.dev) {
        let key = FeatureKey::new(encoder.fingerprint(), &ex.tokens, mask);
        if !store.contains(&key) {
            store.put(&FeatureRecord::from_encoder_output(
                key,
                &encoder.encode(&ex.tokens)?,
            )?)?;
            added += 1;
        }
    }
    store.flush()?;
    Ok((added, store.len()))
}
