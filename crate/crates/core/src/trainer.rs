//! Training loop, checkpoints and the gradient check.
//!
//! Only the model's own parameters (label embeddings and fuser, or a probe)
//! are ever updated. The encoder is borrowed immutably throughout.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::encoder::{EncoderConfig, FrozenEncoder};
use crate::error::{Error, Result};
use crate::fuser::{LayerFeatures, LayerMap, FUSER_PREFIX};
use crate::gradcheck::{self, GradCheckReport, FD_STEP};
use crate::heads::{Example, SoftmaxAxis, Target};
use crate::metrics::{self, Metrics, Prediction};
use crate::model::{Model, ModelSpec};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::Rng;
use crate::store::{FeatureKey, FeatureRecord, FeatureStore, LayerMask};
use crate::tensor::Tensor;
use crate::vocab::{TokenSequence, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Upper bound on epochs.
    pub epochs: usize,
    /// Stop after this many epochs without dev improvement; `None` runs all
    /// epochs.
    pub patience: Option<usize>,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub use_feature_store: bool,
    pub margin: Option<f64>,
    pub softmax_axis: Option<SoftmaxAxis>,
    pub layer_map: Option<LayerMap>,
    /// Worker bound for batch encoding.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 200,
            patience: Some(10),
            optimizer: OptimizerKind::default(),
            seed: 0,
            use_feature_store: false,
            margin: None,
            softmax_axis: None,
            layer_map: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    /// Copies the model-level overrides into `spec`.
    pub fn apply_overrides(&self, spec: &mut ModelSpec) {
        if let Some(m) = self.margin {
            spec.margin = m;
        }
        if let Some(a) = self.softmax_axis {
            spec.softmax_axis = Some(a);
        }
        if let Some(l) = self.layer_map {
            spec.fuser.layer_map = l;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dev: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    pub encoder: EncoderConfig,
    pub encoder_fingerprint: u64,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub history: Vec<EpochRecord>,
}

/// Trainable tensors plus the configuration that produced them. Encoder
/// parameters are never included.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"YTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn capture(
        model: &Model,
        encoder: &FrozenEncoder,
        train: Option<&TrainConfig>,
        history: &[EpochRecord],
    ) -> Self {
        Self {
            meta: CheckpointMeta {
                model: model.spec().clone(),
                encoder: encoder.config().clone(),
                encoder_fingerprint: encoder.fingerprint(),
                train: train.cloned(),
                history: history.to_vec(),
            },
            tensors: model.named_tensors(),
        }
    }

    /// `"YTCK"`, version, length-prefixed JSON config echo, named tensors,
    /// then a CRC32 of everything before it.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let text = serde_json::to_string(&self.meta)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
        buf.extend_from_slice(text.as_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 16 {
            return Err(bad("file too short"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().expect("4 bytes")) {
            return Err(bad("checksum mismatch (truncated or corrupted)"));
        }
        let len = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let text = r.take(len).ok_or_else(|| bad("truncated config"))?;
        let text = std::str::from_utf8(text).map_err(|_| bad("config is not UTF-8"))?;
        let meta: CheckpointMeta =
            serde_json::from_str(text).map_err(|e| bad(&format!("config: {e}")))?;
        let mut tensors = Vec::new();
        while r.pos < body.len() {
            let n = r.u32().ok_or_else(|| bad("truncated tensor name"))? as usize;
            let name = r.take(n).ok_or_else(|| bad("truncated tensor name"))?;
            let name =
                String::from_utf8(name.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
            let rank = r.u32().ok_or_else(|| bad("truncated tensor rank"))? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad("truncated tensor dims"))?;
            let count: usize = dims.iter().product();
            let raw = r
                .take(count * 8)
                .ok_or_else(|| bad(&format!("truncated data for {name}")))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::from_vec(dims, data).map_err(|e| bad(&format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuilds the model this checkpoint was taken from. The encoder must
    /// have the recorded fingerprint.
    pub fn restore(&self, encoder: &FrozenEncoder, vocab: Option<&Vocabulary>) -> Result<Model> {
        if encoder.fingerprint() != self.meta.encoder_fingerprint {
            return Err(Error::Config(format!(
                "checkpoint was trained against encoder {:#018x}, got {:#018x}",
                self.meta.encoder_fingerprint,
                encoder.fingerprint()
            )));
        }
        let mut model = Model::new(self.meta.model.clone(), encoder, vocab)?;
        let loaded = model.load_tensors(&self.tensors, |_| true)?;
        if loaded != model.params().len() {
            let have: Vec<&str> = self.tensors.iter().map(|(n, _)| n.as_str()).collect();
            let missing = model
                .params()
                .iter()
                .filter(|(_, p)| !have.contains(&p.name()))
                .map(|(_, p)| format!("{}: missing from checkpoint", p.name()))
                .collect();
            return Err(Error::Shape(missing));
        }
        Ok(model)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Loads only the fuser layer weights of `ckpt` into `model`; label
/// embeddings stay as initialized. Returns the number of tensors loaded.
pub fn warm_start(model: &mut Model, ckpt: &Checkpoint) -> Result<usize> {
    model.load_tensors(&ckpt.tensors, |n| n.starts_with(FUSER_PREFIX))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// Wall-clock seconds per epoch, excluding dev evaluation.
    pub epoch_seconds: Vec<f64>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn final_dev(&self) -> Option<&Metrics> {
        self.history
            .get(self.best_epoch.checked_sub(1)?)?
            .dev
            .as_ref()
    }
}

/// Encodes every example and keeps the layers in `mask`.
pub fn encode_examples(
    encoder: &FrozenEncoder,
    examples: &[Example],
    mask: LayerMask,
    threads: usize,
) -> Result<Vec<LayerFeatures>> {
    let seqs: Vec<TokenSequence> = examples.iter().map(|e| e.tokens.clone()).collect();
    Ok(encoder
        .encode_batch(&seqs, threads)?
        .into_iter()
        .map(|all| LayerFeatures::select(all, mask))
        .collect())
}

/// Mean loss, metrics and predictions over pre-encoded examples.
pub fn evaluate_model(
    model: &Model,
    features: &[LayerFeatures],
    examples: &[Example],
) -> Result<(f64, Metrics, Vec<Prediction>)> {
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(examples.len());
    for (f, ex) in features.iter().zip(examples) {
        let (loss, p) = model.evaluate_one(f, &ex.target)?;
        total += loss;
        preds.push(p);
    }
    let targets: Vec<Target> = examples.iter().map(|e| e.target.clone()).collect();
    let m = metrics::evaluate(model.task(), model.labels().names(), &preds, &targets)?;
    Ok((total / examples.len().max(1) as f64, m, preds))
}

/// One optimizer step on a batch: zero gradients, accumulate the gradient
/// of the mean loss, update. Returns the mean loss. A non-finite loss is
/// returned without updating.
pub fn train_step(
    model: &mut Model,
    opt: &mut Optimizer,
    features: &[LayerFeatures],
    targets: &[&Target],
) -> Result<f64> {
    if features.is_empty() || features.len() != targets.len() {
        return Err(Error::Usage(format!(
            "{} feature sets for {} targets",
            features.len(),
            targets.len()
        )));
    }
    let scale = 1.0 / features.len() as f64;
    model.params_mut().zero_grad();
    let mut total = 0.0;
    for (f, t) in features.iter().zip(targets) {
        let mut tape = Tape::new();
        let loss = model.loss(&mut tape, f, t)?;
        total += tape.value(loss).item();
        let scaled = tape.scale(loss, scale);
        tape.backward(scaled, model.params_mut())?;
    }
    let mean = total * scale;
    if mean.is_finite() {
        opt.step(model.params_mut());
    }
    Ok(mean)
}

enum Source<'a> {
    Live,
    Store(&'a mut FeatureStore),
}

type NamedTensors = Vec<(String, Tensor)>;

/// Trains `model` on `train`, evaluating on `dev` after each epoch. With a
/// store, epoch 1 encodes and caches features and later epochs read them
/// back exclusively. When `dev` is non-empty and early stopping is enabled
/// the best-dev parameters are restored at the end.
pub fn train(
    cfg: &TrainConfig,
    encoder: &FrozenEncoder,
    model: &mut Model,
    train: &[Example],
    dev: &[Example],
    store: Option<&mut FeatureStore>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    for ex in train.iter().chain(dev) {
        ex.validate(model.task(), model.labels().len())?;
    }
    if cfg.use_feature_store != store.is_some() {
        return Err(Error::Config(
            "use_feature_store requires exactly one open feature store".into(),
        ));
    }
    let mut source = match store {
        Some(s) => Source::Store(s),
        None => Source::Live,
    };
    let mask = model.feature_mask();
    let fingerprint = encoder.fingerprint();
    let dev_features = if dev.is_empty() {
        Vec::new()
    } else {
        encode_examples(encoder, dev, mask, cfg.threads)?
    };

    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut rng = Rng::derive(cfg.seed, 0x7EA1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut epoch_seconds = Vec::new();
    let mut last_good = Checkpoint::capture(model, encoder, Some(cfg), &history);
    // (dev score, epoch, parameters)
    let mut best: Option<(f64, usize, NamedTensors)> = None;

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let start = Instant::now();
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let feats = batch_features(
                encoder,
                &mut source,
                train,
                batch,
                mask,
                fingerprint,
                epoch,
                cfg.threads,
            )?;
            let targets: Vec<&Target> = batch.iter().map(|&i| &train[i].target).collect();
            let loss = train_step(model, &mut opt, &feats, &targets)?;
            if !loss.is_finite() || !model.params().all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    last_good: Box::new(last_good),
                });
            }
            loss_sum += loss * batch.len() as f64;
        }
        if let Source::Store(s) = &mut source {
            if epoch == 1 {
                s.flush()?;
            }
        }
        epoch_seconds.push(start.elapsed().as_secs_f64());
        let dev_metrics = if dev.is_empty() {
            None
        } else {
            Some(evaluate_model(model, &dev_features, dev)?.1)
        };
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            dev: dev_metrics.clone(),
        });
        last_good = Checkpoint::capture(model, encoder, Some(cfg), &history);

        if let (Some(m), Some(patience)) = (&dev_metrics, cfg.patience) {
            let score = m.primary();
            if best.as_ref().is_none_or(|b| score > b.0) {
                best = Some((score, epoch, model.named_tensors()));
            }
            let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
            if epoch - best_epoch >= patience {
                break;
            }
        }
    }

    let best_epoch = match best {
        Some((_, e, tensors)) => {
            model.load_tensors(&tensors, |_| true)?;
            e
        }
        None => history.len(),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint::capture(model, encoder, Some(cfg), &history),
        history,
        epoch_seconds,
        best_epoch,
    })
}

#[allow(clippy::too_many_arguments)]
fn batch_features(
    encoder: &FrozenEncoder,
    source: &mut Source<'_>,
    examples: &[Example],
    batch: &[usize],
    mask: LayerMask,
    fingerprint: u64,
    epoch: usize,
    threads: usize,
) -> Result<Vec<LayerFeatures>> {
    match source {
        Source::Live => {
            let seqs: Vec<TokenSequence> =
                batch.iter().map(|&i| examples[i].tokens.clone()).collect();
            Ok(encoder
                .encode_batch(&seqs, threads)?
                .into_iter()
                .map(|all| LayerFeatures::select(all, mask))
                .collect())
        }
        Source::Store(store) => {
            let mut out = Vec::with_capacity(batch.len());
            for &i in batch {
                let key = FeatureKey::new(fingerprint, &examples[i].tokens, mask);
                let rec = match store.get(&key)? {
                    Some(r) => r,
                    None if epoch == 1 => {
                        let rec = FeatureRecord::from_encoder_output(
                            key,
                            &encoder.encode(&examples[i].tokens)?,
                        )?;
                        store.put(&rec)?;
                        rec
                    }
                    None => {
                        return Err(Error::Integrity(format!(
                            "feature store lacks input digest {:#018x} after the first epoch",
                            key.input_digest
                        )))
                    }
                };
                out.push(LayerFeatures::from_record(rec));
            }
            Ok(out)
        }
    }
}

/// Checks analytic gradients of the loss on one example against central
/// differences. `per_param` caps the number of coordinates checked in each
/// parameter tensor (`None` checks every scalar).
pub fn grad_check(
    model: &Model,
    features: &LayerFeatures,
    target: &Target,
    tolerance: f64,
    per_param: Option<usize>,
) -> Result<GradCheckReport> {
    let mut store = model.params().clone();
    store.zero_grad();
    {
        let mut tape = Tape::new();
        let loss = model.loss_with(&store, &mut tape, features, target)?;
        tape.backward(loss, &mut store)?;
    }
    Ok(gradcheck::compare_sampled(
        &mut store,
        FD_STEP,
        tolerance,
        per_param,
        model.spec().seed,
        |s| {
            let mut tape = Tape::new();
            model
                .loss_with(s, &mut tape, features, target)
                .map_or(f64::NAN, |l| tape.value(l).item())
        },
    ))
}
