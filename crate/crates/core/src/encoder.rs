//! Frozen transformer encoder standing in for a pretrained model.
//!
//! Parameters are drawn once from the seed and never change. Encoding uses the
//! plain tensor kernels, so no backward state is ever retained.

use std::hash::Hasher;

use fnv::FnvHasher;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{hash_parameter, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{self, Tensor, LAYER_NORM_EPS};
use crate::vocab::{TokenSequence, RESERVED};

/// Std of the Gaussian used for every projection weight.
pub const WEIGHT_STD: f64 = 0.02;
/// Std of the token embedding table.
pub const EMBEDDING_STD: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 64,
            heads: 4,
            ffn_dim: 256,
            vocab_size: 1000,
            max_len: 64,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.vocab_size <= RESERVED as usize {
            return Err(Error::Config(
                "vocab_size must exceed the reserved ids".into(),
            ));
        }
        if self.max_len == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("max_len and ffn_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    config: EncoderConfig,
    params: ParamStore,
    embedding: ParamId,
    layers: Vec<LayerIds>,
    positions: Tensor,
    fingerprint: u64,
}

/// Canonical parameter names and shapes, in hashing order.
fn layout(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let (h, f) = (cfg.hidden, cfg.ffn_dim);
    let mut out = vec![("embedding".to_string(), vec![cfg.vocab_size, h])];
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        out.extend([
            (p("attn.wq"), vec![h, h]),
            (p("attn.bq"), vec![h]),
            (p("attn.wk"), vec![h, h]),
            (p("attn.bk"), vec![h]),
            (p("attn.wv"), vec![h, h]),
            (p("attn.bv"), vec![h]),
            (p("attn.wo"), vec![h, h]),
            (p("attn.bo"), vec![h]),
            (p("ln1.gain"), vec![h]),
            (p("ln1.bias"), vec![h]),
            (p("ffn.w1"), vec![h, f]),
            (p("ffn.b1"), vec![f]),
            (p("ffn.w2"), vec![f, h]),
            (p("ffn.b2"), vec![h]),
            (p("ln2.gain"), vec![h]),
            (p("ln2.bias"), vec![h]),
        ]);
    }
    out
}

fn sinusoidal(max_len: usize, hidden: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[max_len, hidden]);
    for pos in 0..max_len {
        let row = pe.row_mut(pos);
        for i in 0..hidden {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / hidden as f64);
            row[i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

impl FrozenEncoder {
    /// Draws parameters from `config.seed`.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(config.seed, 0xE4C0);
        let tensors = layout(&config)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name == "embedding" {
                    rng.normal_tensor(&shape, EMBEDDING_STD)
                } else if name.ends_with(".gain") {
                    Tensor::full(&shape, 1.0)
                } else if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else {
                    rng.normal_tensor(&shape, WEIGHT_STD)
                };
                (name, t)
            })
            .collect();
        Self::from_named_tensors(config, tensors)
    }

    /// Builds an encoder from explicit parameters (e.g. a checkpoint fixture).
    /// Names and shapes must match the canonical layout exactly.
    pub fn from_named_tensors(
        config: EncoderConfig,
        tensors: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        let mut problems = Vec::new();
        if tensors.len() != expected.len() {
            problems.push(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            ));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&tensors) {
            if name != got_name || shape.as_slice() != t.shape() {
                problems.push(format!(
                    "{got_name} {:?} (expected {name} {shape:?})",
                    t.shape()
                ));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Shape(problems));
        }
        let mut params = ParamStore::new();
        for (name, t) in tensors {
            params.add(name, t, false);
        }
        let id = |n: String| params.find(&n).expect("layout name");
        let embedding = id("embedding".into());
        let layers = (0..config.layers)
            .map(|l| {
                let p = |s: &str| id(format!("layer{l}.{s}"));
                LayerIds {
                    wq: p("attn.wq"),
                    bq: p("attn.bq"),
                    wk: p("attn.wk"),
                    bk: p("attn.bk"),
                    wv: p("attn.wv"),
                    bv: p("attn.bv"),
                    wo: p("attn.wo"),
                    bo: p("attn.bo"),
                    ln1_g: p("ln1.gain"),
                    ln1_b: p("ln1.bias"),
                    w1: p("ffn.w1"),
                    b1: p("ffn.b1"),
                    w2: p("ffn.w2"),
                    b2: p("ffn.b2"),
                    ln2_g: p("ln2.gain"),
                    ln2_b: p("ln2.bias"),
                }
            })
            .collect();
        let positions = sinusoidal(config.max_len, config.hidden);
        let fingerprint = compute_fingerprint(&config, &params);
        Ok(Self {
            config,
            params,
            embedding,
            layers,
            positions,
            fingerprint,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Digest of the config and every parameter byte, fixed at construction.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Fresh digest of the parameter bytes only.
    pub fn param_hash(&self) -> u64 {
        self.params.byte_hash()
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(_, p)| (p.name().to_string(), p.value().clone()))
            .collect()
    }

    pub fn embedding_row(&self, id: u32) -> &[f64] {
        self.params.value(self.embedding).row(id as usize)
    }

    /// Hidden states after each layer, `M×H` each, `layers` entries.
    pub fn encode(&self, x: &TokenSequence) -> Result<Vec<Tensor>> {
        self.encode_with_prefix(x, None)
    }

    /// Like [`encode`](Self::encode) but with `P` continuous vectors prepended
    /// after embedding (the prompt-tuning input layout). Used for cost
    /// measurements; outputs cover all `P + M` positions.
    pub fn encode_with_prefix(
        &self,
        x: &TokenSequence,
        prefix: Option<&Tensor>,
    ) -> Result<Vec<Tensor>> {
        let h = self.config.hidden;
        let p = prefix.map_or(0, Tensor::rows);
        let total = p + x.len();
        if total > self.config.max_len {
            return Err(Error::Input(format!(
                "sequence length {total} exceeds max_len {}",
                self.config.max_len
            )));
        }
        if let Some(bad) = x
            .ids()
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let mut data = Vec::with_capacity(total * h);
        if let Some(pre) = prefix {
            if pre.cols() != h {
                return Err(Error::Dimension {
                    op: "encode prefix",
                    left: pre.shape().to_vec(),
                    right: vec![p, h],
                });
            }
            data.extend_from_slice(pre.data());
        }
        let emb = self.params.value(self.embedding);
        for (i, &id) in x.ids().iter().enumerate() {
            let pos = self.positions.row(p + i);
            data.extend(emb.row(id as usize).iter().zip(pos).map(|(e, q)| e + q));
        }
        let mut hidden = Tensor::from_vec(vec![total, h], data)?;
        let mut outputs = Vec::with_capacity(self.layers.len());
        for ids in &self.layers {
            hidden = self.layer_forward(ids, &hidden)?;
            outputs.push(hidden.clone());
        }
        Ok(outputs)
    }

    fn layer_forward(&self, ids: &LayerIds, x: &Tensor) -> Result<Tensor> {
        let v = |id: ParamId| self.params.value(id);
        let lin = |x: &Tensor, w: ParamId, b: ParamId| tensor::matmul(x, v(w))?.add_row_bias(v(b));
        let q = lin(x, ids.wq, ids.bq)?;
        let k = lin(x, ids.wk, ids.bk)?;
        let val = lin(x, ids.wv, ids.bv)?;
        let attn = tensor::attention(&q, &k, &val, self.config.heads)?;
        let attn = lin(&attn, ids.wo, ids.bo)?;
        let x = tensor::layer_norm(&x.add(&attn)?, v(ids.ln1_g), v(ids.ln1_b), LAYER_NORM_EPS)?;
        let ff = tensor::gelu(&lin(&x, ids.w1, ids.b1)?);
        let ff = lin(&ff, ids.w2, ids.b2)?;
        tensor::layer_norm(&x.add(&ff)?, v(ids.ln2_g), v(ids.ln2_b), LAYER_NORM_EPS)
    }

    /// Encodes many sequences on a pool of at most `threads` workers. Output
    /// order matches input order.
    pub fn encode_batch(&self, seqs: &[TokenSequence], threads: usize) -> Result<Vec<Vec<Tensor>>> {
        if threads <= 1 {
            return seqs.iter().map(|s| self.encode(s)).collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| seqs.par_iter().map(|s| self.encode(s)).collect())
    }
}

fn compute_fingerprint(cfg: &EncoderConfig, params: &ParamStore) -> u64 {
    let mut h = FnvHasher::default();
    for v in [
        cfg.layers as u64,
        cfg.hidden as u64,
        cfg.heads as u64,
        cfg.ffn_dim as u64,
        cfg.vocab_size as u64,
        cfg.max_len as u64,
        cfg.seed,
    ] {
        h.write(&v.to_le_bytes());
    }
    for (_, p) in params.iter() {
        hash_parameter(&mut h, p);
    }
    h.finish()
}
