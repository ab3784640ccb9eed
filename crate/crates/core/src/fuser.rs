//! Label embeddings and the label-aware feature fuser.
//!
//! The fuser is a non-causal transformer decoder layer whose "sequence" is the
//! task row followed by `N·k` label rows. Each application does self-attention
//! among those rows, cross-attention into one layer of frozen encoder
//! features, then a feed-forward block, all with post-norm residuals.

use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::store::{FeatureRecord, LayerMask};
use crate::tensor::{Tensor, LAYER_NORM_EPS};
use crate::vocab::{Vocabulary, BOS_ID, RESERVED};

/// Std of fuser projection weights at initialization.
pub const FUSER_WEIGHT_STD: f64 = 0.02;
/// Half-width of the uniform random label initialization.
pub const UNIFORM_INIT_RANGE: f64 = 0.5;
/// Half-width of the jitter separating replicas of one class label.
pub const REPLICA_JITTER: f64 = 0.01;
/// Prefix of parameter names that belong to the fuser layers proper.
pub const FUSER_PREFIX: &str = "fuser.";
pub const EMBEDDINGS_NAME: &str = "labels.embeddings";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    names: Vec<String>,
    k: usize,
}

impl LabelSet {
    pub fn new(names: Vec<String>, k: usize) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 labels, got {}",
                names.len()
            )));
        }
        if k == 0 {
            return Err(Error::Config(
                "embeddings per label must be at least 1".into(),
            ));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::Config(format!("duplicate label {dup:?}")));
        }
        Ok(Self { names, k })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Rows of the embedding matrix: the task row plus `N·k` label rows.
    pub fn rows(&self) -> usize {
        1 + self.names.len() * self.k
    }

    /// Row holding replica `r` of class `c`.
    pub fn row_of(&self, class: usize, replica: usize) -> usize {
        1 + class * self.k + replica
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    RandomUniform,
    SampledVocab,
    ClassLabel,
    OppositeLabel,
}

impl InitStrategy {
    pub const ALL: [InitStrategy; 4] = [
        InitStrategy::RandomUniform,
        InitStrategy::SampledVocab,
        InitStrategy::ClassLabel,
        InitStrategy::OppositeLabel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InitStrategy::RandomUniform => "random_uniform",
            InitStrategy::SampledVocab => "sampled_vocab",
            InitStrategy::ClassLabel => "class_label",
            InitStrategy::OppositeLabel => "opposite_label",
        }
    }
}

/// Which encoder layer the `i`-th fuser application attends to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMap {
    /// `⌊L_e / i⌋`: the first application reads the top layer, later ones
    /// read progressively shallower layers.
    #[default]
    Floor,
    /// `⌊L_e · i / L_d⌋`: shallow to deep, ending at the top layer.
    Proportional,
}

impl LayerMap {
    /// Encoder layer (1-based, clamped to `[1, encoder_layers]`) for fuser
    /// application `i` in `1..=fuser_layers`.
    pub fn map(self, i: usize, encoder_layers: usize, fuser_layers: usize) -> usize {
        assert!(
            i >= 1 && i <= fuser_layers,
            "fuser layer {i} outside 1..={fuser_layers}"
        );
        let raw = match self {
            LayerMap::Floor => encoder_layers / i,
            LayerMap::Proportional => encoder_layers * i / fuser_layers,
        };
        raw.clamp(1, encoder_layers)
    }
}

/// `⌊L_e / i⌋` clamped to at least 1.
pub fn layer_mapping(i: usize, encoder_layers: usize) -> usize {
    LayerMap::Floor.map(i, encoder_layers, i)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FuserConfig {
    pub layers: usize,
    pub weight_shared: bool,
    pub layer_map: LayerMap,
    pub heads: usize,
}

impl Default for FuserConfig {
    fn default() -> Self {
        Self {
            layers: 1,
            weight_shared: true,
            layer_map: LayerMap::Floor,
            heads: 4,
        }
    }
}

impl FuserConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("fuser needs at least one layer".into()));
        }
        if self.heads == 0 || !dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {dim} not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }

    /// Distinct parameter sets: one when shared, else one per layer.
    pub fn parameter_sets(&self) -> usize {
        if self.weight_shared {
            1
        } else {
            self.layers
        }
    }

    /// Encoder layers read by the fuser.
    pub fn layer_mask(&self, encoder_layers: usize) -> LayerMask {
        LayerMask::from_layers(
            (1..=self.layers).map(|i| self.layer_map.map(i, encoder_layers, self.layers)),
        )
    }
}

/// Frozen encoder outputs indexed by 1-based layer. Only some layers need to
/// be present.
#[derive(Debug, Clone, Default)]
pub struct LayerFeatures {
    layers: Vec<Option<Arc<Tensor>>>,
}

impl LayerFeatures {
    /// Keeps the layers of a full encoder output selected by `mask`.
    pub fn select(all: Vec<Tensor>, mask: LayerMask) -> Self {
        let layers = all
            .into_iter()
            .enumerate()
            .map(|(i, t)| mask.contains(i + 1).then(|| Arc::new(t)))
            .collect();
        Self { layers }
    }

    pub fn from_record(rec: FeatureRecord) -> Self {
        let mask = rec.key.layer_mask;
        let top = mask.layers().last().copied().unwrap_or(0);
        let mut layers = vec![None; top];
        for (l, t) in mask.layers().into_iter().zip(rec.layers) {
            layers[l - 1] = Some(Arc::new(t));
        }
        Self { layers }
    }

    pub fn get(&self, layer: usize) -> Result<&Arc<Tensor>> {
        layer
            .checked_sub(1)
            .and_then(|i| self.layers.get(i))
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Config(format!("encoder layer {layer} features not supplied")))
    }

    pub fn seq_len(&self) -> usize {
        self.layers.iter().flatten().next().map_or(0, |t| t.rows())
    }

    /// Present layers, ascending, as `(layer, tensor)`.
    pub fn present(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.as_deref().map(|t| (i + 1, t)))
    }
}

#[derive(Debug, Clone)]
struct Projection {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct FuserLayerIds {
    self_q: Projection,
    self_k: Projection,
    self_v: Projection,
    self_o: Projection,
    norm1: Norm,
    cross_q: Projection,
    cross_k: Projection,
    cross_v: Projection,
    cross_o: Projection,
    norm2: Norm,
    ffn_in: Projection,
    ffn_out: Projection,
    norm3: Norm,
}

/// Trainable label embeddings plus the fuser layer(s). Parameter values live
/// in a caller-owned [`ParamStore`].
#[derive(Debug, Clone)]
pub struct LabelFuser {
    config: FuserConfig,
    labels: LabelSet,
    dim: usize,
    feature_dim: usize,
    encoder_layers: usize,
    embeddings: ParamId,
    layers: Vec<FuserLayerIds>,
}

fn add_projection(
    store: &mut ParamStore,
    rng: &mut Rng,
    name: &str,
    rows: usize,
    cols: usize,
) -> Projection {
    Projection {
        w: store.add(
            format!("{name}.weight"),
            rng.normal_tensor(&[rows, cols], FUSER_WEIGHT_STD),
            true,
        ),
        b: store.add(format!("{name}.bias"), Tensor::zeros(&[cols]), true),
    }
}

fn add_norm(store: &mut ParamStore, name: &str, dim: usize) -> Norm {
    Norm {
        gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0), true),
        bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), true),
    }
}

impl LabelFuser {
    /// Registers label embeddings (initialized per `init`) and fuser weights in
    /// `store`. The fuser width equals the encoder hidden size.
    pub fn new(
        store: &mut ParamStore,
        config: FuserConfig,
        labels: LabelSet,
        encoder: &FrozenEncoder,
        vocab: Option<&Vocabulary>,
        init: InitStrategy,
        seed: u64,
    ) -> Result<Self> {
        let dim = encoder.config().hidden;
        config.validate(dim)?;
        let table = init_embeddings(&labels, init, encoder, vocab, seed)?;
        let embeddings = store.add(EMBEDDINGS_NAME, table, true);
        let mut rng = Rng::derive(seed, 0xF05E);
        let h = dim;
        let layers = (0..config.parameter_sets())
            .map(|j| {
                let p = |s: &str| format!("{FUSER_PREFIX}layer{j}.{s}");
                FuserLayerIds {
                    self_q: add_projection(store, &mut rng, &p("self.q"), dim, dim),
                    self_k: add_projection(store, &mut rng, &p("self.k"), dim, dim),
                    self_v: add_projection(store, &mut rng, &p("self.v"), dim, dim),
                    self_o: add_projection(store, &mut rng, &p("self.o"), dim, dim),
                    norm1: add_norm(store, &p("norm1"), dim),
                    cross_q: add_projection(store, &mut rng, &p("cross.q"), dim, dim),
                    cross_k: add_projection(store, &mut rng, &p("cross.k"), h, dim),
                    cross_v: add_projection(store, &mut rng, &p("cross.v"), h, dim),
                    cross_o: add_projection(store, &mut rng, &p("cross.o"), dim, dim),
                    norm2: add_norm(store, &p("norm2"), dim),
                    ffn_in: add_projection(store, &mut rng, &p("ffn.in"), dim, 4 * dim),
                    ffn_out: add_projection(store, &mut rng, &p("ffn.out"), 4 * dim, dim),
                    norm3: add_norm(store, &p("norm3"), dim),
                }
            })
            .collect();
        Ok(Self {
            config,
            labels,
            dim,
            feature_dim: h,
            encoder_layers: encoder.config().layers,
            embeddings,
            layers,
        })
    }

    pub fn config(&self) -> &FuserConfig {
        &self.config
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embeddings(&self) -> ParamId {
        self.embeddings
    }

    /// Encoder layer read by fuser application `i` (1-based).
    pub fn source_layer(&self, i: usize) -> usize {
        self.config
            .layer_map
            .map(i, self.encoder_layers, self.config.layers)
    }

    pub fn layer_mask(&self) -> LayerMask {
        self.config.layer_mask(self.encoder_layers)
    }

    /// Runs all fuser applications and returns the `(1 + N·k) × D` fused rows.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: &LayerFeatures,
    ) -> Result<Var> {
        let mut x = tape.param(store, self.embeddings);
        for i in 1..=self.config.layers {
            let feats = features.get(self.source_layer(i))?;
            if feats.cols() != self.feature_dim {
                return Err(Error::Config(format!(
                    "features have width {}, fuser expects {}",
                    feats.cols(),
                    self.feature_dim
                )));
            }
            let mem = tape.constant_shared(Arc::clone(feats));
            let ids = &self.layers[if self.config.weight_shared { 0 } else { i - 1 }];
            x = self.apply_layer(tape, store, ids, x, mem)?;
        }
        Ok(x)
    }

    fn apply_layer(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &FuserLayerIds,
        x: Var,
        mem: Var,
    ) -> Result<Var> {
        let heads = self.config.heads;
        let lin = |tape: &mut Tape, x: Var, p: &Projection| -> Result<Var> {
            let w = tape.param(store, p.w);
            let b = tape.param(store, p.b);
            tape.linear(x, w, b)
        };
        let norm = |tape: &mut Tape, x: Var, n: &Norm| -> Result<Var> {
            let g = tape.param(store, n.gain);
            let b = tape.param(store, n.bias);
            tape.layer_norm(x, g, b, LAYER_NORM_EPS)
        };

        let q = lin(tape, x, &ids.self_q)?;
        let k = lin(tape, x, &ids.self_k)?;
        let v = lin(tape, x, &ids.self_v)?;
        let a = tape.attention(q, k, v, heads)?;
        let a = lin(tape, a, &ids.self_o)?;
        let r = tape.add(x, a)?;
        let x = norm(tape, r, &ids.norm1)?;

        let q = lin(tape, x, &ids.cross_q)?;
        let k = lin(tape, mem, &ids.cross_k)?;
        let v = lin(tape, mem, &ids.cross_v)?;
        let a = tape.attention(q, k, v, heads)?;
        let a = lin(tape, a, &ids.cross_o)?;
        let r = tape.add(x, a)?;
        let x = norm(tape, r, &ids.norm2)?;

        let f = lin(tape, x, &ids.ffn_in)?;
        let f = tape.gelu(f);
        let f = lin(tape, f, &ids.ffn_out)?;
        let r = tape.add(x, f)?;
        norm(tape, r, &ids.norm3)
    }

    /// Per-class scores: the sum over a class's replicas of the cosine between
    /// the fused task row and the fused replica row. Returns `N` scalar vars.
    pub fn score(&self, tape: &mut Tape, fused: Var) -> Result<Vec<Var>> {
        let task = tape.row(fused, 0);
        (0..self.labels.len())
            .map(|c| {
                let logits = (0..self.labels.k())
                    .map(|r| {
                        let row = tape.row(fused, self.labels.row_of(c, r));
                        tape.cosine(task, row)
                    })
                    .collect::<Result<Vec<_>>>()?;
                tape.sum_scalars(&logits)
            })
            .collect()
    }

    /// The fused label rows (task row dropped), `N·k × D`.
    pub fn label_rows(&self, tape: &mut Tape, fused: Var) -> Var {
        let idx: Vec<usize> = (1..self.labels.rows()).collect();
        tape.gather_rows(fused, &idx)
    }
}

/// Exact number of trainable scalars: the embedding table plus one fuser
/// parameter set per distinct layer (one when shared).
pub fn param_count(
    config: &FuserConfig,
    labels: &LabelSet,
    dim: usize,
    feature_dim: usize,
) -> usize {
    let d = dim;
    let proj = |i: usize, o: usize| i * o + o;
    let per_layer = 4 * proj(d, d)
        + 2 * proj(d, d)
        + 2 * proj(feature_dim, d)
        + proj(d, 4 * d)
        + proj(4 * d, d)
        + 3 * 2 * d;
    labels.rows() * d + config.parameter_sets() * per_layer
}

fn class_name_embedding(
    name: &str,
    encoder: &FrozenEncoder,
    vocab: &Vocabulary,
) -> Result<Vec<f64>> {
    let toks: Vec<&str> = name.split_whitespace().collect();
    if toks.is_empty() {
        return Err(Error::Init(format!("class name {name:?} has no tokens")));
    }
    let h = encoder.config().hidden;
    let mut acc = vec![0.0; h];
    for t in &toks {
        let id = vocab.id(t);
        if id as usize >= encoder.config().vocab_size {
            return Err(Error::Init(format!(
                "token {t:?} has id {id} outside the encoder vocabulary"
            )));
        }
        for (a, v) in acc.iter_mut().zip(encoder.embedding_row(id)) {
            *a += v;
        }
    }
    let n = toks.len() as f64;
    Ok(acc.into_iter().map(|v| v / n).collect())
}

/// Initial `(1 + N·k) × H` label embedding table. Row 0 is always the
/// embedding of the sequence-start token.
pub fn init_embeddings(
    labels: &LabelSet,
    strategy: InitStrategy,
    encoder: &FrozenEncoder,
    vocab: Option<&Vocabulary>,
    seed: u64,
) -> Result<Tensor> {
    let h = encoder.config().hidden;
    let (n, k) = (labels.len(), labels.k());
    let mut rng = Rng::derive(seed, 0x1AB1);
    let mut table = Tensor::zeros(&[labels.rows(), h]);
    table
        .row_mut(0)
        .copy_from_slice(encoder.embedding_row(BOS_ID));
    match strategy {
        InitStrategy::RandomUniform => {
            for r in 1..labels.rows() {
                for v in table.row_mut(r) {
                    *v = rng.uniform(-UNIFORM_INIT_RANGE, UNIFORM_INIT_RANGE);
                }
            }
        }
        InitStrategy::SampledVocab => {
            let needed = RESERVED as usize + n * k;
            if needed > encoder.config().vocab_size {
                return Err(Error::Init(format!(
                    "vocabulary of {} ids cannot supply {} label rows",
                    encoder.config().vocab_size,
                    n * k
                )));
            }
            for r in 1..labels.rows() {
                let id = RESERVED + (r - 1) as u32;
                table.row_mut(r).copy_from_slice(encoder.embedding_row(id));
            }
        }
        InitStrategy::ClassLabel | InitStrategy::OppositeLabel => {
            let vocab =
                vocab.ok_or_else(|| Error::Init("class-label init needs a vocabulary".into()))?;
            let per_class = labels
                .names()
                .iter()
                .map(|name| class_name_embedding(name, encoder, vocab))
                .collect::<Result<Vec<_>>>()?;
            for c in 0..n {
                let src = if strategy == InitStrategy::OppositeLabel {
                    n - 1 - c
                } else {
                    c
                };
                for r in 0..k {
                    let row = table.row_mut(labels.row_of(c, r));
                    row.copy_from_slice(&per_class[src]);
                    if k > 1 {
                        for v in row {
                            *v += rng.uniform(-REPLICA_JITTER, REPLICA_JITTER);
                        }
                    }
                }
            }
        }
    }
    Ok(table)
}
