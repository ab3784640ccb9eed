//! A trainable head over frozen features: either label fusion or a linear
//! probe baseline.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::fuser::{FuserConfig, InitStrategy, LabelFuser, LabelSet, LayerFeatures};
use crate::heads::{self, SoftmaxAxis, Target, TaskKind, DEFAULT_MARGIN};
use crate::metrics::Prediction;
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::store::LayerMask;
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

pub const PROBE_WEIGHT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Label embeddings plus fuser, scored by cosine or label-row logits.
    #[default]
    LabelFusion,
    /// Linear map from top-layer features to label logits.
    LinearProbe,
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub task: TaskKind,
    pub labels: Vec<String>,
    #[serde(default = "one")]
    pub k: usize,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default)]
    pub fuser: FuserConfig,
    #[serde(default = "default_init")]
    pub init: InitStrategy,
    #[serde(default)]
    pub softmax_axis: Option<SoftmaxAxis>,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn default_init() -> InitStrategy {
    InitStrategy::SampledVocab
}

fn default_margin() -> f64 {
    DEFAULT_MARGIN
}

impl ModelSpec {
    pub fn new(task: TaskKind, labels: Vec<String>) -> Self {
        Self {
            task,
            labels,
            k: 1,
            architecture: Architecture::LabelFusion,
            fuser: FuserConfig::default(),
            init: default_init(),
            softmax_axis: None,
            margin: DEFAULT_MARGIN,
            seed: 0,
        }
    }

    pub fn axis(&self) -> SoftmaxAxis {
        self.softmax_axis
            .unwrap_or_else(|| self.task.default_axis())
    }
}

#[derive(Debug, Clone)]
enum Head {
    Fusion(LabelFuser),
    Probe { weight: ParamId, bias: ParamId },
}

/// Forward result before the task loss.
#[derive(Debug, Clone)]
pub enum Output {
    /// One scalar var per class.
    Scores(Vec<Var>),
    /// `M × N` token-label logits.
    Logits(Var),
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    labels: LabelSet,
    params: ParamStore,
    head: Head,
    encoder_layers: usize,
}

impl Model {
    pub fn new(
        spec: ModelSpec,
        encoder: &FrozenEncoder,
        vocab: Option<&Vocabulary>,
    ) -> Result<Self> {
        if spec.task == TaskKind::SpanQa && (spec.labels != heads::QA_LABELS || spec.k != 1) {
            return Err(Error::Config(
                "span QA uses labels BEGIN, END with k = 1".into(),
            ));
        }
        if !(spec.margin >= 0.0) {
            return Err(Error::Config(format!(
                "margin must be non-negative, got {}",
                spec.margin
            )));
        }
        let labels = LabelSet::new(spec.labels.clone(), spec.k)?;
        let mut params = ParamStore::new();
        let head = match spec.architecture {
            Architecture::LabelFusion => Head::Fusion(LabelFuser::new(
                &mut params,
                spec.fuser.clone(),
                labels.clone(),
                encoder,
                vocab,
                spec.init,
                spec.seed,
            )?),
            Architecture::LinearProbe => {
                let h = encoder.config().hidden;
                let mut rng = Rng::derive(spec.seed, 0x9B0E);
                let weight = params.add(
                    "probe.weight",
                    rng.normal_tensor(&[h, labels.len()], PROBE_WEIGHT_STD),
                    true,
                );
                let bias = params.add("probe.bias", Tensor::zeros(&[labels.len()]), true);
                Head::Probe { weight, bias }
            }
        };
        Ok(Self {
            spec,
            labels,
            params,
            head,
            encoder_layers: encoder.config().layers,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn task(&self) -> TaskKind {
        self.spec.task
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn fuser(&self) -> Option<&LabelFuser> {
        match &self.head {
            Head::Fusion(f) => Some(f),
            Head::Probe { .. } => None,
        }
    }

    /// Encoder layers this model reads.
    pub fn feature_mask(&self) -> LayerMask {
        let top = LayerMask::from_layers([self.encoder_layers]);
        match &self.head {
            Head::Fusion(f) if self.spec.task.token_level() => LayerMask(f.layer_mask().0 | top.0),
            Head::Fusion(f) => f.layer_mask(),
            Head::Probe { .. } => top,
        }
    }

    pub fn forward(&self, tape: &mut Tape, features: &LayerFeatures) -> Result<Output> {
        self.forward_with(&self.params, tape, features)
    }

    /// Forward pass reading parameter values from `params`, which must have
    /// this model's layout (e.g. a perturbed copy for finite differences).
    pub fn forward_with(
        &self,
        params: &ParamStore,
        tape: &mut Tape,
        features: &LayerFeatures,
    ) -> Result<Output> {
        let top = features.get(self.encoder_layers)?;
        match &self.head {
            Head::Fusion(f) => {
                let fused = f.fuse(tape, params, features)?;
                if self.spec.task.token_level() {
                    let rows = f.label_rows(tape, fused);
                    let hidden = tape.constant_shared(top.clone());
                    Ok(Output::Logits(heads::token_label_logits(
                        tape,
                        hidden,
                        rows,
                        self.labels.k(),
                    )?))
                } else {
                    Ok(Output::Scores(f.score(tape, fused)?))
                }
            }
            Head::Probe { weight, bias } => {
                let w = tape.param(params, *weight);
                let b = tape.param(params, *bias);
                if self.spec.task.token_level() {
                    let hidden = tape.constant_shared(top.clone());
                    Ok(Output::Logits(tape.linear(hidden, w, b)?))
                } else {
                    let m = top.rows() as f64;
                    let mut pooled = vec![0.0; top.cols()];
                    for i in 0..top.rows() {
                        for (p, v) in pooled.iter_mut().zip(top.row(i)) {
                            *p += v / m;
                        }
                    }
                    let pooled = tape.constant(Tensor::from_vec(vec![1, pooled.len()], pooled)?);
                    let logits = tape.linear(pooled, w, b)?;
                    Ok(Output::Scores(
                        (0..self.labels.len())
                            .map(|c| tape.slice_cols(logits, c, 1))
                            .collect(),
                    ))
                }
            }
        }
    }

    /// Task loss for one example, recorded on `tape`.
    pub fn loss(&self, tape: &mut Tape, features: &LayerFeatures, target: &Target) -> Result<Var> {
        self.loss_with(&self.params, tape, features, target)
    }

    pub fn loss_with(
        &self,
        params: &ParamStore,
        tape: &mut Tape,
        features: &LayerFeatures,
        target: &Target,
    ) -> Result<Var> {
        let out = self.forward_with(params, tape, features)?;
        self.loss_from(tape, out, target)
    }

    fn loss_from(&self, tape: &mut Tape, out: Output, target: &Target) -> Result<Var> {
        let axis = self.spec.axis();
        match (out, target) {
            (Output::Scores(s), Target::Class(c)) => {
                heads::triplet_loss(tape, &s, *c, self.spec.margin)
            }
            (Output::Logits(l), Target::Tags(t))
                if self.spec.task == TaskKind::SequenceLabeling =>
            {
                heads::seq_label_loss(tape, l, t, axis)
            }
            (
                Output::Logits(l),
                Target::Span {
                    begin,
                    end,
                    context_len,
                },
            ) => heads::qa_loss(tape, l, *begin, *end, *context_len, axis),
            (_, t) => Err(Error::Input(format!(
                "target {t:?} does not fit task {}",
                self.spec.task.name()
            ))),
        }
    }

    /// Loss value and prediction from a single forward pass.
    pub fn evaluate_one(
        &self,
        features: &LayerFeatures,
        target: &Target,
    ) -> Result<(f64, Prediction)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, features)?;
        let pred = self.decode(&tape, &out, target)?;
        let loss = self.loss_from(&mut tape, out, target)?;
        Ok((tape.value(loss).item(), pred))
    }

    /// Prediction for an input. `context_len` limits span decoding for QA.
    pub fn predict(
        &self,
        features: &LayerFeatures,
        context_len: Option<usize>,
    ) -> Result<Prediction> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, features)?;
        let target = match self.spec.task {
            TaskKind::Classification => Target::Class(0),
            TaskKind::SequenceLabeling => Target::Tags(Vec::new()),
            TaskKind::SpanQa => Target::Span {
                begin: 0,
                end: 0,
                context_len: context_len.unwrap_or(features.seq_len()),
            },
        };
        self.decode(&tape, &out, &target)
    }

    fn decode(&self, tape: &Tape, out: &Output, target: &Target) -> Result<Prediction> {
        let axis = self.spec.axis();
        Ok(match out {
            Output::Scores(s) => {
                let vals: Vec<f64> = s.iter().map(|&v| tape.value(v).item()).collect();
                Prediction::Class(heads::predict_class(&vals))
            }
            Output::Logits(l) if self.spec.task == TaskKind::SequenceLabeling => {
                Prediction::Tags(heads::seq_label_predict(tape.value(*l), axis))
            }
            Output::Logits(l) => {
                let logits = tape.value(*l);
                let ctx = match target {
                    Target::Span { context_len, .. } => (*context_len).clamp(1, logits.rows()),
                    _ => logits.rows(),
                };
                let idx: Vec<usize> = (0..ctx).collect();
                let (b, e) = heads::qa_predict_span(&logits.gather_rows(&idx), axis);
                Prediction::Span(b, e)
            }
        })
    }

    /// Class scores as plain numbers (classification only).
    pub fn scores(&self, features: &LayerFeatures) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        match self.forward(&mut tape, features)? {
            Output::Scores(s) => Ok(s.iter().map(|&v| tape.value(v).item()).collect()),
            Output::Logits(_) => Err(Error::Usage(
                "scores are only defined for classification".into(),
            )),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(_, p)| (p.name().to_string(), p.value().clone()))
            .collect()
    }

    /// Overwrites parameters from `tensors` whose names pass `filter`. Every
    /// such tensor must exist in this model with the same shape; all
    /// offenders are listed in one shape error. Returns the number loaded.
    pub fn load_tensors(
        &mut self,
        tensors: &[(String, Tensor)],
        filter: impl Fn(&str) -> bool,
    ) -> Result<usize> {
        let mut problems = Vec::new();
        let mut plan = Vec::new();
        for (name, t) in tensors.iter().filter(|(n, _)| filter(n)) {
            match self.params.find(name) {
                None => problems.push(format!("{name}: not present in this model")),
                Some(id) if self.params.value(id).shape() != t.shape() => problems.push(format!(
                    "{name}: checkpoint {:?} vs model {:?}",
                    t.shape(),
                    self.params.value(id).shape()
                )),
                Some(id) => plan.push((id, t)),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Shape(problems));
        }
        for (id, t) in &plan {
            *self.params.get_mut(*id).value_mut() = (*t).clone();
        }
        Ok(plan.len())
    }
}
