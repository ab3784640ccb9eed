//! Label-side tuning over a frozen transformer encoder.
//!
//! A small frozen encoder produces per-layer features; trainable label
//! embeddings are fused with those features by a cross-attention decoder
//! layer and scored against a task row. Features can be cached on disk so
//! that later epochs skip the encoder entirely.

// Index loops read better than zipped iterators in the kernels, and
// `!(x >= 0.0)` is used on purpose to reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod autograd;
pub mod cost;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fuser;
pub mod gradcheck;
pub mod heads;
pub mod instrument;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod param;
pub mod rng;
pub mod run;
pub mod store;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use autograd::{Tape, Var};
pub use encoder::{EncoderConfig, FrozenEncoder};
pub use error::{Error, Result};
pub use fuser::{
    param_count, FuserConfig, InitStrategy, LabelFuser, LabelSet, LayerFeatures, LayerMap,
};
pub use heads::{Example, SoftmaxAxis, Target, TaskKind};
pub use metrics::{Metrics, Prediction};
pub use model::{Architecture, Model, ModelSpec};
pub use optim::{Optimizer, OptimizerKind};
pub use param::{ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use store::{FeatureKey, FeatureRecord, FeatureStore, LayerMask, StoreMode};
pub use tensor::Tensor;
pub use trainer::{Checkpoint, TrainConfig, TrainOutcome};
pub use vocab::{TokenSequence, Vocabulary};
