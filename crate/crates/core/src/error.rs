use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::trainer::Checkpoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("init error: {0}")]
    Init(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated file: partial record at byte offset {offset}")]
    Truncated { offset: u64 },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("shape mismatch loading checkpoint: {}", .0.join("; "))]
    Shape(Vec<String>),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}:{line}: validation error: {msg}")]
    Validation {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Diverged {
        epoch: usize,
        step: usize,
        last_good: Box<Checkpoint>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
