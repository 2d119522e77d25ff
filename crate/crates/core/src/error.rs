use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid matrix: {rows}x{cols} needs {expected} elements, got {got}")]
    BadLength {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("gradient output must be 1x1, got {0:?}")]
    NonScalarOutput((usize, usize)),

    #[error("rank {rank} must be in 1..=min({d}, {k})")]
    RankTooLarge { rank: usize, d: usize, k: usize },

    #[error("non-finite loss at task {task}, step {step}")]
    NonFiniteLoss { task: usize, step: usize },

    #[error("power iteration did not converge after {0} iterations")]
    NoConvergence(usize),

    #[error("corrupt checkpoint at byte offset {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },

    #[error("missing input files: {0:?}")]
    MissingInputs(Vec<PathBuf>),

    #[error("config: {0}")]
    Config(String),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
