use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("context overflow: sequence of {len} tokens exceeds limit {limit}")]
    ContextOverflow { len: usize, limit: usize },

    #[error("part token at position {position} needs an evidence bundle but none was supplied")]
    MissingBundle { position: usize },

    #[error("position {position} out of range for sequence of length {len}")]
    OutOfRange { position: usize, len: usize },

    #[error("judge unavailable: {0}")]
    Judge(#[from] crate::rewards::JudgeError),

    #[error("checkpoint lineage violation: {0}")]
    Lineage(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// True for failures that may succeed on retry (external judge transport).
    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::Judge(e) if e.is_retriable())
    }
}
