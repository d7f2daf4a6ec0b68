use thiserror::Error;

use crate::trainer::Checkpoint;

/// Errors surfaced by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("memory bank input is empty")]
    EmptyBank,

    #[error("no foreground features")]
    EmptyForeground,

    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss term `{0}`")]
    NonFiniteLoss(&'static str),

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize, last_good: Box<Checkpoint> },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format { offset, msg: msg.into() }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
