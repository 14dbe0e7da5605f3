use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SateError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SateError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("input too short: {len} frames, need at least {min}")]
    InputTooShort { len: usize, min: usize },

    #[error("instance too large for exhaustive enumeration: {0} paths")]
    TooLarge(u128),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint incompatible at parameter `{name}`: {detail}")]
    Checkpoint { name: String, detail: String },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("training diverged at step {step}")]
    Diverged { step: usize, last_good: Option<PathBuf> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SateError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        SateError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        SateError::Config(detail.into())
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        SateError::Format {
            what,
            detail: detail.into(),
        }
    }
}
