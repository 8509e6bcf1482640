use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or ranks that do not agree with what an operation needs.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration that can never produce a valid layer or model.
    #[error("config error: {0}")]
    Config(String),

    /// NaN or infinity produced by an operation.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("ingestion error in {path} at byte offset {offset}: {reason}")]
    Ingestion { path: PathBuf, offset: u64, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("shape mismatch for tensor `{name}`: expected {expected:?}, found {found:?}")]
    TensorShape { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("training diverged at step {step} (lr {lr:e}): loss is {loss}")]
    Diverged { step: usize, lr: f64, loss: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Prefix a numeric error with the layer it came from.
    pub fn in_layer(self, layer: &str) -> Self {
        match self {
            Error::NonFinite { op } => Error::NonFinite { op: format!("{layer}/{op}") },
            other => other,
        }
    }
}
