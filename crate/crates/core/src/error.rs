use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApeError {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("sequence of length {len} exceeds the configured maximum of {max}")]
    OverLength { len: usize, max: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("every position is masked out of the loss")]
    AllMasked,

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),
}

impl ApeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ApeError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = ApeError> = std::result::Result<T, E>;
