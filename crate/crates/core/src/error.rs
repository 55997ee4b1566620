use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = RadError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum RadError {
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training error in layer {layer}: {msg}")]
    Training { layer: usize, msg: String },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("sampling produced non-finite values at denoising step {step}")]
    Sampling { step: usize },

    #[error("retrieval miss: no database state clears the similarity threshold")]
    RetrievalMiss,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("environment fault at step {step}: {msg}")]
    Env { step: usize, msg: String },

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl RadError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RadError::Io {
            path: path.into(),
            source,
        }
    }
}
