use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("encoded input needs {required} positions but max_len is {max_len} (overflow {overflow})")]
    InputTooLong {
        required: usize,
        max_len: usize,
        overflow: usize,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("manifest {path}: {message}")]
    Manifest { path: String, message: String },

    #[error("integrity check failed for {0}: content hash mismatch")]
    HashMismatch(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("non-finite loss {loss} at step {step}")]
    Divergence { step: usize, loss: f64 },

    #[error("embeddings are not comparable: {0}")]
    Comparability(String),

    #[error("relative gain undefined for baseline score 0 (target {0})")]
    UndefinedGain(String),

    #[error("results store {path} is corrupt at line {line}: {message}; refusing to resume")]
    CorruptStore {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("ingestion: {0}")]
    Ingest(String),

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
