use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: String,
        found: String,
    },

    /// An index (class label, channel id, ...) is out of range.
    #[error("index out of range in {context}: {index} not in [0, {bound})")]
    Index {
        context: &'static str,
        index: usize,
        bound: usize,
    },

    /// A caller violated an operation contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numerical hazard was detected (division by zero variance, ...).
    #[error("numerical hazard: {0}")]
    Numerical(String),

    /// A gradient or loss became non-finite during training.
    #[error("non-finite value in {what}: {detail}")]
    NonFinite { what: String, detail: String },

    /// Configuration file failed to parse or validate.
    #[error("invalid config: {0}")]
    Config(String),

    /// Checkpoint file is malformed or incompatible.
    #[error("checkpoint error at {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
