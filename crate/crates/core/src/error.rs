use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the alignment pipeline.
#[derive(Debug, Error)]
pub enum NeatError {
    #[error("length error: {0}")]
    Length(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("structure error: {0}")]
    Structure(String),

    #[error("capacity error: enumeration of {requested} sequences exceeds the limit of {limit}")]
    Capacity { requested: u128, limit: u128 },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl NeatError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NeatError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, NeatError>;
