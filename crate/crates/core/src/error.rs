use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates one of its bounds.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An operation was invoked in a state that does not permit it.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("shape mismatch in {layer}: expected {expected}, got {got}")]
    Shape {
        layer: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{0}")]
    Incompatible(String),

    #[error("runtime failure: {0}")]
    Runtime(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
