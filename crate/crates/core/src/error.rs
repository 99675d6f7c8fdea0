use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Bad magic, version or an unparseable header.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// Header and payload disagree.
    #[error("corrupt file {path}: {msg}")]
    Corruption { path: PathBuf, msg: String },

    /// A value violates a data invariant (timestamps, labels, finiteness).
    #[error("validation error: {0}")]
    Validation(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid hyperparameter, search-space or config value. Names the field.
    #[error("invalid config `{field}`: {msg}")]
    Config { field: String, msg: String },

    /// NaN/Inf produced by a computation.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Operation precondition not met (e.g. too few samples for a PCC).
    #[error("{0}")]
    Precondition(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }
}
