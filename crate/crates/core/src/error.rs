use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the training laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error in {op}: non-positive value {value} at index {index}")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("unsupported class count {requested}; the generator knows {available} shapes")]
    UnsupportedClassCount { requested: usize, available: usize },

    #[error("need at least {required} samples per side, got {got}")]
    SampleSize { required: usize, got: usize },

    #[error("non-finite {what} in `{name}`")]
    NonFinite { what: &'static str, name: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
