use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed volume file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unsupported volume format in {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("manifest inconsistency: {0}")]
    Consistency(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("lesion placement failed after {attempts} attempts: {reason}")]
    Placement { attempts: usize, reason: String },

    #[error("input assembly failed: {0}")]
    Assembly(String),

    #[error("index out of range: {0}")]
    Range(String),

    #[error("numerical failure in {component}: {reason}")]
    Numerical { component: String, reason: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn unsupported(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::UnsupportedFormat {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
