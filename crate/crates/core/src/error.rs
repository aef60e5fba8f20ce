use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset spec: field `{field}`: {reason}")]
    InvalidSpec { field: &'static str, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite activation in extractor block {block}")]
    NonFiniteActivation { block: usize },

    #[error("non-finite value in {context}: {detail}")]
    NonFinite { context: &'static str, detail: String },

    #[error("clustering error: {0}")]
    Clustering(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("blob `{blob}` has {actual} bytes, expected {expected} (first affected sample: {sample})")]
    BlobSize {
        blob: String,
        expected: usize,
        actual: usize,
        sample: usize,
    },

    #[error("corrupt manifest at {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("i/o error at {path}: {source}")]
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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
