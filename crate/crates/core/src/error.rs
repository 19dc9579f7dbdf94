use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, BamError>;

#[derive(Debug, Error)]
pub enum BamError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("axis {axis} out of range for tensor of rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("input too short: need at least {min} samples, got {got}")]
    TooShort { min: usize, got: usize },

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("invalid spans {first} and {second}: {msg}")]
    Spans {
        first: usize,
        second: usize,
        msg: String,
    },

    #[error("feature file has bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("truncated {what}: expected {expected} bytes, found {found}")]
    Truncated {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl BamError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        BamError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BamError::Io {
            path: path.into(),
            source,
        }
    }
}
