use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("tensor format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("label entry at (t={t}, c={c}) is {value}, expected 0 or 1")]
    NonBinaryLabel { t: usize, c: usize, value: i64 },

    #[error("validation error: {0}")]
    Invalid(String),

    #[error("detector failed on view {view}, frame {frame}: {reason}")]
    Detector {
        view: usize,
        frame: usize,
        reason: String,
    },

    #[error("{path}: line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        CoreError::Json {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
