use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LeapError {
    #[error(transparent)]
    Core(#[from] leap_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}, row {row}: {message}")]
    Corpus {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("{path}: token {token:?} has {found} values, expected {expected}")]
    EmbeddingDim {
        path: PathBuf,
        token: String,
        found: usize,
        expected: usize,
    },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("batch {batch}: {source}")]
    Training {
        batch: usize,
        #[source]
        source: leap_core::Error,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl LeapError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LeapError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        LeapError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Process exit code: 2 for configuration and validation problems,
    /// 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            LeapError::Config { .. }
            | LeapError::Checkpoint { .. }
            | LeapError::Corpus { .. }
            | LeapError::EmbeddingDim { .. }
            | LeapError::Invalid(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, LeapError>;
