use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("split error: user {user} has {count} interactions, need at least 3")]
    Split { user: String, count: usize },

    #[error("sampling error: user {user} has {available} candidate items, requested {requested}")]
    Sampling {
        user: usize,
        available: usize,
        requested: usize,
    },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("finite-difference oracle failed: non-finite value at coordinate {coord}")]
    Oracle { coord: usize },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
