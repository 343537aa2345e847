use std::path::PathBuf;

use skillstep_autodiff::AdError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid start position ({0}, {1}): not in free space")]
    InvalidStart(f32, f32),
    #[error("invalid maze: {0}")]
    Maze(String),
    #[error("dataset generation failed: {0}")]
    Generation(String),
    #[error("sampling failed: {0}")]
    Sampling(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint version mismatch: {0}")]
    Version(String),
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
