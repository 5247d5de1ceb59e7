use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TsnError {
    #[error(transparent)]
    Core(#[from] tsn_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numerical(String),
}

pub type Result<T, E = TsnError> = std::result::Result<T, E>;

impl TsnError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        TsnError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        TsnError::Format { path: path.into(), msg: msg.into() }
    }

    /// Process exit status: 3 for numerical failures, 2 for everything the
    /// caller can fix by changing inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            TsnError::Numerical(_) | TsnError::Core(tsn_core::Error::Numerical(_)) => 3,
            _ => 2,
        }
    }
}
