use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, indices or values that violate an operation's preconditions.
    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error in {path}: {message} (byte offset {offset})")]
    Ingestion {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    /// A non-finite loss or gradient showed up during training.
    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn rejected(msg: impl Into<String>) -> Self {
        Error::RejectedInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
