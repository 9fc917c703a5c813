use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Diff(#[from] diffcore::DiffError),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for configuration/input problems, 3 for
    /// numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Malformed(_) | Error::EmptyDataset(_) => 2,
            Error::Numerical(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
