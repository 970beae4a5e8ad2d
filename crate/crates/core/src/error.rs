use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters or inconsistent configuration, detected before any work starts.
    #[error("configuration error: {0}")]
    Config(String),

    /// An argument outside the domain of a mathematical operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A subset-simulation level whose samples cannot be split by an intermediate threshold.
    #[error("degenerate level {level}: {reason}")]
    DegenerateLevel { level: usize, reason: String },

    #[error("solver did not converge: {0}")]
    NotConverged(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::Schema(_) | Error::Domain(_) => 2,
            Error::Numerical(_) | Error::NotConverged(_) | Error::DegenerateLevel { .. } => 3,
            Error::InsufficientData(_) => 2,
            Error::Io { .. } => 1,
        }
    }
}
