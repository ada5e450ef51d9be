//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI maps them to exit codes: validation
//! problems (bad arguments, shape mismatches, malformed inputs), numeric
//! aborts (non-finite values mid-computation), and I/O.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid input: shape mismatch, out-of-range parameter, malformed file.
    #[error("{0}")]
    Validation(String),

    /// A computation produced NaN/Inf where a finite value is required.
    #[error("numeric abort: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error kind (2 validation, 3 numeric, 4 i/o).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => 2,
            Error::Numeric(_) => 3,
            Error::Io { .. } | Error::Json(_) | Error::Csv(_) => 4,
        }
    }
}
