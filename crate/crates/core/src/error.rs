//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the engine.
///
/// Variants are grouped by what the caller can do about them, which is also
/// what the command-line exit code reports.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (scenario, grid, terms, limits).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid direct input to a numerical routine (empty sample, q outside (0, 1), ...).
    #[error("input error: {0}")]
    Input(String),

    /// The instrument cannot be valued under the requested model.
    #[error("unsupported instrument: {0}")]
    UnsupportedInstrument(String),

    /// A computation produced a non-finite or otherwise unusable number.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 2 for configuration problems, 4 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
