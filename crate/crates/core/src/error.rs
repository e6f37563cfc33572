use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// The split between validation-style errors and [`Error::Numerical`] is
/// meaningful: the command-line front end maps the former to exit code 2 and
/// the latter to exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse study: {0}")]
    Parse(#[from] serde_json::Error),

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("value {value} for `{name}` is outside [{low}, {high}]")]
    Range {
        name: String,
        value: f64,
        low: f64,
        high: f64,
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical machinery (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
