use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised across the pipeline.
///
/// Variants are grouped by the kind of failure rather than by module, so a
/// caller (the CLI in particular) can map them onto exit statuses.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate pair_id {pair_id:?} at line {line} (first seen at line {first_line})")]
    Uniqueness {
        pair_id: String,
        line: usize,
        first_line: usize,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate input: row {row} has zero norm")]
    ZeroNormRow { row: usize },

    #[error("degenerate cluster {cluster}: member mean is the zero vector")]
    DegenerateCluster { cluster: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("provenance error: {0}")]
    Provenance(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// True for errors caused by the caller's input files or arguments, as
    /// opposed to broken internal invariants.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Integrity(_))
    }
}
