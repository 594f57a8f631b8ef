use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the engine.
///
/// The variants are coarse on purpose: the CLI maps them onto exit codes
/// (configuration vs. data problems), and callers mostly just report them.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad configuration rather than bad input data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Argument(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
