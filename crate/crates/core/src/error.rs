use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the detector engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents disagree along a named axis.
    #[error("dimension mismatch on {axis}: expected {expected}, got {actual}")]
    Dimension {
        axis: String,
        expected: usize,
        actual: usize,
    },

    /// Window, stride or grid arithmetic produces an empty or non-integral result.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Operation invoked in the wrong lifecycle state (e.g. backward without a forward).
    #[error("state error: {0}")]
    State(String),

    /// Malformed input text (header, CSV row, config line).
    #[error("parse error in {source_name}{}: {message}", line.map(|l| format!(" line {l}")).unwrap_or_default())]
    Parse {
        source_name: String,
        line: Option<usize>,
        message: String,
    },

    /// Binary container with the wrong magic, version or layout.
    #[error("format error: {0}")]
    Format(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Synthetic data could not be generated as specified.
    #[error("generation error: {0}")]
    Generation(String),

    /// Input data that violates a documented contract.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(axis: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            axis: axis.into(),
            expected,
            actual,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(source_name: impl Into<String>, line: Option<usize>, message: impl Into<String>) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            line,
            message: message.into(),
        }
    }
}
