use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("index out of bounds: {0}")]
    OutOfBounds(String),

    /// A covariance fell below the eigenvalue floor and cannot be inverted safely.
    #[error("numerically degenerate covariance for primitive {index}: {detail}")]
    Degenerate { index: usize, detail: String },

    #[error("training diverged at epoch {epoch}: non-finite value on slice {slice}")]
    Divergence { epoch: usize, slice: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("unsupported feature in header field `{field}`: {detail}")]
    Unsupported { field: &'static str, detail: String },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
