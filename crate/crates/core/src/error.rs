use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed scan: {0}")]
    MalformedScan(String),

    #[error("malformed label file: {0}")]
    MalformedLabel(String),

    #[error("malformed pose data: {0}")]
    MalformedPose(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("training diverged: {0}")]
    Divergence(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
