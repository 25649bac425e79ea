use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid shapes, layer chains or hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed samples, labels or images.
    #[error("data error: {0}")]
    Data(String),

    /// An API was called out of order (stale cache, bad argument domain).
    #[error("usage error: {0}")]
    Usage(String),

    /// Non-finite values surfaced by a layer, loss or optimizer.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    /// Checkpoint could not be decoded.
    #[error("load error: {0}")]
    Load(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}

macro_rules! data_err {
    ($($arg:tt)*) => { $crate::error::Error::Data(format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use data_err;
