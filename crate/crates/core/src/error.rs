use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised while decoding a dataset or checkpoint file.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("truncated input at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("non-finite value at byte offset {offset}")]
    NonFinite { offset: usize },
    #[error("{count} trailing bytes after offset {offset}")]
    TrailingBytes { offset: usize, count: usize },
    #[error("invalid content at byte offset {offset}: {reason}")]
    Invalid { offset: usize, reason: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("state error: {0}")]
    State(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("insufficient data: class {class:?} has {available} samples, {requested} requested")]
    InsufficientData {
        class: String,
        available: usize,
        requested: usize,
    },
    #[error("format error in {path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("template format error: {0}")]
    Template(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error on {path}: {source}")]
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

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
macro_rules! param_err {
    ($($arg:tt)*) => { $crate::error::Error::Parameter(format!($($arg)*)) };
}
pub(crate) use dim_err;
pub(crate) use param_err;
