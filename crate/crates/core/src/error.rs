use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {found} (supported: {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },

    #[error("truncated header")]
    TruncatedHeader,

    #[error("truncated record {index}")]
    TruncatedRecord { index: u64 },

    #[error("truncated tensor {name:?}")]
    TruncatedTensor { name: String },

    #[error("{count} trailing bytes after last entry")]
    TrailingBytes { count: usize },

    #[error("non-finite value in {location}")]
    NonFinite { location: String },

    #[error("invalid label {value} in record {index}")]
    InvalidLabel { index: u64, value: u8 },

    #[error("invalid tag in record {index}: {reason}")]
    InvalidTag { index: u64, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("shape mismatch for {name:?}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("unexpected tensor: expected {expected:?}, found {found:?}")]
    TensorName { expected: String, found: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite intermediate at stage {stage}")]
    NonFiniteIntermediate { stage: &'static str },

    #[error("non-finite gradient for tensor {tensor:?}")]
    NonFiniteGradient { tensor: String },

    #[error("non-finite {quantity} at iteration {iteration}")]
    Diverged { quantity: String, iteration: usize },

    #[error("stale forward cache: {0}")]
    StaleCache(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(context: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::DimMismatch {
            context: context.into(),
            expected,
            found,
        }
    }

    pub(crate) fn non_finite(location: impl Into<String>) -> Self {
        Error::NonFinite {
            location: location.into(),
        }
    }

    /// Coarse class used by front ends to pick exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } => ErrorKind::Io,
            Error::NonFiniteIntermediate { .. } | Error::NonFiniteGradient { .. } | Error::Diverged { .. } => {
                ErrorKind::Numerical
            }
            Error::InvalidConfig(_) => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Io,
    Data,
    Numerical,
}
