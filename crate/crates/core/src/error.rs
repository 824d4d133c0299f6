use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("container: {0}")]
    Container(#[from] ContainerError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

/// Failures while decoding a tensor container. Each variant has a stable code
/// so callers can tell corrupt files apart from version skew.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ContainerError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload")]
    Truncated,
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("duplicate entry name `{0}`")]
    DuplicateName(String),
    #[error("entry name is not valid UTF-8")]
    BadName,
    #[error("missing entry `{0}`")]
    Missing(String),
    #[error("entry `{name}` has dtype/shape {found}, expected {expected}")]
    Mismatch {
        name: String,
        found: String,
        expected: String,
    },
    #[error("trailing bytes after last entry")]
    TrailingBytes,
}

impl ContainerError {
    pub fn code(&self) -> u32 {
        match self {
            ContainerError::BadMagic => 1,
            ContainerError::UnsupportedVersion(_) => 2,
            ContainerError::Truncated => 3,
            ContainerError::UnknownDtype(_) => 4,
            ContainerError::DuplicateName(_) => 5,
            ContainerError::BadName => 6,
            ContainerError::Missing(_) => 7,
            ContainerError::Mismatch { .. } => 8,
            ContainerError::TrailingBytes => 9,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
