use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// What went wrong inside a binary file, and where.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FormatError {
    #[error("magic mismatch at offset {offset}: expected {expected:?}")]
    BadMagic { offset: u64, expected: &'static str },
    #[error("unsupported version {version} at offset {offset}")]
    BadVersion { offset: u64, version: u32 },
    #[error("truncated at offset {offset}: needed {needed} more bytes")]
    Truncated { offset: u64, needed: u64 },
    #[error("{extra} trailing bytes after the last record at offset {offset}")]
    TrailingBytes { offset: u64, extra: u64 },
    #[error("invalid dimension {dim} at offset {offset}")]
    BadDimension { offset: u64, dim: u32 },
    #[error("non-finite value at offset {offset}")]
    NonFinite { offset: u64 },
    #[error("invalid field value at offset {offset}: {what}")]
    BadField { offset: u64, what: String },
}

impl FormatError {
    pub fn offset(&self) -> u64 {
        match self {
            FormatError::BadMagic { offset, .. }
            | FormatError::BadVersion { offset, .. }
            | FormatError::Truncated { offset, .. }
            | FormatError::TrailingBytes { offset, .. }
            | FormatError::BadDimension { offset, .. }
            | FormatError::NonFinite { offset }
            | FormatError::BadField { offset, .. } => *offset,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Core(#[from] multicolumn_core::Error),

    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for usage errors (bad flags, missing inputs,
    /// unknown ids), 1 for everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            Error::Core(multicolumn_core::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}
