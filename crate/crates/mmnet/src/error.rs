use std::path::PathBuf;

use thiserror::Error;

/// Problems with a model container's bytes.
#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("not a model file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("architecture hash mismatch: file says {found:016x}, graph built from its config is {expected:016x}")]
    HashMismatch { expected: u64, found: u64 },
    #[error("model file is truncated")]
    Truncated,
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error("expected a {expected} model file, found {found}")]
    WrongKind { expected: &'static str, found: &'static str },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error(transparent)]
    Core(#[from] mmnet_core::Error),
    /// Bad arguments, configuration or dataset layout.
    #[error("{0}")]
    Input(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, source: FormatError) -> Error {
        Error::Format { path: path.into(), source }
    }

    /// 0 success, 1 computation failure, 2 bad input or arguments.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(e) => match e {
                mmnet_core::Error::Config(_) | mmnet_core::Error::ArchMismatch { .. } => 2,
                _ => 1,
            },
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
