use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("bad magic: expected \"SMC1\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported cube version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("truncated cube: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("unknown channel name {0:?}")]
    UnknownChannel(String),

    #[error("{path}:{line}: {message}")]
    Row { path: PathBuf, line: u64, message: String },

    #[error("sensor, weather and imagery records share no common day")]
    EmptyOverlap,

    #[error("training error: {0}")]
    Training(String),

    #[error("missing artifact {path}: run `{run_first}` first")]
    MissingArtifact { path: PathBuf, run_first: &'static str },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("png encoding error: {0}")]
    Png(#[from] png::EncodingError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 2 for I/O failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            Error::Png(png::EncodingError::IoError(_)) => 2,
            _ => 1,
        }
    }
}

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

pub(crate) fn argument(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}
