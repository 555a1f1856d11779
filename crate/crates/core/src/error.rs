use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, DriveError>;

/// Coarse classification used by the CLI to pick an exit code:
/// validation errors exit 1, runtime failures exit 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Runtime,
}

#[derive(Debug, Error)]
pub enum DriveError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("mask label {value} at ({row}, {col}) is outside [0, {c_seg}) and is not IGNORE(255)")]
    MaskLabel {
        value: u8,
        row: usize,
        col: usize,
        c_seg: usize,
    },

    #[error("{what} is empty")]
    Empty { what: String },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("prediction sets disagree on sample coverage; missing ids: {}", missing.join(", "))]
    CoverageMismatch { missing: Vec<String> },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("run directory is locked by another command: {0}")]
    Locked(PathBuf),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("parse error at {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl DriveError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DriveError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        DriveError::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn shape(
        context: impl Into<String>,
        expected: impl Into<String>,
        actual: impl Into<String>,
    ) -> Self {
        DriveError::Shape {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            DriveError::Config(_)
            | DriveError::MissingFile(_)
            | DriveError::Shape { .. }
            | DriveError::MaskLabel { .. }
            | DriveError::Empty { .. }
            | DriveError::InvalidValue(_)
            | DriveError::CoverageMismatch { .. }
            | DriveError::Locked(_) => ErrorKind::Validation,
            _ => ErrorKind::Runtime,
        }
    }
}
