use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Runtime,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("ragged row {row}: expected {expected} columns, found {found}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("label column `{0}` not found")]
    MissingColumn(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{0}")]
    Split(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("non-finite loss at training step {step}")]
    NonFiniteLoss { step: usize },

    #[error("sequence of {len} context pairs exceeds the model maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("external predictor protocol error at response line {line}: {msg}")]
    Protocol { line: usize, msg: String },

    #[error("external predictor timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("external predictor exited with {status}: {stderr}")]
    ChildExit { status: String, stderr: String },

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownName {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidConfig(_) | Error::UnknownName { .. } => ErrorKind::Usage,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::RaggedRow { .. }
            | Error::NonFinite { .. }
            | Error::MissingColumn(_)
            | Error::EmptyDataset
            | Error::DimensionMismatch { .. }
            | Error::Split(_) => ErrorKind::Data,
            Error::Numerical(_)
            | Error::NonFiniteLoss { .. }
            | Error::SequenceTooLong { .. }
            | Error::Protocol { .. }
            | Error::Timeout(_)
            | Error::ChildExit { .. } => ErrorKind::Runtime,
            Error::Context { source, .. } => source.kind(),
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| e.context(context()))
    }
}
