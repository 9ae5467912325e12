use std::path::PathBuf;

use e2urec_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: schema error: {msg}")]
    Schema { path: PathBuf, msg: String },
    #[error("{path}:{line}: {msg}")]
    Validation {
        path: PathBuf,
        line: u64,
        msg: String,
    },
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),
    #[error("partition error: {0}")]
    Partition(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceLength { len: usize, max: usize },
    #[error("training diverged at step {step}: {msg}")]
    Training { step: u64, msg: String },
    #[error("forgotten set is empty")]
    EmptyForgottenSet,
    #[error("batch purity violated: {0}")]
    BatchPurity(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),
    #[error("unknown method `{key}`; registered methods: {registered}")]
    UnknownMethod { key: String, registered: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Broad failure class, used by the CLI for exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Training,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::UnknownMethod { .. } => ErrorClass::Config,
            Error::Schema { .. }
            | Error::Validation { .. }
            | Error::Vocabulary(_)
            | Error::EmptyDataset(_)
            | Error::Partition(_)
            | Error::SequenceLength { .. }
            | Error::EmptyForgottenSet
            | Error::Checkpoint { .. }
            | Error::Io { .. } => ErrorClass::Data,
            Error::Training { .. }
            | Error::BatchPurity(_)
            | Error::UndefinedMetric(_)
            | Error::Tensor(_) => ErrorClass::Training,
        }
    }
}
