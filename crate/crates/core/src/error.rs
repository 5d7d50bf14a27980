use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SimtsError> = std::result::Result<T, E>;

/// Everything that can go wrong between reading a CSV and writing a results table.
#[derive(Debug, Error)]
pub enum SimtsError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: row {row}, column `{column}`: cannot parse {value:?} as a finite number")]
    BadCell {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
    },

    #[error("{path}: column `{column}` not found in header")]
    MissingColumn { path: PathBuf, column: String },

    #[error("{path}: malformed csv: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("series of length {actual} is shorter than the required {required}")]
    TooShort { required: usize, actual: usize },

    #[error("corrupt checkpoint at byte offset {offset}: {reason}")]
    CorruptCheckpoint { offset: usize, reason: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl SimtsError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        SimtsError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SimtsError::Io {
            path: path.into(),
            source,
        }
    }
}
