use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("no records in {0}")]
    NoRecords(PathBuf),

    #[error("record {record}: unknown data type {type_name:?}")]
    UnknownType { record: String, type_name: String },

    #[error("record {record}: token {token:?} is not in the {type_name:?} vocabulary")]
    UnknownToken {
        record: String,
        type_name: String,
        token: String,
    },

    #[error("duplicate record {record:?} (time bin {time_bin:?})")]
    DuplicateRecord { record: String, time_bin: Option<String> },

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("token index {index} out of range for type {type_index} (vocabulary size {size})")]
    TokenOutOfRange {
        type_index: usize,
        index: usize,
        size: usize,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("line search failed: step fell below {min_step:e} at iteration {iteration}")]
    LineSearch { iteration: usize, min_step: f64 },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("vocabulary fingerprint mismatch: model has {expected}, data has {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("unsupported model file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("unknown data type {0:?}")]
    UnknownLabelType(String),

    #[error("missing per-record posteriors")]
    MissingPosteriors,

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, line_offset: usize, err: &serde_json::Error) -> Self {
        Error::Parse {
            path: path.into(),
            line: line_offset + err.line(),
            column: err.column(),
            message: strip_location(&err.to_string()),
        }
    }
}

// serde_json appends "at line L column C"; the location is reported separately.
fn strip_location(message: &str) -> String {
    match message.rfind(" at line ") {
        Some(pos) => message[..pos].to_string(),
        None => message.to_string(),
    }
}
