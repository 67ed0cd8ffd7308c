use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("class index {index} out of range for {classes} classes")]
    IndexOutOfRange { index: usize, classes: usize },

    #[error("fact and counterfact are the same class ({0})")]
    IdenticalPair(usize),

    #[error("contrastive subspace ({fact}, {counterfact}) is degenerate")]
    DegenerateSubspace { fact: usize, counterfact: usize },

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("m = {m} outside 1..={max}")]
    InvalidM { m: usize, max: usize },

    #[error("gold class {gold} invalid for {classes} classes")]
    InvalidGold { gold: usize, classes: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("prompt length {length} exceeds max_length {max}")]
    LengthOverflow { length: usize, max: usize },

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("prediction record {0:?} has an empty selection")]
    EmptySelection(String),

    #[error("highlight direction is degenerate")]
    DegenerateDirection,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: unknown label {label:?}")]
    UnknownLabel {
        path: PathBuf,
        line: usize,
        label: String,
    },

    #[error("{path}:{line}: span [{start}, {end}) outside {len} tokens")]
    SpanOutOfBounds {
        path: PathBuf,
        line: usize,
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("config key {key:?}: {message}")]
    Config { key: String, message: String },

    #[error("unknown encoder adapter {0:?}")]
    UnknownAdapter(String),

    #[error("non-finite value in {0}")]
    NumericFailure(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::UnknownAdapter(_) => 2,
            Error::Parse { .. }
            | Error::UnknownLabel { .. }
            | Error::SpanOutOfBounds { .. }
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Checkpoint(_) => 3,
            Error::NumericFailure(_) => 4,
            _ => 1,
        }
    }
}
