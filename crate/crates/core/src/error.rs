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

    #[error("format error: {0}")]
    Format(String),

    #[error("length error: expected {expected} values, found {found}")]
    Length { expected: usize, found: usize },

    #[error("validation error in {field}[{index}]: {reason}")]
    Validation {
        field: String,
        index: usize,
        reason: String,
    },

    #[error("arity error: expected {expected}, found {found}")]
    Arity { expected: usize, found: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("query time {query} outside knot range [{first}, {last}]")]
    Extrapolation { query: f64, first: f64, last: f64 },

    #[error("degenerate field: all stations report {value}")]
    DegenerateField { value: f64 },

    #[error("missing variable: {0}")]
    MissingVariable(String),

    #[error("missing meteorology for timestep {0} min")]
    MissingTimestep(i64),

    #[error("index {index} out of range for size {size}")]
    Index { index: usize, size: usize },

    #[error("context overflow: stream of {len} tokens exceeds context length {max}")]
    Context { len: usize, max: usize },

    #[error("mask error: {0}")]
    Mask(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(field: impl Into<String>, index: usize, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            index,
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad inputs rather than failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Format(_)
                | Error::Length { .. }
                | Error::Validation { .. }
                | Error::Arity { .. }
                | Error::Shape(_)
                | Error::InsufficientData(_)
                | Error::Extrapolation { .. }
                | Error::MissingVariable(_)
                | Error::MissingTimestep(_)
                | Error::Index { .. }
                | Error::Context { .. }
                | Error::Mask(_)
                | Error::Config(_)
        )
    }
}
