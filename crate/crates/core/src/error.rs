use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate vector: {0}")]
    DegenerateVector(&'static str),

    #[error("invalid class count {count}: {reason}")]
    InvalidClassCount { count: usize, reason: &'static str },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("insufficient samples: need {needed}, have {available}")]
    InsufficientSamples { needed: usize, available: usize },

    #[error("label {label} out of range [0, {classes})")]
    InvalidLabel { label: usize, classes: usize },

    #[error("uncertainty {0} outside [0, 1]")]
    InvalidUncertainty(f64),

    #[error("non-finite gradient in {term}")]
    NonFiniteGradient { term: &'static str },

    #[error("non-finite loss in {term}")]
    NonFiniteLoss { term: &'static str },

    #[error("empty batch")]
    EmptyBatch,

    #[error("sample skipped: {0}")]
    SampleSkipped(&'static str),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("epoch {epoch}: {source}")]
    AtEpoch {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the numbers themselves rather than by
    /// configuration or input data.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. } | Error::DegenerateVector(_) => true,
            Error::AtEpoch { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
