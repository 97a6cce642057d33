use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("tensor `{tensor}` is missing its file {path}")]
    MissingFile { tensor: String, path: PathBuf },

    #[error("tensor `{tensor}` size mismatch: expected {expected} bytes, found {actual}")]
    SizeMismatch {
        tensor: String,
        expected: u64,
        actual: u64,
    },

    #[error("tensor `{tensor}` holds invalid value {value} at {index:?}")]
    InvalidValue {
        tensor: String,
        index: Vec<usize>,
        value: f64,
    },

    #[error("tensor `{tensor}` row {index:?} sums to {sum}, exceeding 1")]
    RowMass {
        tensor: String,
        index: Vec<usize>,
        sum: f64,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("metric `{metric}` unavailable: {reason}")]
    MetricUnavailable { metric: String, reason: String },

    #[error("score at head ({layer}, {head}) position {position} is NaN")]
    InvalidScore {
        layer: usize,
        head: usize,
        position: usize,
    },

    #[error("position {position} out of range for {len} tokens")]
    OutOfRange { position: usize, len: usize },

    #[error("loss curve increases between budget {index} and {}", index + 1)]
    InvalidCurve { index: usize },

    #[error("budget {budget} exceeds capacity {capacity}")]
    Infeasible { budget: usize, capacity: usize },

    #[error("instance exceeds guardrail: {0}")]
    Guardrail(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("profile is empty")]
    EmptyProfile,

    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 1,
            Error::InvalidShape(_)
            | Error::Config(_)
            | Error::MetricUnavailable { .. }
            | Error::Guardrail(_)
            | Error::EmptyProfile => 2,
            Error::Infeasible { .. } => 4,
            _ => 3,
        }
    }
}
