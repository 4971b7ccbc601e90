use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid record: {0}")]
    Invalid(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: unknown {kind} code {code:?}")]
    UnknownCode {
        line: usize,
        kind: &'static str,
        code: String,
    },

    #[error("non-finite loss at iteration {iteration} (parameter norm {param_norm:.6e})")]
    NonFiniteLoss { iteration: usize, param_norm: f64 },

    #[error("non-finite loss while perturbing parameter {param}[{index}]")]
    NonFiniteGradCheck { param: String, index: usize },

    #[error("{metric} is undefined: {reason}")]
    UndefinedMetric {
        metric: &'static str,
        reason: &'static str,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
