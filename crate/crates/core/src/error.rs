use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("domain error in {op}: element {index} has value {value}")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward already ran on this graph; reset gradients before running it again")]
    BackwardTwice,

    #[error("{op} is not supported for {kind} dropout")]
    Unsupported { op: &'static str, kind: &'static str },

    #[error("data integrity: {0}")]
    Integrity(String),

    #[error("length mismatch: {0}")]
    Length(String),

    #[error("invalid value for `{key}`: `{value}` ({reason})")]
    Config {
        key: String,
        value: String,
        reason: String,
    },

    #[error("exploration storage needs {needed} bytes, ceiling is {limit} bytes")]
    Capacity { needed: usize, limit: usize },

    #[error("non-finite loss at iteration {iteration}, epoch {epoch}: {snapshot}")]
    NonFinite {
        iteration: usize,
        epoch: usize,
        snapshot: String,
    },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, value: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            value: value.into(),
            reason: reason.into(),
        }
    }
}
