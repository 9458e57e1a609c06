use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("unbound graph input `{0}`")]
    UnboundInput(String),

    #[error("backward called before forward evaluation")]
    NotEvaluated,

    #[error("backward requires a scalar output, node {node} has {numel} elements")]
    NonScalarOutput { node: usize, numel: usize },

    #[error("index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("exp overflow: e/s = {ratio} exceeds 700")]
    Overflow { ratio: f64 },

    #[error("non-finite loss at step {step}, batch {batch}: {term}")]
    NonFinite {
        step: usize,
        batch: usize,
        term: String,
    },

    #[error("optimizer did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NoConvergence { iterations: usize, grad_norm: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("matrix not positive definite after jitter")]
    NotPositiveDefinite,

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable tag used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::UnboundInput(_) => "unbound_input",
            Error::NotEvaluated => "not_evaluated",
            Error::NonScalarOutput { .. } => "non_scalar",
            Error::IndexOutOfRange { .. } => "index",
            Error::Empty(_) => "empty",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Overflow { .. } => "overflow",
            Error::NonFinite { .. } => "non_finite",
            Error::NoConvergence { .. } => "no_convergence",
            Error::Degenerate(_) => "degenerate",
            Error::NotPositiveDefinite => "not_positive_definite",
            Error::Parse { .. } => "parse",
            Error::NotFound(_) => "not_found",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
