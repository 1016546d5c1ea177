use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("embedding {index} has zero norm")]
    DegenerateEmbedding { index: usize },

    #[error("context pool is empty")]
    EmptyContext,

    #[error("frozen parameter group changed: {0}")]
    FreezeViolation(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("credibility verification failed at layer {layer}, row {row}: {check} (residual {residual:e})")]
    Verification {
        layer: usize,
        row: usize,
        check: &'static str,
        residual: f64,
    },

    #[error("malformed container {path:?}: {message}")]
    Container { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
