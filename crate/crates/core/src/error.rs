use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op} (node {node}): {detail}")]
    ShapeMismatch {
        op: &'static str,
        node: usize,
        detail: String,
    },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("matrix data has {got} values, expected {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, got: usize },

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("backward requires a scalar root, node {node} is {rows}x{cols}")]
    NonScalarRoot { node: usize, rows: usize, cols: usize },

    #[error("perturbation is identically zero")]
    ZeroPerturbation,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} at row {row} is outside [0, {classes})")]
    InvalidLabel {
        row: usize,
        label: usize,
        classes: usize,
    },

    #[error("matrix is singular: {0}")]
    Singular(String),

    #[error("non-finite loss during {phase} at step {step}: {detail}")]
    Diverged {
        phase: String,
        step: u64,
        detail: String,
    },

    #[error("unknown training variant `{0}`")]
    UnknownVariant(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
