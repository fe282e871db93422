use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("leaf {0} has no bound value")]
    UnboundLeaf(usize),

    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NonScalarLoss { node: usize, shape: Vec<usize> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported goal kind: {0}")]
    UnsupportedGoal(String),

    #[error("variant mismatch: {0}")]
    Variant(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("format version mismatch: expected {expected}, found {found}")]
    Version { expected: String, found: String },

    #[error("malformed input at line {line}: {detail}")]
    Malformed { line: usize, detail: String },

    #[error("checkpoint payload length mismatch for tensor {tensor}: expected {expected} values, found {found}")]
    PayloadLength {
        tensor: String,
        expected: usize,
        found: usize,
    },

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Stable short identifier used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Domain(_) => "domain",
            Error::NonFinite { .. } => "non_finite",
            Error::UnboundLeaf(_) => "unbound_leaf",
            Error::NonScalarLoss { .. } => "non_scalar_loss",
            Error::Config(_) => "config",
            Error::UnsupportedGoal(_) => "unsupported_goal",
            Error::Variant(_) => "variant",
            Error::Diverged { .. } => "diverged",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::Version { .. } => "version",
            Error::Malformed { .. } => "malformed",
            Error::PayloadLength { .. } => "payload_length",
            Error::MissingFile(_) => "missing_file",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
