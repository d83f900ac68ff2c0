use std::path::PathBuf;

use thiserror::Error;

/// Operand shapes violate an operation's contract.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("shape mismatch: {0}")]
pub struct ShapeError(pub String);

impl ShapeError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AutodiffError {
    #[error("gradient requested of a non-scalar output of shape {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("no input named `{0}` is registered on this expression")]
    UnknownInput(String),
    #[error("second-order differentiation is not supported through `{0}`")]
    Unsupported(&'static str),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("adjacency is not symmetric at ({row}, {col})")]
    Asymmetric { row: usize, col: usize },
    #[error("adjacency has an invalid weight {weight} at ({row}, {col})")]
    InvalidWeight { row: usize, col: usize, weight: String },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error("missing dataset file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: {detail}", file.display())]
    ShapeMismatch { file: PathBuf, detail: String },
    #[error("{}: label {label} at node {node} is not below num_classes={num_classes}", file.display())]
    LabelOutOfRange {
        file: PathBuf,
        node: usize,
        label: u32,
        num_classes: usize,
    },
    #[error("{}: edge list is not symmetric ({source})", file.display())]
    Asymmetric { file: PathBuf, source: GraphError },
    #[error("{}: {detail}", file.display())]
    InvalidSplit { file: PathBuf, detail: String },
    #[error("{}: malformed metadata: {source}", file.display())]
    Meta {
        file: PathBuf,
        source: serde_json::Error,
    },
    #[error("{}: unsupported format_version {found}", file.display())]
    FormatVersion { file: PathBuf, found: u64 },
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid graph: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model dimension mismatch: {0}")]
    Dimension(String),
    #[error("index set is empty")]
    EmptyIndexSet,
}
