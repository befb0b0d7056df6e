//! Crate-wide error type.

use crate::tree::NodeId;
use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by tree operations, estimators, and learners.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),

    #[error("no such edge ({0}, {1})")]
    NoSuchEdge(NodeId, NodeId),

    #[error("cannot contract edge ({0}, {1}): no hidden endpoint to remove")]
    InvalidContraction(NodeId, NodeId),

    #[error("observed label sets differ")]
    LabelMismatch,

    #[error("invalid tree: {0}")]
    InvalidTree(String),

    #[error("degenerate parameter: {0}")]
    DegenerateParameter(String),

    #[error("exact computation too large: {0} configurations exceed budget {1}")]
    TooLargeForExact(u128, u128),

    #[error("covariance matrix is singular or not positive definite")]
    SingularCovariance,

    #[error("column {0} has zero variance")]
    ZeroVariance(usize),

    #[error("value {value} in column {column} outside alphabet 0..{k}")]
    AlphabetViolation { value: f64, column: usize, k: u32 },

    #[error("need at least three nodes, got {0}")]
    NeedThreeNodes(usize),

    #[error("distance matrix is not an additive tree metric: {0}")]
    NotAdditive(String),

    #[error("infinite distance between {0} and {1}")]
    InfiniteDistance(NodeId, NodeId),

    #[error("too few nodes: {0}")]
    TooFewNodes(usize),

    #[error("finite distances do not connect node {0}")]
    Disconnected(NodeId),

    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),

    #[error("ragged CSV row {0}")]
    RaggedRows(usize),

    #[error("non-numeric entry {value:?} at row {row}, column {column}")]
    NonNumeric {
        value: String,
        row: usize,
        column: usize,
    },

    #[error("sample {0} has probability zero under the model")]
    ZeroProbability(usize),

    #[error("family {0} not supported by this operation")]
    UnsupportedFamily(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
