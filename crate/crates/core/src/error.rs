use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid node: {0}")]
    InvalidNode(String),

    #[error("{kind} node: {what} has dimension {got}, expected {expected}")]
    NodeDimension {
        kind: &'static str,
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("node {node}: slot {slot} has dimension {got}, expected {expected}")]
    SlotDimension {
        node: usize,
        slot: usize,
        expected: usize,
        got: usize,
    },

    #[error("graph structure: {0}")]
    Structure(String),

    #[error("graph contains a cycle through node {node}")]
    Cycle { node: usize },

    #[error("matrix is not symmetric")]
    NotSymmetric,

    #[error("problem size {size} exceeds the dense cap {cap}; use a stochastic estimator instead")]
    TooLarge { size: usize, cap: usize },

    #[error("{0}")]
    Contract(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
