//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Every corner of a box has projective depth <= 0.
    #[error("all box corners are behind the camera")]
    AllBehindCamera,

    #[error("malformed line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("missing key '{0}' in calibration file")]
    MissingKey(String),

    #[error("malformed matrix for key '{0}'")]
    MalformedMatrix(String),

    #[error("record {0} has no score; predictions require 16 fields")]
    MissingScore(usize),

    #[error("neighbor group of size {group_size} cannot supply top-{k} statistics")]
    InsufficientNeighbors { group_size: usize, k: usize },

    #[error("{0} ground truths exceed {1} predictions")]
    TooManyGroundTruths(usize, usize),

    /// An operation was called outside its contract (shape mismatch,
    /// missing probabilities, non-square cost matrix, ...).
    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad tensor file: {0}")]
    BadTensorFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::ContractViolation(msg.into())
    }
}
