use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DgtError>;

#[derive(Debug, Error)]
pub enum DgtError {
    #[error("dimension mismatch in `{tensor}`: expected {expected}, got {got}")]
    Dimension {
        tensor: String,
        expected: String,
        got: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("node {node} is at depth {depth}; maximum depth is {max_depth}")]
    DepthLimit {
        node: u64,
        depth: usize,
        max_depth: usize,
    },

    #[error("unknown tree node {0}")]
    UnknownNode(u64),

    #[error("invalid state: {0}")]
    State(String),

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl DgtError {
    pub fn dimension(tensor: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        DgtError::Dimension {
            tensor: tensor.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        DgtError::Validation(msg.into())
    }

    /// Process exit code used by the command line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            DgtError::Io(_) | DgtError::Image(_) => 2,
            DgtError::Invariant(_) => 3,
            _ => 1,
        }
    }
}
