use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QueueError {
    #[error(transparent)]
    Core(#[from] qcoord::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged at update {update}: {reason}")]
    Divergence { update: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, QueueError>;
