use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Divergence(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(qcoord::Error),

    #[error(transparent)]
    Queue(qcoord_queueing::QueueError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Io { .. } => 4,
            CliError::Core(e) => match e {
                qcoord::Error::Divergence { .. } => 3,
                qcoord::Error::Config(_)
                | qcoord::Error::UnknownGame(_)
                | qcoord::Error::Parse { .. } => 2,
                _ => 1,
            },
            CliError::Queue(e) => match e {
                qcoord_queueing::QueueError::Divergence { .. } => 3,
                qcoord_queueing::QueueError::Config(_) => 2,
                qcoord_queueing::QueueError::Core(inner) => {
                    CliError::Core(inner.clone()).exit_code()
                }
                qcoord_queueing::QueueError::Shape(_) => 1,
            },
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<qcoord::Error> for CliError {
    fn from(e: qcoord::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<qcoord_queueing::QueueError> for CliError {
    fn from(e: qcoord_queueing::QueueError) -> Self {
        CliError::Queue(e)
    }
}

impl From<qcoord::MatrixError> for CliError {
    fn from(e: qcoord::MatrixError) -> Self {
        CliError::Core(e.into())
    }
}
pub type Result<T> = std::result::Result<T, CliError>;
