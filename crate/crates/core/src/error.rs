use thiserror::Error;

pub type Result<T, E = GenError> = std::result::Result<T, E>;

/// Errors surfaced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum GenError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GenError {
    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            GenError::Config(_) => 2,
            GenError::Data(_) | GenError::Integrity(_) | GenError::Io(_) => 3,
            GenError::Training(_) | GenError::Contract(_) => 4,
        }
    }
}

impl From<neuralcore::Error> for GenError {
    fn from(e: neuralcore::Error) -> Self {
        match e {
            neuralcore::Error::Config(m) => GenError::Config(m),
            neuralcore::Error::Training(m) => GenError::Training(m),
            neuralcore::Error::Contract(m) => GenError::Contract(m),
            neuralcore::Error::Integrity(m) => GenError::Integrity(m),
            neuralcore::Error::Io(e) => GenError::Io(e),
        }
    }
}

impl From<serde_json::Error> for GenError {
    fn from(e: serde_json::Error) -> Self {
        GenError::Data(e.to_string())
    }
}
