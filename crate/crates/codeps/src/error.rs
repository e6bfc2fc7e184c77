use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodepsError {
    /// A precondition on an operation's inputs was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An internal contract between modules was broken.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A frame cannot contribute to a loss (e.g. no valid depth pixel).
    #[error("unusable frame: {0}")]
    UnusableFrame(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CodepsError>;

impl CodepsError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CodepsError::InvalidInput(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        CodepsError::Contract(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CodepsError::Io {
            path: path.into(),
            source,
        }
    }
}
