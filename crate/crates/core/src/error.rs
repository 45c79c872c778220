use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Malformed file content; `offset` is the byte position where parsing failed.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    #[error("unsupported format: {0}")]
    Unsupported(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn parse(offset: u64, msg: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            msg: msg.into(),
        }
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
