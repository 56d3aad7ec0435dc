use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("image id mismatch: expected `{expected}`, found `{found}`")]
    ImageIdMismatch { expected: String, found: String },

    #[error("unknown image id `{0}`")]
    UnknownImage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidInput(message.into())
    }

    /// True for errors caused by malformed input text or unreadable files.
    pub fn is_parse(&self) -> bool {
        matches!(self, Error::Parse { .. } | Error::Io(_))
    }
}
