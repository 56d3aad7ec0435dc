use std::path::Path;

use fishdet_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// A library error tied to the file it came from.
    #[error("{path}: {source}")]
    File { path: String, source: Error },

    #[error("{path}: cannot decode image: {message}")]
    Image { path: String, message: String },

    #[error(transparent)]
    Core(#[from] Error),

    /// Flag values that violate a documented range.
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    pub fn at(path: &Path, source: Error) -> Self {
        CliError::File {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 for unreadable or malformed input, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::File { source, .. } | CliError::Core(source) if source.is_parse() => 2,
            CliError::Image { .. } => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
