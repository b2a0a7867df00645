use std::path::{Path, PathBuf};

/// Process exit codes of the command-line tool.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NUMERICAL: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] dyndict_core::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}: parse error at byte {offset}: {message}", path.display())]
    Parse { path: PathBuf, offset: usize, message: String },

    #[error("{}: unsupported format at byte {offset}: {message}", path.display())]
    Unsupported { path: PathBuf, offset: usize, message: String },

    #[error("{}:{line}: {message}", path.display())]
    ConfigFile { path: PathBuf, line: usize, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn exit_code(&self) -> i32 {
        use dyndict_core::Error as Core;
        match self {
            Error::Core(Core::Config(_)) | Error::ConfigFile { .. } => exit::CONFIG,
            Error::Core(Core::NonFinite { .. }) => exit::NUMERICAL,
            Error::Core(Core::Data(_) | Core::Dimension { .. } | Core::UndefinedMetric(_)) => exit::DATA,
            Error::Io { .. } | Error::Parse { .. } | Error::Unsupported { .. } => exit::DATA,
            Error::Core(Core::Contract(_)) => exit::FAILURE,
        }
    }
}

/// Byte-level decode failure, before a path is attached.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("parse error at byte {offset}: {message}")]
    Malformed { offset: usize, message: String },

    #[error("unsupported format at byte {offset}: {message}")]
    Unsupported { offset: usize, message: String },
}

impl FormatError {
    pub fn offset(&self) -> usize {
        match self {
            FormatError::Malformed { offset, .. } | FormatError::Unsupported { offset, .. } => *offset,
        }
    }

    pub(crate) fn malformed(offset: usize, message: impl Into<String>) -> Self {
        FormatError::Malformed { offset, message: message.into() }
    }

    pub(crate) fn at(self, path: &Path) -> Error {
        let path = path.to_path_buf();
        match self {
            FormatError::Malformed { offset, message } => Error::Parse { path, offset, message },
            FormatError::Unsupported { offset, message } => Error::Unsupported { path, offset, message },
        }
    }
}
