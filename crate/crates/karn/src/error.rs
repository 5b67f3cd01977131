use std::path::PathBuf;

/// Errors from the data pipeline, file formats and commands.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] karn_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Process exit classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitClass {
    Other = 1,
    Config = 2,
    Data = 3,
    Numerical = 4,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn class(&self) -> ExitClass {
        use karn_core::Error as C;
        match self {
            Error::Core(C::Config(_) | C::Extension(_) | C::InvalidGrid(_) | C::Lock(_)) | Error::Config(_) => ExitClass::Config,
            Error::Core(C::NonFinite(_) | C::Diverged { .. }) | Error::Numerical(_) => ExitClass::Numerical,
            Error::Core(C::Data(_) | C::Empty(_) | C::Shape { .. }) => ExitClass::Data,
            Error::Csv { .. } | Error::Data(_) => ExitClass::Data,
            Error::Io { .. } | Error::Format { .. } => ExitClass::Other,
        }
    }
}
