//! Error type of the command-line layer and its exit-code mapping.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Config(String),
    #[error("corpus not found at {}", .0.display())]
    CorpusNotFound(PathBuf),
    #[error("checkpoint not found at {}", .0.display())]
    CheckpointNotFound(PathBuf),
    #[error("unsupported schema version {found} in {what} (expected {expected})")]
    Version { what: &'static str, found: u32, expected: u32 },
    #[error("{0}")]
    Integrity(String),
    #[error("{0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] orthodiff_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::Core(orthodiff_core::Error::Config(_)) => "config",
            Error::CorpusNotFound(_) => "corpus-not-found",
            Error::CheckpointNotFound(_) => "checkpoint-not-found",
            Error::Version { .. } => "version",
            Error::Integrity(_) => "integrity",
            Error::Corrupt(_) => "corrupt",
            Error::Io { .. } => "io",
            Error::Core(orthodiff_core::Error::Input(_)) => "input",
            Error::Core(orthodiff_core::Error::NonFinite(_)) => "non-finite",
        }
    }

    /// 2 for bad configuration, 3 for missing inputs, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "corpus-not-found" | "checkpoint-not-found" => 3,
            _ => 1,
        }
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
pub(crate) use config_err;
