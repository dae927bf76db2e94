//! IO, file formats and command implementations around `streamdiff-core`.

pub mod config;
pub mod distill;
pub mod events;
pub mod feed;
pub mod formats;
pub mod run;
pub mod verify;

use std::path::Path;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: format error at byte {offset}: {message}")]
    Format { path: String, offset: u64, message: String },
    #[error("{path}:{line}: {message}")]
    Config { path: String, line: usize, message: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] streamdiff_core::Error),
    #[error("verification failed: {0}")]
    Verify(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Fills in the file name for errors raised by path-agnostic readers.
    pub fn at(self, path: &Path) -> Self {
        let p = path.display().to_string();
        match self {
            CliError::Io { source, .. } => CliError::Io { path: p, source },
            CliError::Format { offset, message, .. } => CliError::Format { path: p, offset, message },
            other => other,
        }
    }

    /// 1 for bad input, 2 for internal inconsistencies and failed checks.
    pub fn exit_code(&self) -> i32 {
        use streamdiff_core::Error as E;
        match self {
            CliError::Io { .. } | CliError::Format { .. } | CliError::Config { .. } | CliError::Usage(_) => 1,
            CliError::Core(E::Input(_) | E::Format { .. } | E::Argument(_)) => 1,
            CliError::Core(_) | CliError::Verify(_) => 2,
        }
    }
}
