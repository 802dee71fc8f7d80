//! Command-line entry points: simulation studies, posterior inspection and
//! the trial-conduct service.

pub mod posterior;
pub mod study;

use std::path::{Path, PathBuf};

use dosefind::DoseError;
use dosefind_service::ServiceError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Engine(#[from] DoseError),

    #[error(transparent)]
    Service(#[from] ServiceError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for bad input, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Engine(DoseError::InvalidParameter { .. } | DoseError::Config(_)) => 2,
            CliError::Service(ServiceError::Validation { .. }) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}
