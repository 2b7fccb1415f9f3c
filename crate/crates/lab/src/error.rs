use std::io;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] gatera_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl LabError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        LabError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 0 success, 1 verification or training failure, 2 usage, 3 I/O.
    pub fn exit_code(&self) -> u8 {
        use gatera_core::Error as E;
        match self {
            LabError::Verification(_) => 1,
            LabError::Core(E::Training(_) | E::FrozenViolation(_)) => 1,
            LabError::Core(E::Contract(_) | E::Shape { .. } | E::Domain { .. }) => 1,
            LabError::Core(E::Config(_) | E::Input(_)) => 2,
            LabError::Config(_) | LabError::Usage(_) => 2,
            LabError::Io { .. } | LabError::Format(_) | LabError::Csv(_) => 3,
        }
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
