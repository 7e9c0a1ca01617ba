use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("not found: {}", .0.display())]
    NotFound(PathBuf),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("diverged at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Core(moue_core::Error),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            HarnessError::NotFound(path.to_path_buf())
        } else {
            HarnessError::Io { path: path.to_path_buf(), source }
        }
    }

    /// Process exit code: 1 usage, 2 data or format, 3 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Diverged { .. } => 3,
            HarnessError::Core(moue_core::Error::Divergence) => 3,
            HarnessError::Core(
                moue_core::Error::InvalidConfig(_) | moue_core::Error::WindowExceedsRing { .. },
            ) => 1,
            _ => 2,
        }
    }
}

impl From<moue_core::Error> for HarnessError {
    fn from(e: moue_core::Error) -> Self {
        HarnessError::Core(e)
    }
}
