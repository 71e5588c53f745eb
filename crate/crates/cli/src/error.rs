use std::path::PathBuf;

use igr_core::Error as CoreError;

/// Failure of a CLI command, carrying the process exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("missing prerequisite {}: run `igr {producer}` first", path.display())]
    Missing { path: PathBuf, producer: String },
    #[error("{} was produced by `igr {producer}` under a different configuration; rerun `igr {producer}` or pass --force", path.display())]
    Stale { path: PathBuf, producer: String },
    #[error("workdir {} is locked by another command ({}); remove the file if no command is running", .0.display(), .1)]
    Locked(PathBuf, String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{0}")]
    Other(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(CoreError::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(CoreError::Serde(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing { .. } | CliError::Stale { .. } => 3,
            CliError::Core(e) => match e {
                CoreError::Config(_) => 2,
                CoreError::MissingArtifact { .. } => 3,
                CoreError::Provider { .. } | CoreError::Parse { .. } => 4,
                CoreError::Numerical { .. } => 5,
                _ => 1,
            },
            CliError::Locked(..) | CliError::Other(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
