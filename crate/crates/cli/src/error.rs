use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("step {step} (config {config_hash}): {source}")]
    Training {
        step: usize,
        config_hash: String,
        #[source]
        source: mfm_core::Error,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] mfm_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 usage, 2 numerical failure, 3 IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Training { source, .. } if !source.is_io() => 2,
            CliError::Io { .. } => 3,
            CliError::Training { .. } => 3,
            CliError::Core(e) if e.is_numerical() => 2,
            CliError::Core(e) if e.is_io() => 3,
            CliError::Core(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            1 => "usage",
            2 => "numerical",
            _ => "io",
        }
    }
}
