use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot read {path}: {source}", path = path.display())]
    Read { path: PathBuf, source: std::io::Error },

    #[error("cannot write {path}: {source}", path = path.display())]
    Write { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Core(#[from] ccc_core::Error),
}

impl CliError {
    /// 2 for bad input (configuration, files), 1 for failures of the analysis itself.
    pub fn exit_code(&self) -> u8 {
        use ccc_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Read { .. } | CliError::Write { .. } => 2,
            CliError::Core(E::Config(_) | E::Parse { .. } | E::Io { .. }) => 2,
            CliError::Core(E::Domain(_) | E::Pole { .. } | E::Integration { .. }) => 1,
        }
    }
}
