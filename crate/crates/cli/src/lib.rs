//! Experiment driver for keygate: configuration files, the command
//! implementations behind the `keygate` binary, and exit-code mapping.

pub mod commands;
pub mod config;

use thiserror::Error;

pub use config::{ExperimentConfig, TaskKind};

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGENCE: u8 = 3;
pub const EXIT_IO: u8 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(String),

    #[error(transparent)]
    Core(#[from] keygate::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use keygate::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::Core(e) => match e {
                E::Divergence { .. } | E::NonFiniteGradient { .. } | E::NonFinite(_) => EXIT_DIVERGENCE,
                E::Io(_) | E::Json(_) | E::CorpusMissing { .. } | E::CorpusFormat { .. } | E::Checkpoint(_) | E::CheckpointVersion { .. } => {
                    EXIT_IO
                }
                E::InvalidParameter(_)
                | E::Architecture(_)
                | E::KeyLength { .. }
                | E::KeyFormat(_)
                | E::InvalidLayerIndex { .. }
                | E::Budget { .. }
                | E::Indistinguishable(_) => EXIT_CONFIG,
                _ => EXIT_OTHER,
            },
        }
    }
}
