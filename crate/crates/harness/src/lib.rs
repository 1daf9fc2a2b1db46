//! File formats, experiment orchestration and the `genreplay` command line
//! on top of [`genreplay_core`].

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod experiment;

use std::path::Path;

pub use config::{parse_config, parse_config_str, ConfigError, DatasetSource, ProbeConfig, RunConfig};
pub use experiment::{run_cell, run_experiment, CellResult, ExperimentReport};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Table { path: String, line: u64, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Output(String),
    #[error("pipeline panicked: {0}")]
    Panic(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] genreplay_core::Error),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
