//! Command-line front end: dataset construction, training, sampling,
//! evaluation and ablation sweeps driven by one JSON run config.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod grid;

use std::path::PathBuf;

use sugar_core::ErrorKind;

pub use ablate::{cmd_ablate, expand_cells, AblateRow, Cell};
pub use commands::{cmd_data, cmd_eval, cmd_sample, cmd_train, probes, MetricRow, MetricSummary, Probe, SampleRow};
pub use config::{DataAxis, DropAxis, GuidancePoint, Paths, RunConfig, SamplingConfig, SweepConfig};

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] sugar_core::Error),

    #[error("cannot write {path:?}: {reason}")]
    Output { path: PathBuf, reason: String },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Config => EXIT_CONFIG,
                ErrorKind::Data => EXIT_DATA,
                ErrorKind::Numeric => EXIT_NUMERIC,
            },
            CliError::Output { .. } => EXIT_OTHER,
        }
    }

    pub(crate) fn output(path: impl Into<PathBuf>, e: impl std::fmt::Display) -> Self {
        CliError::Output { path: path.into(), reason: e.to_string() }
    }
}
