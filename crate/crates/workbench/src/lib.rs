//! Job runner behind the `squeezeshape` command line tool.
//!
//! A job is a TOML [`config::JobConfig`] plus one [`commands::Command`].
//! Outputs are collected in memory and written once at the end, so a
//! failed job leaves no partial files behind.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use squeezeshape::actuator::ActuatorError;
use squeezeshape::calibration::CalibrationError;
use squeezeshape::compiler::CompileError;
use squeezeshape::detection::DetectionError;
use squeezeshape::noise::NoiseError;
use thiserror::Error;

pub use commands::{run, Command};
pub use config::{Job, JobConfig, ModeSelection, Overrides};
pub use output::Report;

/// Calibration sweep used when no `paths.calibration` is configured.
pub const BUNDLED_CALIBRATION: &str = include_str!("../data/synthetic_calibration.csv");

#[derive(Debug, Error)]
pub enum WorkbenchError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("input file not found: {0}")]
    MissingInput(PathBuf),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Actuator(#[from] ActuatorError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
}

/// Process exit status for a job outcome.
pub fn exit_code(result: &Result<Report, WorkbenchError>) -> i32 {
    match result {
        Ok(r) if r.warnings.is_empty() => 0,
        Ok(_) => 1,
        Err(_) => 2,
    }
}
