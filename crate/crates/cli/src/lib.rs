// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment runner behind the `statetrack` binary.
//!
//! Every run is driven by an [`ExperimentConfig`] and writes its outputs plus
//! a [`RunManifest`] into one directory.

pub mod accuracy;
pub mod backend;
pub mod cli;
pub mod config;
pub mod experiment;
pub mod manifest;
pub mod plot;

use std::path::PathBuf;

use statetrack::counterfactual::CounterfactualError;
use statetrack::model::ModelError;
use statetrack::patching::PatchingError;
use statetrack::tasks::TaskError;
use thiserror::Error;

pub use accuracy::{run_accuracy_grid, AccuracyCell, AccuracyGrid};
pub use backend::Backend;
pub use config::ExperimentConfig;
pub use experiment::{run_attention_analysis, run_patching_experiment};
pub use manifest::RunManifest;
pub use plot::emit_plots;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Counterfactual(#[from] CounterfactualError),
    #[error(transparent)]
    Patching(#[from] PatchingError),
    #[error("missing prior result {0}; run `patch` first or list heads in the config")]
    MissingPriorResult(PathBuf),
    #[error("malformed result file {path}: {reason}")]
    MalformedResultFile { path: PathBuf, reason: String },
    #[error("manifest drift: {0}")]
    ManifestDrift(String),
}

impl RunError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> RunError {
        let path = path.into();
        move |source| RunError::Io { path, source }
    }

    /// Process exit code: 1 for usage and configuration errors, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => cli::EXIT_USAGE,
            _ => cli::EXIT_RUNTIME,
        }
    }
}
