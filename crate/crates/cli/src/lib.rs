//! Command-line pipeline: synthesize a dataset, train the baseline and the
//! disentanglement model, audit their test predictions and compare the audits.
//!
//! Exit codes: 0 success, 1 validation error (config, inputs, schema),
//! 2 runtime failure (training abort, I/O).

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::Path;

use dislab_core::fairaudit::AuditError;
use dislab_core::losses::LossError;
use dislab_core::synthgen::SynthError;
use dislab_core::trainer::TrainError;

pub use commands::{cmd_all, cmd_audit, cmd_compare, cmd_synth, cmd_train, Outcome};
pub use config::{Experiment, RawConfig, TrainRun};
pub use manifest::ExperimentManifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config {file}, line {line}: {msg}")]
    ConfigSyntax { file: String, line: usize, msg: String },
    #[error("{0}")]
    Validation(String),
    #[error("input {path}: {msg}")]
    Input { path: String, msg: String },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        let validation = match self {
            CliError::Usage(_) | CliError::ConfigSyntax { .. } | CliError::Validation(_) | CliError::Input { .. } => {
                true
            }
            CliError::Synth(e) => !matches!(e, SynthError::Io(_)),
            CliError::Train(e) => matches!(
                e,
                TrainError::Config(_) | TrainError::Data(_) | TrainError::Loss(LossError::Config(_))
            ),
            CliError::Audit(e) => matches!(
                e,
                AuditError::Schema { .. }
                    | AuditError::Mismatch(_)
                    | AuditError::UnknownSa(_)
                    | AuditError::Threshold(_)
                    | AuditError::Bins(_)
                    | AuditError::Empty
            ),
            CliError::Io { .. } | CliError::Runtime(_) => false,
        };
        if validation {
            1
        } else {
            2
        }
    }
}
