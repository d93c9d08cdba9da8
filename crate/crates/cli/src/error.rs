//! Error classes and their process exit codes.

use flatstream::cost::CostError;
use flatstream::engine::EngineError;
use flatstream::model::checkpoint::CheckpointError;
use flatstream::model::ModelError;
use flatstream::planner::PlanError;
use flatstream::rtl::RtlError;
use flatstream::sim::SimError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0} already exists (use --force to overwrite)")]
    OutputExists(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Rtl(#[from] RtlError),
}

/// Broad failure classes; each maps to one exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    InvalidInput,
    Io,
    Infeasible,
    OutputExists,
    Verification,
}

impl ErrorClass {
    pub fn exit_code(self) -> u8 {
        match self {
            ErrorClass::Usage => 2,
            ErrorClass::InvalidInput => 3,
            ErrorClass::Io => 4,
            ErrorClass::Infeasible => 5,
            ErrorClass::OutputExists => 6,
            ErrorClass::Verification => 7,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorClass::Usage => "usage",
            ErrorClass::InvalidInput => "invalid-input",
            ErrorClass::Io => "io",
            ErrorClass::Infeasible => "infeasible",
            ErrorClass::OutputExists => "output-exists",
            ErrorClass::Verification => "verification",
        }
    }
}

fn model_class(e: &ModelError) -> ErrorClass {
    match e {
        ModelError::Io(_) => ErrorClass::Io,
        _ => ErrorClass::InvalidInput,
    }
}

fn engine_class(e: &EngineError) -> ErrorClass {
    match e {
        EngineError::AccumulatorOverflowRisk { .. } | EngineError::NonFiniteLoss { .. } => ErrorClass::Infeasible,
        EngineError::Model(m) => model_class(m),
        _ => ErrorClass::InvalidInput,
    }
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io { path: path.as_ref().display().to_string(), source }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            CliError::Usage(_) => ErrorClass::Usage,
            CliError::Io { .. } => ErrorClass::Io,
            CliError::OutputExists(_) => ErrorClass::OutputExists,
            CliError::Verification(_) => ErrorClass::Verification,
            CliError::Model(e) => model_class(e),
            CliError::Checkpoint(CheckpointError::Io(_)) => ErrorClass::Io,
            CliError::Checkpoint(CheckpointError::Model(m)) => model_class(m),
            CliError::Checkpoint(_) => ErrorClass::InvalidInput,
            CliError::Engine(e) => engine_class(e),
            CliError::Plan(PlanError::Infeasible(_)) => ErrorClass::Infeasible,
            CliError::Plan(_) | CliError::Cost(_) => ErrorClass::InvalidInput,
            CliError::Sim(SimError::DeadlockDetected { .. }) => ErrorClass::Infeasible,
            CliError::Sim(SimError::Engine(e)) => engine_class(e),
            CliError::Sim(_) => ErrorClass::InvalidInput,
            CliError::Rtl(RtlError::OutputExists(_)) => ErrorClass::OutputExists,
            CliError::Rtl(RtlError::Io(_)) => ErrorClass::Io,
            CliError::Rtl(_) => ErrorClass::InvalidInput,
        }
    }
}
