use std::fmt::Display;
use std::process::ExitCode;

use thiserror::Error;
use zsfuse_core::attribution::AttributionError;
use zsfuse_core::backend::CacheError;
use zsfuse_core::{BuildError, EvalError, ManifestError, PipelineError};

/// A failed command. Usage errors are bad flags, files or configuration;
/// everything else is a runtime failure.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn usage(message: impl Display) -> Self {
        CliError::Usage(message.to_string())
    }

    pub fn runtime(message: impl Display) -> Self {
        CliError::Runtime(message.to_string())
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(2),
            CliError::Runtime(_) => ExitCode::from(1),
        }
    }
}

fn is_usage_build(e: &BuildError) -> bool {
    match e {
        BuildError::EmptyLabels
        | BuildError::DuplicateLabel(_)
        | BuildError::InvalidDescriptionCount(_)
        | BuildError::Format(_)
        | BuildError::Io { .. } => true,
        BuildError::Label { source, .. } => is_usage_build(source),
        _ => false,
    }
}

impl From<BuildError> for CliError {
    fn from(e: BuildError) -> Self {
        if is_usage_build(&e) {
            CliError::usage(e)
        } else {
            CliError::runtime(e)
        }
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        CliError::usage(e)
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::DimMismatch { .. } | PipelineError::EmptySelection => CliError::usage(e),
            _ => CliError::runtime(e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::LabelMismatch | EvalError::EmptyPredictions => CliError::usage(e),
            EvalError::Pipeline(p) => p.into(),
            _ => CliError::runtime(e),
        }
    }
}

impl From<AttributionError> for CliError {
    fn from(e: AttributionError) -> Self {
        match e {
            AttributionError::Schedule(_) | AttributionError::DegenerateImage { .. } => {
                CliError::usage(e)
            }
            AttributionError::Pipeline(p) => p.into(),
            _ => CliError::runtime(e),
        }
    }
}

impl From<CacheError> for CliError {
    fn from(e: CacheError) -> Self {
        CliError::runtime(e)
    }
}
