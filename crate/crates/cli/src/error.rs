use std::io;
use std::path::PathBuf;

use poseforge_core::camera::CameraError;
use poseforge_core::formats::FormatError;
use poseforge_core::fusion::FusionError;
use poseforge_core::metrics::MetricsError;
use poseforge_core::pnp::PnpError;
use poseforge_core::rwhe::RwheError;
use thiserror::Error;

/// Exit status for bad inputs.
pub const EXIT_VALIDATION: i32 = 1;
/// Exit status when a solver or estimator fails on valid inputs.
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{context}: {message}")]
    Validation { context: String, message: String },
    #[error("calibration profile {} does not exist", .0.display())]
    MissingProfile(PathBuf),
    #[error("{context}: {message}")]
    Numerical { context: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical { .. } => EXIT_NUMERICAL,
            _ => EXIT_VALIDATION,
        }
    }

    pub fn validation(context: impl Into<String>, message: impl ToString) -> Self {
        CliError::Validation {
            context: context.into(),
            message: message.to_string(),
        }
    }

    pub fn numerical(context: impl Into<String>, message: impl ToString) -> Self {
        CliError::Numerical {
            context: context.into(),
            message: message.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(context: impl Into<String>, e: FormatError) -> Self {
        Self::validation(context, e)
    }

    pub fn pnp(e: PnpError) -> Self {
        let bad_input = match &e {
            PnpError::InsufficientFeatures { .. } | PnpError::DuplicateFeature { .. } => true,
            PnpError::Camera { source, .. } => !matches!(source, CameraError::BehindCamera { .. }),
            _ => false,
        };
        if bad_input {
            Self::validation("pnp", e)
        } else {
            Self::numerical("pnp", e)
        }
    }

    pub fn rwhe(source: &str, e: RwheError) -> Self {
        let context = format!("rwhe ({source})");
        match e {
            RwheError::InsufficientSamples { .. } | RwheError::MissingTruth(_) => Self::validation(context, e),
            _ => Self::numerical(context, e),
        }
    }

    pub fn fusion(context: &str, e: FusionError) -> Self {
        match e {
            FusionError::InsufficientSamples { .. } => Self::validation(context, e),
            _ => Self::numerical(context, e),
        }
    }

    pub fn metrics(e: MetricsError) -> Self {
        match e {
            MetricsError::Camera { .. } => Self::numerical("metrics", e),
            _ => Self::validation("metrics", e),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
