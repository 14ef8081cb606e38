use std::path::PathBuf;

use depthlane_core::network::NetworkError;
use depthlane_core::objective::ObjectiveError;
use depthlane_core::SceneError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad format: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("dimension mismatch in {what}: checkpoint has {found}, config wants {expected}")]
    DimensionMismatch {
        what: String,
        expected: String,
        found: String,
    },
    #[error("{0} needs a pretrained depth checkpoint")]
    MissingCheckpoint(&'static str),
    #[error("pretraining not applicable to {0}")]
    PretrainNotApplicable(&'static str),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("frozen parameter {0} changed during training")]
    FrozenParameterChanged(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Objective(ObjectiveError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code: 1 for configuration problems, 2 for anything that
    /// went wrong while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_)
            | Self::DimensionMismatch { .. }
            | Self::MissingCheckpoint(_)
            | Self::PretrainNotApplicable(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
