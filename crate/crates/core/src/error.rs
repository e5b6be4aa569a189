use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GraspError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GraspError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("manifest missing in {0}")]
    ManifestMissing(PathBuf),

    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFiniteLoss { step: usize, breakdown: String },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("{0}")]
    Invalid(String),
}

impl GraspError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            GraspError::Dimension { .. } => "dimension",
            GraspError::Config(_) => "config",
            GraspError::Io { .. } => "io",
            GraspError::Format { .. } => "format",
            GraspError::Integrity(_) => "integrity",
            GraspError::ManifestMissing(_) => "manifest_missing",
            GraspError::NonFiniteLoss { .. } => "non_finite_loss",
            GraspError::Singular(_) => "singular",
            GraspError::Invalid(_) => "invalid",
        }
    }

    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        GraspError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GraspError::Io {
            path: path.into(),
            source,
        }
    }
}
