use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("dimensionality mismatch: expected {expected}D, found {found}D")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("integration blew up at step {step} (t = {t})")]
    BlowUp { step: usize, t: f64 },

    #[error("registration failed for target {index}: {source}")]
    Registration {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite energy at level {level}, iteration {iteration}")]
    NonFiniteEnergy { level: usize, iteration: usize },

    #[error("invalid simplex weights: {0}")]
    InvalidWeights(String),

    #[error("deformation folds: min Jacobian determinant {min_det} ({context})")]
    Fold { min_det: f64, context: String },

    #[error("invalid labels: {0}")]
    InvalidLabels(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("pipeline failure: {0}")]
    Pipeline(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("export failed: {0}")]
    Export(String),

    #[error(transparent)]
    Format(#[from] crate::io::FormatError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable code, used by the CLI error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidGrid(_) => "invalid_grid",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::GridMismatch(_) => "grid_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidKernel(_) => "invalid_kernel",
            Error::InvalidConfig(_) => "invalid_config",
            Error::BlowUp { .. } => "blow_up",
            Error::Registration { .. } => "registration_failed",
            Error::NonFiniteEnergy { .. } => "non_finite_energy",
            Error::InvalidWeights(_) => "invalid_weights",
            Error::Fold { .. } => "fold",
            Error::InvalidLabels(_) => "invalid_labels",
            Error::Empty(_) => "empty_input",
            Error::Pipeline(_) => "pipeline",
            Error::InvalidScene(_) => "invalid_scene",
            Error::Export(_) => "export",
            Error::Format(e) => e.code(),
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
