use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed raster: {0}")]
    Format(String),

    #[error("unsupported bit depth: maxval {0}")]
    UnsupportedDepth(u32),

    #[error("image {width}x{height} is below the {min}x{min} floor")]
    TooSmall { width: usize, height: usize, min: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("joint {joint} is behind the camera (depth {depth:.3} cm)")]
    DegenerateView { joint: &'static str, depth: f64 },

    #[error("no feasible subject after {0} attempts")]
    Infeasible(usize),

    #[error("non-finite value in {0}")]
    NumericFailure(&'static str),

    #[error("training diverged at step {step}: loss {loss}")]
    TrainingFailure { step: usize, loss: f64 },

    #[error("keypoint {0} is not detected on the clean image")]
    NothingToAttack(&'static str),

    #[error("fit failed: {0}")]
    FitFailure(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable tag, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
            Error::UnsupportedDepth(_) => "unsupported_depth",
            Error::TooSmall { .. } => "too_small",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DegenerateView { .. } => "degenerate_view",
            Error::Infeasible(_) => "infeasible",
            Error::NumericFailure(_) => "numeric_failure",
            Error::TrainingFailure { .. } => "training_failure",
            Error::NothingToAttack(_) => "nothing_to_attack",
            Error::FitFailure(_) => "fit_failure",
            Error::DegenerateGeometry(_) => "degenerate_geometry",
            Error::Checkpoint(_) => "checkpoint",
            Error::Parse(_) => "parse",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
