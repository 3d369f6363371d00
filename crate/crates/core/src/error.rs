//! Error types shared across the library.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("rate matrix is reducible; the stationary distribution is not unique")]
    ReducibleChain,

    #[error("survival probability underflow (total mass {mass:.3e})")]
    SurvivalUnderflow { mass: f64 },

    #[error("missing field: {0}")]
    MissingField(&'static str),

    #[error("target set is empty on the grid")]
    EmptyTarget,

    #[error("speed field must be positive (f_max = {0})")]
    NonPositiveSpeed(f64),

    #[error("horizon bound requires K_min > 0 (got {0})")]
    NonPositiveRunningCost(f64),

    #[error("no convergence after {iterations} iterations (last residual {last:.3e})")]
    NonConvergence {
        iterations: usize,
        last: f64,
        residual_history: Vec<f64>,
    },

    #[error("trajectory exceeded the solved horizon {horizon} without reaching the target")]
    TrajectoryDiverged { horizon: f64 },

    #[error("degenerate gradient at ({x}, {y})")]
    DegenerateGradient { x: f64, y: f64 },

    #[error("scenario validation failed:\n  {}", .0.join("\n  "))]
    ScenarioInvalid(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("raster error: {0}")]
    Raster(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
