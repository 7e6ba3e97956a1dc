use thiserror::Error;

use crate::integrator::IntegrationFailure;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Autodiff(#[from] finn_autodiff::AutodiffError),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("invalid boundary conditions: {0}")]
    Boundary(String),
    #[error("Cauchy coefficient equals the spacing {0}; the ghost relation is singular")]
    SingularCauchy(f64),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("model has no {0} module")]
    MissingModule(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("integration failed: {0}")]
    Integration(Box<IntegrationFailure>),
    #[error("data variance is zero; relative error is undefined")]
    ZeroVariance,
    #[error("dataset error: {0}")]
    Data(String),
    #[error("observation file: {0}")]
    Observation(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<IntegrationFailure> for CoreError {
    fn from(f: IntegrationFailure) -> Self {
        CoreError::Integration(Box::new(f))
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
