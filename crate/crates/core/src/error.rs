use thiserror::Error;

/// Errors raised across the crate. Display strings are the stable error codes
/// surfaced by the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty-vector")]
    EmptyVector,
    #[error("shape: {0}")]
    Shape(String),
    #[error("non-scalar-loss")]
    NonScalarLoss,
    #[error("negative-friction")]
    NegativeFriction,
    #[error("empty-request")]
    EmptyRequest,
    #[error("negative-noise")]
    NegativeNoise,
    #[error("support: {0}")]
    Support(String),
    #[error("bad-gamma")]
    BadGamma,
    #[error("bad-rho")]
    BadRho,
    #[error("empty-atlas")]
    EmptyAtlas,
    #[error("empty-calib")]
    EmptyCalib,
    #[error("sample-budget: {0}")]
    SampleBudget(String),
    #[error("diverged: {0}")]
    Diverged(String),
    #[error("missing-dependency: {0}")]
    MissingDependency(String),
    #[error("format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
