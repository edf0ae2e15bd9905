use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Model parameters violate an invariant (stationarity, positive definiteness, ...).
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Sampler configuration is inconsistent with the model or with itself.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// A normalization saw only zero-probability candidates, or a covariance lost definiteness.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
