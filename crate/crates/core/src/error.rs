use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular or badly conditioned system: {0}")]
    Singular(String),

    #[error("{solver} did not converge after {iterations} iterations (last residual {residual:.3e})")]
    NoConvergence { solver: &'static str, iterations: usize, residual: f64, history: Vec<f64> },

    #[error("infeasible pair: {0}")]
    Infeasible(String),

    #[error("scheme violation: {0}")]
    Scheme(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
