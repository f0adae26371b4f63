use thiserror::Error;

/// Errors raised by the solvers, the simulator and the configuration layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A modelling assumption the equilibrium theory relies on does not hold.
    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("integrator failure: {0}")]
    IntegratorFailure(String),

    #[error("{method} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NotConverged {
        method: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
