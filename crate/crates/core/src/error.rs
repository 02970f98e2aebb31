use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("no reflecting channel (N = 0)")]
    NoReflectingChannel,

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        best_value: f64,
    },

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("regressor is rank deficient in dimension {dimension} of {columns}")]
    RankDeficient { dimension: usize, columns: usize },

    #[error("exhaustive search over {size} grid points exceeds the limit of {limit}")]
    InstanceTooLarge { size: f64, limit: f64 },

    #[error("objective decreased on an accepted step ({before} -> {after})")]
    Divergence { before: f64, after: f64 },

    #[error("unknown method `{0}`")]
    UnknownMethod(String),
}

impl Error {
    /// True for failures of a numerical routine, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::NotPsd { .. }
                | Error::RankDeficient { .. }
                | Error::Divergence { .. }
        )
    }
}
