use thiserror::Error;

/// Errors raised by problem construction, solvers and estimators.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum BilevelError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("iterate diverged at step {step} (norm {norm:e})")]
    Divergence { step: usize, norm: f64 },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("conjugate gradient hit non-positive curvature {curvature:e} at iteration {iteration}; operator is not SPD")]
    NotSpd { iteration: usize, curvature: f64 },

    #[error("singular lower-level Hessian")]
    Singular,

    #[error("trajectory was computed at a different upper point")]
    TrajectoryMismatch,

    #[error("problem does not provide an exact lower-level oracle")]
    NoOracle,

    #[error("solver did not reach tolerance {tol:e} within {iterations} iterations")]
    NotConverged { tol: f64, iterations: usize },
}

pub type Result<T, E = BilevelError> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> BilevelError {
    BilevelError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(BilevelError::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
