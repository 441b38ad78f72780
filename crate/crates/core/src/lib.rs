//! Bilevel optimization with matrix-free hypergradients.
//!
//! Problems are exposed through gradient, Jacobian-vector and Hessian-vector
//! handles ([`BilevelProblem`]). On top of them sit the inner solvers
//! (gradient descent, SGD, conjugate gradient), the three hypergradient
//! estimators (AID, ITD, stocBiO's Neumann estimator), the outer optimizers,
//! and closed-form theory bounds for checking runs against.

pub mod cg;
pub mod error;
pub mod hypergrad;
pub mod inner;
pub mod linalg;
pub mod neumann;
pub mod optimizers;
pub mod problem;
pub mod problems;
pub mod rng;
pub mod theory;
pub mod trace;

pub use error::{BilevelError, Result};
pub use problem::{BilevelProblem, Constant, CostCounters, ExactOracle, Metered, Samples, SmoothnessConstants};
pub use rng::{Batch, Role, Streams};
