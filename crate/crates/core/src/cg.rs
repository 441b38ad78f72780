//! Matrix-free conjugate gradient for symmetric positive definite systems.

use nalgebra::DVector;

use crate::error::{invalid, BilevelError, Result};
use crate::problem::CostCounters;

#[derive(Debug, Clone, PartialEq)]
pub struct CgResult {
    pub v: DVector<f64>,
    /// CG iterations performed (search directions applied).
    pub iterations: usize,
    /// `‖b − A v‖` at the returned `v`.
    pub residual_norm: f64,
    /// Residual norm before the first iteration and after each one.
    pub residuals: Vec<f64>,
    /// Operator applications, including the initial residual for nonzero `v0`.
    pub hvp_calls: usize,
}

/// Solves `A v = b` by conjugate gradient from `v0`.
///
/// Runs at most `min(n, dim)` iterations and stops early once the residual
/// norm is `≤ tol` (exact zero always stops). Each application of `apply`
/// adds one to `hv_g`. A nonzero `v0` costs one extra application to form the
/// initial residual.
pub fn cg_solve<F>(
    mut apply: F,
    b: &DVector<f64>,
    v0: &DVector<f64>,
    n: usize,
    tol: f64,
    counters: &mut CostCounters,
) -> Result<CgResult>
where
    F: FnMut(&DVector<f64>) -> DVector<f64>,
{
    if v0.len() != b.len() {
        return Err(BilevelError::DimensionMismatch {
            context: "cg warm start",
            expected: b.len(),
            actual: v0.len(),
        });
    }
    if tol.is_nan() || tol < 0.0 {
        return Err(invalid("tol", "tolerance must be non-negative"));
    }
    let mut calls = 0usize;
    let mut apply = |p: &DVector<f64>| {
        calls += 1;
        counters.hv_g += 1;
        apply(p)
    };
    let mut v = v0.clone();
    let mut r = if v0.iter().all(|&t| t == 0.0) {
        b.clone()
    } else {
        b - apply(v0)
    };
    let mut rs = r.norm_squared();
    let mut residuals = vec![rs.sqrt()];
    let mut p = r.clone();
    let mut iterations = 0;
    for it in 0..n.min(b.len()) {
        if !rs.is_finite() {
            return Err(BilevelError::NonFinite {
                context: format!("cg residual at iteration {it}"),
            });
        }
        if rs == 0.0 || rs.sqrt() <= tol {
            break;
        }
        let ap = apply(&p);
        let curvature = p.dot(&ap);
        if !curvature.is_finite() {
            return Err(BilevelError::NonFinite {
                context: format!("cg curvature at iteration {it}"),
            });
        }
        if curvature <= 0.0 {
            return Err(BilevelError::NotSpd { iteration: it, curvature });
        }
        let step = rs / curvature;
        v.axpy(step, &p, 1.0);
        r.axpy(-step, &ap, 1.0);
        let rs_new = r.norm_squared();
        p = &r + &p * (rs_new / rs);
        rs = rs_new;
        residuals.push(rs.sqrt());
        iterations += 1;
    }
    Ok(CgResult {
        v,
        iterations,
        residual_norm: rs.sqrt(),
        residuals,
        hvp_calls: calls,
    })
}
