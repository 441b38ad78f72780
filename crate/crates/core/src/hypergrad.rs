//! Hypergradient estimators: AID (implicit differentiation with CG), ITD
//! (reverse-mode through the inner GD trajectory) and the stochastic Neumann
//! estimator used by stocBiO.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::cg::cg_solve;
use crate::error::{BilevelError, Result};
use crate::inner::InnerTrajectory;
use crate::neumann::{neumann_vq, NeumannSchedule};
use crate::problem::{BilevelProblem, CostCounters, Metered, Samples};
use crate::rng::{sample_batch, Role, Streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[serde(alias = "AID")]
    Aid,
    #[serde(alias = "ITD")]
    Itd,
    #[serde(alias = "STOCBIO", alias = "stocBiO")]
    Stocbio,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Aid => "AID-BiO",
            Method::Itd => "ITD-BiO",
            Method::Stocbio => "stocBiO",
        })
    }
}

/// Per-estimate diagnostics, one variant per method.
#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostics {
    Aid {
        cg_iterations: usize,
        cg_residual: f64,
    },
    Itd {
        inner_steps: usize,
        /// `‖∇_y g(x, y^{D−1})‖`, read off the last GD step; `None` for `D = 0`.
        last_inner_grad: Option<f64>,
    },
    Stocbio {
        q: usize,
        /// Samples drawn by the Neumann batches, `Σ|B_j|`.
        neumann_samples: usize,
        df: usize,
        dg: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypergradEstimate {
    pub grad: DVector<f64>,
    pub diagnostics: Diagnostics,
    /// The CG iterate `v^N`, carried into the next AID call as `v⁰`.
    pub v_out: Option<DVector<f64>>,
}

impl HypergradEstimate {
    pub fn method(&self) -> Method {
        match self.diagnostics {
            Diagnostics::Aid { .. } => Method::Aid,
            Diagnostics::Itd { .. } => Method::Itd,
            Diagnostics::Stocbio { .. } => Method::Stocbio,
        }
    }

    /// Scalar summary for trace rows: CG residual, last inner gradient norm,
    /// or Neumann sample count.
    pub fn inner_diag(&self) -> Option<f64> {
        match self.diagnostics {
            Diagnostics::Aid { cg_residual, .. } => Some(cg_residual),
            Diagnostics::Itd { last_inner_grad, .. } => last_inner_grad,
            Diagnostics::Stocbio { neumann_samples, .. } => Some(neumann_samples as f64),
        }
    }
}

fn finite(grad: DVector<f64>, context: &str) -> Result<DVector<f64>> {
    if grad.iter().all(|g| g.is_finite()) {
        Ok(grad)
    } else {
        Err(BilevelError::NonFinite {
            context: context.to_string(),
        })
    }
}

/// `∇_x f(x, y) − ∇_x∇_y g(x, y)·v^N`, with `v^N` from `N` CG steps on
/// `∇_y² g(x, y) v = ∇_y f(x, y)` started at `v0`.
///
/// Adds 2 to `gc_f`, 1 to `jv_g`, and the CG operator applications to `hv_g`.
pub fn aid_estimate<P: BilevelProblem + ?Sized>(
    prob: &P,
    x: &DVector<f64>,
    y: &DVector<f64>,
    v0: &DVector<f64>,
    n: usize,
    tol: f64,
    counters: &mut CostCounters,
) -> Result<HypergradEstimate> {
    let (gx, b) = {
        let mut m = Metered::new(prob, counters);
        (m.upper_grad_x(x, y, Samples::Full), m.upper_grad_y(x, y, Samples::Full))
    };
    let cg = cg_solve(|p| prob.lower_hvp(x, y, p, Samples::Full), &b, v0, n, tol, counters)?;
    let jv = Metered::new(prob, counters).lower_jvp(x, y, &cg.v, Samples::Full);
    Ok(HypergradEstimate {
        grad: finite(gx - jv, "AID hypergradient")?,
        diagnostics: Diagnostics::Aid {
            cg_iterations: cg.iterations,
            cg_residual: cg.residual_norm,
        },
        v_out: Some(cg.v),
    })
}

/// Gradient of the unrolled map `x ↦ f(x, y^D(x))`:
///
/// ```text
/// ∇_x f(x, y^D) − α Σ_{t<D} ∇_x∇_y g(x, y^t) Π_{j=t+1}^{D−1} (I − α∇_y² g(x, y^j)) ∇_y f(x, y^D)
/// ```
///
/// evaluated by one backward sweep over the trajectory. Adds 2 to `gc_f`,
/// `D` to `jv_g` and `D − 1` to `hv_g`.
pub fn itd_estimate<P: BilevelProblem + ?Sized>(
    prob: &P,
    x: &DVector<f64>,
    traj: &InnerTrajectory,
    counters: &mut CostCounters,
) -> Result<HypergradEstimate> {
    if traj.x() != x {
        return Err(BilevelError::TrajectoryMismatch);
    }
    let alpha = traj.alpha();
    let pts = traj.points();
    let d = traj.steps();
    let yd = traj.last();
    let mut m = Metered::new(prob, counters);
    let mut grad = m.upper_grad_x(x, yd, Samples::Full);
    let mut r = m.upper_grad_y(x, yd, Samples::Full);
    for t in (0..d).rev() {
        grad.axpy(-alpha, &m.lower_jvp(x, &pts[t], &r, Samples::Full), 1.0);
        if t > 0 {
            let hr = m.lower_hvp(x, &pts[t], &r, Samples::Full);
            r.axpy(-alpha, &hr, 1.0);
        }
    }
    let last_inner_grad = (d > 0).then(|| (&pts[d] - &pts[d - 1]).norm() / alpha);
    Ok(HypergradEstimate {
        grad: finite(grad, "ITD hypergradient")?,
        diagnostics: Diagnostics::Itd {
            inner_steps: d,
            last_inner_grad,
        },
        v_out: None,
    })
}

/// stocBiO estimate `∇_x F(x, y; D_F) − ∇_x∇_y G(x, y; D_G)·v_Q`, where
/// `v_Q` is the Neumann estimate started from `v0 = ∇_y F(x, y; D_F)`.
///
/// `D_F` is shared by both upper-level gradients. `D_F`, `D_G` and the
/// Neumann batches come from distinct substreams of `streams`.
#[allow(clippy::too_many_arguments)]
pub fn stocbio_estimate<P: BilevelProblem + ?Sized>(
    prob: &P,
    x: &DVector<f64>,
    y: &DVector<f64>,
    sched: &NeumannSchedule,
    df: usize,
    dg: usize,
    streams: &Streams,
    counters: &mut CostCounters,
) -> Result<HypergradEstimate> {
    let batch_f = sample_batch(prob.upper_population(), df, &mut streams.rng(Role::UpperBatch, 0))?;
    let (gx, v0) = {
        let mut m = Metered::new(prob, counters);
        (
            m.upper_grad_x(x, y, Samples::Batch(&batch_f)),
            m.upper_grad_y(x, y, Samples::Batch(&batch_f)),
        )
    };
    let v = neumann_vq(prob, x, y, &v0, sched, streams, counters)?;
    let batch_g = sample_batch(prob.lower_population(), dg, &mut streams.rng(Role::JacobianBatch, 0))?;
    let jv = Metered::new(prob, counters).lower_jvp(x, y, &v, Samples::Batch(&batch_g));
    Ok(HypergradEstimate {
        grad: finite(gx - jv, "stocBiO hypergradient")?,
        diagnostics: Diagnostics::Stocbio {
            q: sched.q(),
            neumann_samples: sched.total(),
            df,
            dg,
        },
        v_out: None,
    })
}
