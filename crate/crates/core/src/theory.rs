//! Ground-truth oracles and the closed-form constants of the convergence
//! analysis, for checking estimators and runs against.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, BilevelError, Result};
use crate::linalg::spd_solve;
use crate::problem::{BilevelProblem, Samples, SmoothnessConstants};

/// Largest lower dimension for which Hessians are assembled densely.
pub const DENSE_LIMIT: usize = 50;

/// Run parameters the bounds depend on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "Q")]
    pub q: usize,
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(rename = "Df")]
    pub df: usize,
    #[serde(rename = "Dg")]
    pub dg: usize,
    #[serde(rename = "B")]
    pub b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryBounds {
    #[serde(rename = "L_Phi")]
    pub l_phi: f64,
    #[serde(rename = "Gamma")]
    pub gamma: f64,
    #[serde(rename = "delta_DN")]
    pub delta_dn: f64,
    #[serde(rename = "Omega")]
    pub omega_aid: f64,
    pub lambda: f64,
    pub omega: f64,
    #[serde(rename = "Delta_var")]
    pub delta_var: f64,
    pub nu: f64,
    /// `μ⁻¹(1−ημ)^{Q+1}M`.
    pub neumann_bias: f64,
    /// Bound on `E‖v_Q − [∇_y² g]⁻¹∇_y f‖²`.
    pub neumann_variance: f64,
}

/// `L + L²/μ + Mτ/μ + LMρ/μ²`, shared by λ, ν and the tracking bound.
fn lipschitz_sum(c: &SmoothnessConstants) -> f64 {
    let (l, mu) = (c.l, c.mu);
    l + l * l / mu + c.m * c.tau / mu + l * c.m * c.rho / (mu * mu)
}

/// `(√κ − 1)/(√κ + 1)`.
pub fn cg_ratio(kappa: f64) -> f64 {
    let s = kappa.sqrt();
    (s - 1.0) / (s + 1.0)
}

/// `√κ((√κ−1)/(√κ+1))^N`, the CG error contraction after `N` steps.
pub fn cg_error_factor(kappa: f64, n: usize) -> f64 {
    kappa.sqrt() * cg_ratio(kappa).powi(n as i32)
}

pub fn gamma(c: &SmoothnessConstants) -> f64 {
    let (l, mu, m) = (c.l, c.mu, c.m);
    let k = c.kappa();
    3.0 * l * l
        + 3.0 * c.tau * c.tau * m * m / (mu * mu)
        + 6.0 * l * l * (1.0 + k.sqrt()).powi(2) * (k + c.rho * m / (mu * mu)).powi(2)
}

pub fn delta_dn(c: &SmoothnessConstants, alpha: f64, d: usize, n: usize) -> f64 {
    let k = c.kappa();
    gamma(c) * (1.0 - alpha * c.mu).powi(d as i32) + 6.0 * c.l * c.l * k * cg_ratio(k).powi(2 * n as i32)
}

/// `Ω = 8(βκ² + 2βML/μ² + 2βLMκ/μ²)²`.
pub fn omega_aid(c: &SmoothnessConstants, beta: f64) -> f64 {
    let (l, mu, m) = (c.l, c.mu, c.m);
    let k = c.kappa();
    8.0 * (beta * k * k + 2.0 * beta * m * l / (mu * mu) + 2.0 * beta * l * m * k / (mu * mu)).powi(2)
}

fn contraction_sq(c: &SmoothnessConstants, d: usize) -> f64 {
    ((c.l - c.mu) / (c.l + c.mu)).powi(2 * d as i32)
}

pub fn lambda(c: &SmoothnessConstants, beta: f64, d: usize) -> f64 {
    let r = beta * c.l / c.mu;
    contraction_sq(c, d) * (2.0 + 4.0 * r * r * lipschitz_sum(c).powi(2))
}

pub fn omega(c: &SmoothnessConstants, beta: f64, d: usize) -> f64 {
    let r = beta * c.l / c.mu;
    4.0 * r * r * contraction_sq(c, d)
}

pub fn delta_var(c: &SmoothnessConstants, eta: f64, q: usize, b: usize, df: usize, dg: usize) -> f64 {
    let (l, mu, m) = (c.l, c.mu, c.m);
    let (l2, m2, mu2) = (l * l, m * m, mu * mu);
    4.0 * l2 * m2 / (mu2 * dg as f64)
        + (8.0 * l2 / mu2 + 2.0) * m2 / df as f64
        + 16.0 * eta * eta * l2 * l2 * m2 / (mu2 * b as f64)
        + 16.0 * l2 * m2 * (1.0 - eta * mu).powi(2 * q as i32) / mu2
}

pub fn nu(c: &SmoothnessConstants) -> f64 {
    1.25 * lipschitz_sum(c).powi(2)
}

pub fn neumann_bias_bound(c: &SmoothnessConstants, eta: f64, q: usize) -> f64 {
    (1.0 - eta * c.mu).powi(q as i32 + 1) * c.m / c.mu
}

pub fn neumann_variance_bound(c: &SmoothnessConstants, eta: f64, q: usize, b: usize, df: usize) -> f64 {
    let (l, mu, m) = (c.l, c.mu, c.m);
    4.0 * eta * eta * l * l * m * m / (mu * mu * b as f64)
        + 4.0 * (1.0 - eta * mu).powi(2 * q as i32 + 2) * m * m / (mu * mu)
        + 2.0 * m * m / (mu * mu * df as f64)
}

/// Bound on `‖∂f(x, y^D(x))/∂x − ∇Φ(x)‖` for GD with `α ≤ 1/L` started at
/// distance `dist0` from `y*(x)`.
pub fn itd_error_bound(c: &SmoothnessConstants, alpha: f64, d: usize, dist0: f64) -> f64 {
    let (l, mu, m) = (c.l, c.mu, c.m);
    let r = 1.0 - alpha * mu;
    let d = d as f64;
    (l * (l + mu) * r.powf(d / 2.0) / mu + 2.0 * m * (c.tau * mu + l * c.rho) / (mu * mu) * r.powf((d - 1.0) / 2.0))
        * dist0
        + l * m * r.powf(d) / mu
}

/// Bound on the squared AID error given `‖y*−y⁰‖²` and `‖v*−v⁰‖²`.
pub fn aid_error_sq_bound(c: &SmoothnessConstants, alpha: f64, d: usize, n: usize, dy0_sq: f64, dv0_sq: f64) -> f64 {
    let k = c.kappa();
    gamma(c) * (1.0 - alpha * c.mu).powi(d as i32) * dy0_sq
        + 6.0 * c.l * c.l * k * cg_ratio(k).powi(2 * n as i32) * dv0_sq
}

/// `((L−μ)/(L+μ))^{2D}‖y⁰−y*‖² + σ²/(LμS)`: SGD at `α = 2/(L+μ)`.
pub fn sgd_mse_bound(c: &SmoothnessConstants, d: usize, s: usize, dist0_sq: f64) -> f64 {
    contraction_sq(c, d) * dist0_sq + c.sigma * c.sigma / (c.l * c.mu * s as f64)
}

/// Tracking-error bound for stocBiO iterate `k`, given
/// `‖y₀ − y*(x₀)‖²` and the (expected) squared hypergradient norms at
/// `x_0 … x_{k−1}`.
pub fn tracking_bound(c: &SmoothnessConstants, p: &TheoryParams, dist0_sq: f64, grad_sq: &[f64]) -> f64 {
    let lam = lambda(c, p.beta, p.d);
    let om = omega(c, p.beta, p.d);
    let noise = c.sigma * c.sigma / (c.l * c.mu * p.s as f64);
    let k = grad_sq.len();
    let head = lam.powi(k as i32) * (contraction_sq(c, p.d) * dist0_sq + noise);
    let sum: f64 = grad_sq
        .iter()
        .enumerate()
        .map(|(j, g)| lam.powi((k - 1 - j) as i32) * g)
        .sum();
    let dv = delta_var(c, p.eta, p.q, p.b, p.df, p.dg);
    head + om * sum + (om * dv + noise) / (1.0 - lam)
}

pub fn compute_bounds(c: &SmoothnessConstants, p: &TheoryParams) -> Result<TheoryBounds> {
    c.validate()?;
    let q = p.q.max(1);
    let (s, df, dg, b) = (p.s.max(1), p.df.max(1), p.dg.max(1), p.b.max(1));
    let _ = s;
    Ok(TheoryBounds {
        l_phi: c.l_phi(),
        gamma: gamma(c),
        delta_dn: delta_dn(c, p.alpha, p.d, p.n),
        omega_aid: omega_aid(c, p.beta),
        lambda: lambda(c, p.beta, p.d),
        omega: omega(c, p.beta, p.d),
        delta_var: delta_var(c, p.eta, q, b, df, dg),
        nu: nu(c),
        neumann_bias: neumann_bias_bound(c, p.eta, q),
        neumann_variance: neumann_variance_bound(c, p.eta, q, b, df),
    })
}

/// `y*(x)`: the exact oracle when the problem has one, otherwise gradient
/// descent with `α = 1/L` until `‖∇_y g‖ ≤ tol`.
pub fn lower_solution<P: BilevelProblem + ?Sized>(prob: &P, x: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
    if let Some(o) = prob.exact_oracle() {
        return o.lower_solution(x);
    }
    const MAX_ITER: usize = 2_000_000;
    let alpha = 1.0 / prob.constants().l;
    let mut y = DVector::zeros(prob.lower_dim());
    for _ in 0..MAX_ITER {
        let g = prob.lower_grad_y(x, &y, Samples::Full);
        if g.norm() <= tol {
            return Ok(y);
        }
        y.axpy(-alpha, &g, 1.0);
    }
    Err(BilevelError::NotConverged {
        tol,
        iterations: MAX_ITER,
    })
}

/// Central differences of `x ↦ f(x, y*(x))`.
pub fn finite_diff_hypergrad<P: BilevelProblem + ?Sized>(prob: &P, x: &DVector<f64>, h: f64) -> Result<DVector<f64>> {
    if h.is_nan() || h < 1e-10 || !h.is_finite() {
        return Err(invalid("h", format!("difference step {h} is below 1e-10")));
    }
    let phi = |x: &DVector<f64>| -> Result<f64> {
        let y = lower_solution(prob, x, 1e-12)?;
        Ok(prob.upper_value(x, &y, Samples::Full))
    };
    let mut out = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = phi(&xp)?;
        xp[i] = x[i] - h;
        let down = phi(&xp)?;
        xp[i] = x[i];
        out[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// `∇_y² g(x, y)` assembled column by column from Hessian-vector products.
pub fn dense_hessian<P: BilevelProblem + ?Sized>(prob: &P, x: &DVector<f64>, y: &DVector<f64>) -> Result<DMatrix<f64>> {
    let q = prob.lower_dim();
    if q > DENSE_LIMIT {
        return Err(invalid("lower_dim", format!("dense assembly limited to {DENSE_LIMIT}, got {q}")));
    }
    let mut h = DMatrix::zeros(q, q);
    let mut e = DVector::zeros(q);
    for i in 0..q {
        e[i] = 1.0;
        h.set_column(i, &prob.lower_hvp(x, y, &e, Samples::Full));
        e[i] = 0.0;
    }
    // symmetrize away round-off
    Ok((&h + h.transpose()) * 0.5)
}

/// `η Σ_{j=0}^{Q} (I − η∇_y² g(x, y))^j v0`, the mean of the Neumann estimate.
pub fn exact_neumann_expectation<P: BilevelProblem + ?Sized>(
    prob: &P,
    x: &DVector<f64>,
    y: &DVector<f64>,
    v0: &DVector<f64>,
    q: usize,
    eta: f64,
) -> Result<DVector<f64>> {
    let h = dense_hessian(prob, x, y)?;
    let mut term = v0.clone();
    let mut sum = v0.clone();
    for _ in 0..q {
        term = &term - &h * &term * eta;
        sum += &term;
    }
    Ok(sum * eta)
}

/// `[∇_y² g(x, y)]⁻¹ b` by a dense solve.
pub fn dense_inverse_apply<P: BilevelProblem + ?Sized>(
    prob: &P,
    x: &DVector<f64>,
    y: &DVector<f64>,
    b: &DVector<f64>,
) -> Result<DVector<f64>> {
    spd_solve(&dense_hessian(prob, x, y)?, b)
}

/// `v*(x) = [∇_y² g(x, y*)]⁻¹ ∇_y f(x, y*)`.
pub fn v_star<P: BilevelProblem + ?Sized>(prob: &P, x: &DVector<f64>) -> Result<DVector<f64>> {
    let ys = lower_solution(prob, x, 1e-12)?;
    dense_inverse_apply(prob, x, &ys, &prob.upper_grad_y(x, &ys, Samples::Full))
}
