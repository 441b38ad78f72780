//! The bilevel problem interface, smoothness constants and cost counters.

use std::ops::{Add, AddAssign, Mul, Sub};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::Batch;

/// Names of the entries in [`SmoothnessConstants`], used to flag estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Constant {
    M,
    L,
    Mu,
    Tau,
    Rho,
    Sigma,
}

/// Lipschitz, curvature and noise constants of a bilevel problem.
///
/// `m` bounds `‖∇f‖`, `l` is the common gradient Lipschitz constant, `mu` the
/// strong-convexity modulus of the lower level, `tau` and `rho` the Lipschitz
/// constants of the lower Jacobian and Hessian, and `sigma` bounds the standard
/// deviation of the stochastic gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessConstants {
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub mu: f64,
    pub tau: f64,
    pub rho: f64,
    pub sigma: f64,
    /// Constants that are upper estimates rather than exact values.
    #[serde(default)]
    pub estimated: Vec<Constant>,
}

impl SmoothnessConstants {
    pub fn new(m: f64, l: f64, mu: f64, tau: f64, rho: f64, sigma: f64) -> Result<Self> {
        let c = Self {
            m,
            l,
            mu,
            tau,
            rho,
            sigma,
            estimated: Vec::new(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn with_estimated(mut self, names: &[Constant]) -> Self {
        for n in names {
            if !self.estimated.contains(n) {
                self.estimated.push(*n);
            }
        }
        self
    }

    pub fn is_estimated(&self, name: Constant) -> bool {
        self.estimated.contains(&name)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("M", self.m),
            ("L", self.l),
            ("mu", self.mu),
            ("tau", self.tau),
            ("rho", self.rho),
            ("sigma", self.sigma),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid("constants", format!("{name} = {v} must be finite and non-negative")));
            }
        }
        if self.mu <= 0.0 {
            return Err(invalid("mu", "strong-convexity modulus must be positive"));
        }
        if self.l < self.mu {
            return Err(invalid("L", format!("L = {} is below mu = {}", self.l, self.mu)));
        }
        Ok(())
    }

    /// Condition number `L / mu`.
    pub fn kappa(&self) -> f64 {
        self.l / self.mu
    }

    /// Lipschitz constant of the hypergradient:
    /// `L + (2L² + τM²)/μ + (ρLM + L³ + τML)/μ² + ρL²M/μ³`.
    pub fn l_phi(&self) -> f64 {
        let (m, l, mu, tau, rho) = (self.m, self.l, self.mu, self.tau, self.rho);
        l + (2.0 * l * l + tau * m * m) / mu
            + (rho * l * m + l.powi(3) + tau * m * l) / (mu * mu)
            + rho * l * l * m / mu.powi(3)
    }
}

/// Oracle call counts: gradients of f and g, Jacobian- and Hessian-vector
/// products of g. Stochastic calls count one per sample in the batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostCounters {
    pub gc_f: u64,
    pub gc_g: u64,
    pub jv_g: u64,
    pub hv_g: u64,
}

impl CostCounters {
    pub fn new(gc_f: u64, gc_g: u64, jv_g: u64, hv_g: u64) -> Self {
        Self { gc_f, gc_g, jv_g, hv_g }
    }

    /// Componentwise `self >= earlier`.
    pub fn dominates(&self, earlier: &CostCounters) -> bool {
        self.gc_f >= earlier.gc_f
            && self.gc_g >= earlier.gc_g
            && self.jv_g >= earlier.jv_g
            && self.hv_g >= earlier.hv_g
    }
}

impl Add for CostCounters {
    type Output = CostCounters;

    fn add(self, o: CostCounters) -> CostCounters {
        CostCounters::new(self.gc_f + o.gc_f, self.gc_g + o.gc_g, self.jv_g + o.jv_g, self.hv_g + o.hv_g)
    }
}

impl AddAssign for CostCounters {
    fn add_assign(&mut self, o: CostCounters) {
        *self = *self + o;
    }
}

impl Sub for CostCounters {
    type Output = CostCounters;

    fn sub(self, o: CostCounters) -> CostCounters {
        CostCounters::new(self.gc_f - o.gc_f, self.gc_g - o.gc_g, self.jv_g - o.jv_g, self.hv_g - o.hv_g)
    }
}

impl Mul<u64> for CostCounters {
    type Output = CostCounters;

    fn mul(self, k: u64) -> CostCounters {
        CostCounters::new(self.gc_f * k, self.gc_g * k, self.jv_g * k, self.hv_g * k)
    }
}

/// Which samples an evaluation averages over.
#[derive(Debug, Clone, Copy)]
pub enum Samples<'a> {
    /// The deterministic objective (population mean for finite sums).
    Full,
    Batch(&'a Batch),
}

impl Samples<'_> {
    /// Counter increment for one call.
    pub fn cost(&self) -> u64 {
        match self {
            Samples::Full => 1,
            Samples::Batch(b) => b.len() as u64,
        }
    }

    /// `(index, weight)` pairs whose weighted sum is the sample mean.
    pub fn weighted(&self, population: usize) -> Vec<(usize, f64)> {
        match self {
            Samples::Full => {
                let w = 1.0 / population as f64;
                (0..population).map(|i| (i, w)).collect()
            }
            Samples::Batch(b) => {
                let w = 1.0 / b.len() as f64;
                b.indices().iter().map(|&i| (i, w)).collect()
            }
        }
    }
}

/// A bilevel problem `min_x f(x, y*(x))` with `y*(x) = argmin_y g(x, y)`,
/// exposed through first-order and Jacobian/Hessian-vector product handles.
///
/// Upper samples index the population of `f`, lower samples that of `g`.
/// Implementations must keep `Samples::Full` equal to the mean over the whole
/// population. Calls here are not metered; go through [`Metered`] inside
/// algorithms.
pub trait BilevelProblem: Send + Sync {
    fn upper_dim(&self) -> usize;
    fn lower_dim(&self) -> usize;
    fn constants(&self) -> &SmoothnessConstants;
    fn upper_population(&self) -> usize;
    fn lower_population(&self) -> usize;

    fn upper_value(&self, x: &DVector<f64>, y: &DVector<f64>, s: Samples) -> f64;
    fn lower_value(&self, x: &DVector<f64>, y: &DVector<f64>, s: Samples) -> f64;
    /// `∇_x f(x, y)`.
    fn upper_grad_x(&self, x: &DVector<f64>, y: &DVector<f64>, s: Samples) -> DVector<f64>;
    /// `∇_y f(x, y)`.
    fn upper_grad_y(&self, x: &DVector<f64>, y: &DVector<f64>, s: Samples) -> DVector<f64>;
    /// `∇_y g(x, y)`.
    fn lower_grad_y(&self, x: &DVector<f64>, y: &DVector<f64>, s: Samples) -> DVector<f64>;
    /// `∇_x∇_y g(x, y) · v`, mapping the lower space to the upper space.
    fn lower_jvp(&self, x: &DVector<f64>, y: &DVector<f64>, v: &DVector<f64>, s: Samples) -> DVector<f64>;
    /// `∇_y² g(x, y) · v`.
    fn lower_hvp(&self, x: &DVector<f64>, y: &DVector<f64>, v: &DVector<f64>, s: Samples) -> DVector<f64>;

    /// Closed-form ground truth, when the family has one.
    fn exact_oracle(&self) -> Option<&dyn ExactOracle> {
        None
    }
}

/// Ground-truth lower solution and hypergradient.
pub trait ExactOracle: Send + Sync {
    fn lower_solution(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
    fn hypergradient(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
}

/// A problem paired with the counters its calls are charged to.
pub struct Metered<'a, P: ?Sized> {
    problem: &'a P,
    counters: &'a mut CostCounters,
}

impl<'a, P: BilevelProblem + ?Sized> Metered<'a, P> {
    pub fn new(problem: &'a P, counters: &'a mut CostCounters) -> Self {
        Self { problem, counters }
    }

    pub fn problem(&self) -> &'a P {
        self.problem
    }

    pub fn upper_grad_x(&mut self, x: &DVector<f64>, y: &DVector<f64>, s: Samples) -> DVector<f64> {
        self.counters.gc_f += s.cost();
        self.problem.upper_grad_x(x, y, s)
    }

    pub fn upper_grad_y(&mut self, x: &DVector<f64>, y: &DVector<f64>, s: Samples) -> DVector<f64> {
        self.counters.gc_f += s.cost();
        self.problem.upper_grad_y(x, y, s)
    }

    pub fn lower_grad_y(&mut self, x: &DVector<f64>, y: &DVector<f64>, s: Samples) -> DVector<f64> {
        self.counters.gc_g += s.cost();
        self.problem.lower_grad_y(x, y, s)
    }

    pub fn lower_jvp(&mut self, x: &DVector<f64>, y: &DVector<f64>, v: &DVector<f64>, s: Samples) -> DVector<f64> {
        self.counters.jv_g += s.cost();
        self.problem.lower_jvp(x, y, v, s)
    }

    pub fn lower_hvp(&mut self, x: &DVector<f64>, y: &DVector<f64>, v: &DVector<f64>, s: Samples) -> DVector<f64> {
        self.counters.hv_g += s.cost();
        self.problem.lower_hvp(x, y, v, s)
    }
}
