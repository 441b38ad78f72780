//! Multitask quadratic bilevel problem: `m` independent lower problems that
//! share one upper variable.
//!
//! ```text
//! g(x, y) = (1/m) Σᵢ gᵢ(x, yᵢ)      f(x, y) = (1/m) Σᵢ fᵢ(x, yᵢ)
//! ```
//!
//! The lower variable is the concatenation `y = (y₁, …, y_m)`. Both sample
//! populations are the tasks, so a batch of task indices gives an unbiased
//! task-sampled estimate of every handle.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};
use crate::problem::{BilevelProblem, Constant, ExactOracle, Samples, SmoothnessConstants};
use crate::problems::quadratic::{QuadraticBilevel, QuadraticSnapshot, QuadraticSpec};
use crate::rng::Batch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultitaskSpec {
    pub m: usize,
    pub p: usize,
    pub q: usize,
    pub kappa: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct MultitaskQuadratic {
    tasks: Vec<QuadraticBilevel>,
    p: usize,
    q: usize,
    constants: SmoothnessConstants,
}

pub fn make_multitask(m: usize, p: usize, q: usize, kappa: f64, seed: u64) -> Result<MultitaskQuadratic> {
    MultitaskQuadratic::generate(&MultitaskSpec { m, p, q, kappa, seed })
}

impl MultitaskQuadratic {
    pub fn generate(spec: &MultitaskSpec) -> Result<Self> {
        if spec.m == 0 {
            return Err(invalid("m", "need at least one task"));
        }
        let tasks = (0..spec.m as u64)
            .map(|i| {
                let task_seed = spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i);
                QuadraticBilevel::generate(&QuadraticSpec::new(spec.p, spec.q, spec.kappa, 0.0, task_seed))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_tasks(tasks)
    }

    /// All tasks must share `p` and `q`.
    pub fn from_tasks(tasks: Vec<QuadraticBilevel>) -> Result<Self> {
        let first = tasks.first().ok_or_else(|| invalid("tasks", "need at least one task"))?;
        let (p, q) = (first.upper_dim(), first.lower_dim());
        for t in &tasks {
            check_dim("task upper dimension", p, t.upper_dim())?;
            check_dim("task lower dimension", q, t.lower_dim())?;
        }
        let m = tasks.len() as f64;
        let pick = |f: fn(&SmoothnessConstants) -> f64| {
            tasks.iter().map(|t| f(t.constants())).fold(f64::NEG_INFINITY, f64::max)
        };
        let mu = tasks.iter().map(|t| t.constants().mu).fold(f64::INFINITY, f64::min);
        let constants = SmoothnessConstants::new(
            pick(|c| c.m) / m.sqrt(),
            pick(|c| c.l) / m,
            mu / m,
            0.0,
            0.0,
            pick(|c| c.l) * 2.0,
        )?
        .with_estimated(&[Constant::M, Constant::Sigma]);
        Ok(Self { tasks, p, q, constants })
    }

    pub fn tasks(&self) -> &[QuadraticBilevel] {
        &self.tasks
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    fn block<'v>(&self, y: &'v DVector<f64>, i: usize) -> nalgebra::DVectorView<'v, f64> {
        y.rows(i * self.q, self.q)
    }

    fn owned_block(&self, y: &DVector<f64>, i: usize) -> DVector<f64> {
        self.block(y, i).into_owned()
    }

    /// Exact hypergradient of task `i`'s own objective `fᵢ(x, yᵢ*(x))`.
    pub fn task_hypergradient(&self, i: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.tasks
            .get(i)
            .ok_or_else(|| invalid("task", format!("index {i} out of range")))?
            .oracle_hypergradient(x)
    }

    /// Mean of the exact task hypergradients over a batch of task indices.
    pub fn batch_hypergradient(&self, x: &DVector<f64>, batch: &Batch) -> Result<DVector<f64>> {
        let mut acc = DVector::zeros(self.p);
        for &i in batch.indices() {
            acc += self.task_hypergradient(i, x)?;
        }
        Ok(acc / batch.len() as f64)
    }

    pub(crate) fn to_snapshot(&self) -> MultitaskSnapshot {
        MultitaskSnapshot {
            tasks: self.tasks.iter().map(|t| t.to_snapshot()).collect(),
        }
    }

    pub(crate) fn from_snapshot(s: &MultitaskSnapshot) -> Result<Self> {
        let tasks = s
            .tasks
            .iter()
            .map(QuadraticBilevel::from_snapshot)
            .collect::<Result<Vec<_>>>()?;
        Self::from_tasks(tasks)
    }
}

/// JSON form of a [`MultitaskQuadratic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultitaskSnapshot {
    pub tasks: Vec<QuadraticSnapshot>,
}

impl BilevelProblem for MultitaskQuadratic {
    fn upper_dim(&self) -> usize {
        self.p
    }

    fn lower_dim(&self) -> usize {
        self.q * self.tasks.len()
    }

    fn constants(&self) -> &SmoothnessConstants {
        &self.constants
    }

    fn upper_population(&self) -> usize {
        self.tasks.len()
    }

    fn lower_population(&self) -> usize {
        self.tasks.len()
    }

    fn upper_value(&self, x: &DVector<f64>, y: &DVector<f64>, s: Samples) -> f64 {
        s.weighted(self.tasks.len())
            .into_iter()
            .map(|(i, w)| w * self.tasks[i].upper_value(x, &self.owned_block(y, i), Samples::Full))
            .sum()
    }

    fn lower_value(&self, x: &DVector<f64>, y: &DVector<f64>, s: Samples) -> f64 {
        s.weighted(self.tasks.len())
            .into_iter()
            .map(|(i, w)| w * self.tasks[i].lower_value(x, &self.owned_block(y, i), Samples::Full))
            .sum()
    }

    fn upper_grad_x(&self, x: &DVector<f64>, y: &DVector<f64>, s: Samples) -> DVector<f64> {
        let mut acc = DVector::zeros(self.p);
        for (i, w) in s.weighted(self.tasks.len()) {
            acc += self.tasks[i].upper_grad_x(x, &self.owned_block(y, i), Samples::Full) * w;
        }
        acc
    }

    fn upper_grad_y(&self, x: &DVector<f64>, y: &DVector<f64>, s: Samples) -> DVector<f64> {
        let mut out = DVector::zeros(self.lower_dim());
        for (i, w) in s.weighted(self.tasks.len()) {
            let g = self.tasks[i].upper_grad_y(x, &self.owned_block(y, i), Samples::Full);
            out.rows_mut(i * self.q, self.q).axpy(w, &g, 1.0);
        }
        out
    }

    fn lower_grad_y(&self, x: &DVector<f64>, y: &DVector<f64>, s: Samples) -> DVector<f64> {
        let mut out = DVector::zeros(self.lower_dim());
        for (i, w) in s.weighted(self.tasks.len()) {
            let g = self.tasks[i].lower_grad_y(x, &self.owned_block(y, i), Samples::Full);
            out.rows_mut(i * self.q, self.q).axpy(w, &g, 1.0);
        }
        out
    }

    fn lower_jvp(&self, x: &DVector<f64>, y: &DVector<f64>, v: &DVector<f64>, s: Samples) -> DVector<f64> {
        let mut acc = DVector::zeros(self.p);
        for (i, w) in s.weighted(self.tasks.len()) {
            let t = &self.tasks[i];
            acc += t.lower_jvp(x, &self.owned_block(y, i), &self.owned_block(v, i), Samples::Full) * w;
        }
        acc
    }

    fn lower_hvp(&self, x: &DVector<f64>, y: &DVector<f64>, v: &DVector<f64>, s: Samples) -> DVector<f64> {
        let mut out = DVector::zeros(self.lower_dim());
        for (i, w) in s.weighted(self.tasks.len()) {
            let t = &self.tasks[i];
            let h = t.lower_hvp(x, &self.owned_block(y, i), &self.owned_block(v, i), Samples::Full);
            out.rows_mut(i * self.q, self.q).axpy(w, &h, 1.0);
        }
        out
    }

    fn exact_oracle(&self) -> Option<&dyn ExactOracle> {
        Some(self)
    }
}

impl ExactOracle for MultitaskQuadratic {
    fn lower_solution(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut y = DVector::zeros(self.lower_dim());
        for (i, t) in self.tasks.iter().enumerate() {
            y.rows_mut(i * self.q, self.q).copy_from(&t.oracle_lower_solution(x)?);
        }
        Ok(y)
    }

    fn hypergradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut acc = DVector::zeros(self.p);
        for t in &self.tasks {
            acc += t.oracle_hypergradient(x)?;
        }
        Ok(acc / self.tasks.len() as f64)
    }
}
