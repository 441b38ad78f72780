//! Truncated Neumann-series estimate of `[∇_y² g]⁻¹ v0` from independent
//! Hessian minibatches.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::problem::{BilevelProblem, CostCounters, Metered, Samples};
use crate::rng::{sample_batch, Role, Streams};

/// Truncation order, step and per-term batch sizes `|B_1| … |B_Q|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeumannSchedule {
    q: usize,
    eta: f64,
    b: usize,
    sizes: Vec<usize>,
}

/// Sizes `|B_{Q+1−j}| = ⌈B·Q·(1−ημ)^{j−1}⌉` (at least 1) for `j = 1..Q`, so the
/// last batch is the largest.
pub fn build_schedule(q: usize, b: usize, eta: f64, mu: f64) -> Result<NeumannSchedule> {
    if q == 0 {
        return Err(invalid("Q", "truncation order must be at least 1"));
    }
    if b == 0 {
        return Err(invalid("B", "base batch size must be at least 1"));
    }
    if !eta.is_finite() || eta <= 0.0 {
        return Err(invalid("eta", "Neumann step must be positive"));
    }
    let factor = 1.0 - eta * mu;
    if mu.is_nan() || mu <= 0.0 || factor <= 0.0 {
        return Err(invalid("eta", format!("eta*mu = {} must lie in (0, 1)", eta * mu)));
    }
    let mut sizes = vec![0; q];
    for j in 1..=q {
        let target = (b * q) as f64 * factor.powi(j as i32 - 1);
        sizes[q - j] = ceil_exact(target).max(1);
    }
    Ok(NeumannSchedule { q, eta, b, sizes })
}

// Ceiling that ignores round-off just above an integer.
fn ceil_exact(t: f64) -> usize {
    let r = t.round();
    if (t - r).abs() <= 1e-9 * t.abs().max(1.0) {
        r as usize
    } else {
        t.ceil() as usize
    }
}

impl NeumannSchedule {
    pub fn q(&self) -> usize {
        self.q
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn base(&self) -> usize {
        self.b
    }

    /// `|B_1| … |B_Q|`.
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn total(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// The real-valued geometric sum `Σ_j B·Q·(1−ημ)^{j−1}` before rounding.
    pub fn unrounded_total(&self, mu: f64) -> f64 {
        let factor = 1.0 - self.eta * mu;
        (1..=self.q)
            .map(|j| (self.b * self.q) as f64 * factor.powi(j as i32 - 1))
            .sum()
    }
}

/// Neumann estimate `v_Q = η Σ_{i=0}^{Q} r_i` with `r_Q = v0` and
/// `r_{i−1} = r_i − η ∇_y² G(x, y; B_i) r_i`.
///
/// Batch `B_i` is drawn from the `(NeumannBatch, i)` substream. Adds `Σ|B_i|`
/// to `hv_g`.
pub fn neumann_vq<P: BilevelProblem + ?Sized>(
    prob: &P,
    x: &DVector<f64>,
    y: &DVector<f64>,
    v0: &DVector<f64>,
    sched: &NeumannSchedule,
    streams: &Streams,
    counters: &mut CostCounters,
) -> Result<DVector<f64>> {
    let l = prob.constants().l;
    if sched.eta > 1.0 / l {
        log::warn!("Neumann step {} exceeds 1/L = {}", sched.eta, 1.0 / l);
    }
    let population = prob.lower_population();
    let mut m = Metered::new(prob, counters);
    let mut r = v0.clone();
    let mut sum = v0.clone();
    for i in (1..=sched.q).rev() {
        let batch = sample_batch(population, sched.sizes[i - 1], &mut streams.rng(Role::NeumannBatch, i as u64))?;
        let hr = m.lower_hvp(x, y, &r, Samples::Batch(&batch));
        r.axpy(-sched.eta, &hr, 1.0);
        sum += &r;
    }
    Ok(sum * sched.eta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::make_quadratic;
    use proptest::prelude::*;

    #[test]
    fn single_term() {
        for b in [1, 5, 17] {
            assert_eq!(build_schedule(1, b, 0.3, 1.0).unwrap().sizes(), &[b]);
        }
    }

    #[test]
    fn worked_example() {
        let s = build_schedule(3, 8, 0.5, 1.0).unwrap();
        assert_eq!(s.sizes(), &[6, 12, 24]);
        assert_eq!(s.total(), 42);
    }

    #[test]
    fn rejects_non_contracting() {
        assert!(build_schedule(3, 8, 1.0, 1.0).is_err());
        assert!(build_schedule(3, 8, 2.0, 1.0).is_err());
        assert!(build_schedule(0, 8, 0.5, 1.0).is_err());
        assert!(build_schedule(3, 0, 0.5, 1.0).is_err());
    }

    #[test]
    fn identity_hessian_unit_step_returns_v0() {
        let prob = make_quadratic(2, 3, 1.0, 0.0, 0).unwrap();
        let x = DVector::from_vec(vec![0.3, -1.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let v0 = DVector::from_vec(vec![0.5, -0.5, 2.0]);
        // eta*mu must stay below 1 for a schedule, so build the degenerate one by hand
        let sched = NeumannSchedule {
            q: 4,
            eta: 1.0,
            b: 1,
            sizes: vec![1; 4],
        };
        let mut c = CostCounters::default();
        let v = neumann_vq(&prob, &x, &y, &v0, &sched, &Streams::new(0), &mut c).unwrap();
        assert!((v - v0).norm() < 1e-12);
        assert_eq!(c.hv_g, 4);
    }

    proptest! {
        #[test]
        fn schedule_invariants(q in 1usize..40, b in 1usize..64, em in 0.001f64..0.999) {
            let s = build_schedule(q, b, em, 1.0).unwrap();
            prop_assert_eq!(s.sizes().len(), q);
            prop_assert!(s.sizes().windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(s.sizes()[q - 1], b * q);
            for j in 1..=q {
                let target = (b * q) as f64 * (1.0 - em).powi(j as i32 - 1);
                let got = s.sizes()[q - j] as f64;
                prop_assert!(got >= target - 1e-6 && got < target.max(1.0) + 1.0);
            }
            let exact = s.unrounded_total(1.0);
            let total = s.total() as f64;
            prop_assert!(total >= exact - 1e-6 && total <= exact + q as f64);
        }
    }
}
