//! Inner-loop solvers for the lower problem.

use nalgebra::DVector;

use crate::error::{invalid, BilevelError, Result};
use crate::problem::{BilevelProblem, CostCounters, Metered, Samples};
use crate::rng::{sample_batch, Role, Streams};

/// Iterates `y⁰ … y^D` of gradient descent on `g(x, ·)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerTrajectory {
    x: DVector<f64>,
    points: Vec<DVector<f64>>,
    alpha: f64,
}

impl InnerTrajectory {
    pub fn x(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn initial(&self) -> &DVector<f64> {
        &self.points[0]
    }

    /// `y^D`.
    pub fn last(&self) -> &DVector<f64> {
        self.points.last().expect("trajectory always holds y0")
    }

    pub fn into_last(mut self) -> DVector<f64> {
        self.points.pop().expect("trajectory always holds y0")
    }
}

fn check_alpha(alpha: f64, l: f64) -> Result<()> {
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(invalid("alpha", format!("inner stepsize {alpha} must be positive")));
    }
    if alpha > 1.0 / l {
        log::debug!("inner stepsize {alpha} exceeds 1/L = {}", 1.0 / l);
    }
    Ok(())
}

fn guard(y: &DVector<f64>, limit: f64, step: usize) -> Result<()> {
    let norm = y.norm();
    if !norm.is_finite() || norm > limit {
        return Err(BilevelError::Divergence { step, norm });
    }
    Ok(())
}

/// `D` steps of `y ← y − α∇_y g(x, y)`, keeping every iterate.
///
/// Adds `D` to `gc_g`. Fails with [`BilevelError::Divergence`] if an iterate
/// is non-finite or its norm exceeds `1e8·(1 + ‖y⁰‖)`.
pub fn gd_inner<P: BilevelProblem + ?Sized>(
    prob: &P,
    x: &DVector<f64>,
    y0: &DVector<f64>,
    alpha: f64,
    d: usize,
    counters: &mut CostCounters,
) -> Result<InnerTrajectory> {
    check_alpha(alpha, prob.constants().l)?;
    let limit = 1e8 * (1.0 + y0.norm());
    let mut m = Metered::new(prob, counters);
    let mut points = Vec::with_capacity(d + 1);
    points.push(y0.clone());
    for t in 1..=d {
        let prev = &points[t - 1];
        let next = prev - m.lower_grad_y(x, prev, Samples::Full) * alpha;
        guard(&next, limit, t)?;
        points.push(next);
    }
    Ok(InnerTrajectory {
        x: x.clone(),
        points,
        alpha,
    })
}

/// `D` steps of minibatch SGD on `g(x, ·)`, batch `S_t` of size `s` drawn from
/// the `(InnerSgd, t)` substream. Returns `y^D`; adds `D·s` to `gc_g`.
#[allow(clippy::too_many_arguments)]
pub fn sgd_inner<P: BilevelProblem + ?Sized>(
    prob: &P,
    x: &DVector<f64>,
    y0: &DVector<f64>,
    alpha: f64,
    d: usize,
    s: usize,
    streams: &Streams,
    counters: &mut CostCounters,
) -> Result<DVector<f64>> {
    check_alpha(alpha, prob.constants().l)?;
    if s == 0 {
        return Err(invalid("S", "inner batch size must be at least 1"));
    }
    let limit = 1e8 * (1.0 + y0.norm());
    let population = prob.lower_population();
    let mut m = Metered::new(prob, counters);
    let mut y = y0.clone();
    for t in 0..d {
        let batch = sample_batch(population, s, &mut streams.rng(Role::InnerSgd, t as u64))?;
        y -= m.lower_grad_y(x, &y, Samples::Batch(&batch)) * alpha;
        guard(&y, limit, t + 1)?;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian_vector;
    use crate::problem::ExactOracle;
    use crate::problems::{make_quadratic, QuadraticBilevel, QuadraticNoise};
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn point(n: usize, seed: u64) -> DVector<f64> {
        gaussian_vector(n, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn fixed_point_stays_put() {
        let prob = make_quadratic(3, 4, 10.0, 0.0, 1).unwrap();
        let x = point(3, 2);
        let ys = prob.lower_solution(&x).unwrap();
        let traj = gd_inner(&prob, &x, &ys, 0.1, 20, &mut CostCounters::default()).unwrap();
        for y in traj.points() {
            assert!((y - &ys).norm() <= 1e-12 * ys.norm().max(1.0));
        }
    }

    #[test]
    fn matches_matrix_power() {
        let prob = make_quadratic(3, 5, 20.0, 0.0, 3).unwrap();
        let x = point(3, 4);
        let y0 = point(5, 5);
        let ys = prob.lower_solution(&x).unwrap();
        let alpha = 1.0 / 20.0;
        let d = 37;
        let traj = gd_inner(&prob, &x, &y0, alpha, d, &mut CostCounters::default()).unwrap();
        let step = DMatrix::identity(5, 5) - prob.a() * alpha;
        let expect = &ys + step.pow(d as u32) * (&y0 - &ys);
        assert!((traj.last() - expect).norm() < 1e-10);
    }

    #[test]
    fn consecutive_points_are_gd_steps_and_counted() {
        let prob = make_quadratic(2, 3, 5.0, 0.0, 6).unwrap();
        let x = point(2, 1);
        let mut c = CostCounters::default();
        let traj = gd_inner(&prob, &x, &DVector::zeros(3), 0.2, 9, &mut c).unwrap();
        assert_eq!(c, CostCounters::new(0, 9, 0, 0));
        assert_eq!(traj.steps(), 9);
        for t in 1..=9 {
            let p = &traj.points()[t - 1];
            let expect = p - prob.lower_grad_y(&x, p, Samples::Full) * 0.2;
            assert!((&traj.points()[t] - &expect).norm() <= 1e-12 * expect.norm().max(1.0));
        }
    }

    #[test]
    fn lower_objective_monotone() {
        for seed in 0..10 {
            let prob = make_quadratic(3, 6, 50.0, 0.0, seed).unwrap();
            let x = point(3, seed + 100);
            let traj = gd_inner(&prob, &x, &point(6, seed + 200), 1.0 / 50.0, 30, &mut CostCounters::default()).unwrap();
            let vals: Vec<f64> = traj.points().iter().map(|y| prob.lower_value(&x, y, Samples::Full)).collect();
            assert!(vals.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0)));
        }
    }

    #[test]
    fn strong_convexity_contraction() {
        for seed in 0..30 {
            let kappa = [1.0, 3.0, 10.0, 100.0][seed as usize % 4];
            let prob = make_quadratic(2, 5, kappa, 0.0, seed).unwrap();
            let x = point(2, seed);
            let y0 = point(5, seed + 7);
            let ys = prob.lower_solution(&x).unwrap();
            let alpha = 1.0 / kappa;
            for d in [0usize, 1, 5, 20] {
                let traj = gd_inner(&prob, &x, &y0, alpha, d, &mut CostCounters::default()).unwrap();
                let bound = (1.0 - alpha).powf(d as f64 / 2.0) * (&y0 - &ys).norm();
                assert!((traj.last() - &ys).norm() <= bound * (1.0 + 1e-12) + 1e-14);
            }
        }
    }

    #[test]
    fn divergence_names_step() {
        let prob = make_quadratic(2, 3, 10.0, 0.0, 0).unwrap();
        let err = gd_inner(&prob, &point(2, 0), &point(3, 1), 1.0, 200, &mut CostCounters::default()).unwrap_err();
        assert!(matches!(err, BilevelError::Divergence { step, .. } if step > 1 && step < 200));
        assert!(gd_inner(&prob, &point(2, 0), &point(3, 1), 0.0, 2, &mut CostCounters::default()).is_err());
    }

    #[test]
    fn sgd_noise_free_equals_gd() {
        let prob = make_quadratic(3, 4, 8.0, 0.0, 2).unwrap();
        let x = point(3, 3);
        let y0 = point(4, 4);
        let streams = Streams::new(5).at_iteration(2);
        let mut c = CostCounters::default();
        let y = sgd_inner(&prob, &x, &y0, 0.1, 12, prob.lower_population(), &streams, &mut c).unwrap();
        let traj = gd_inner(&prob, &x, &y0, 0.1, 12, &mut CostCounters::default()).unwrap();
        assert!((y - traj.last()).norm() <= 1e-12);
        assert_eq!(c.gc_g, 12 * prob.lower_population() as u64);
    }

    #[test]
    fn sgd_reproducible() {
        let prob = make_quadratic(3, 4, 8.0, 1.0, 2).unwrap();
        let x = point(3, 3);
        let y0 = point(4, 4);
        let streams = Streams::new(11);
        let run = || sgd_inner(&prob, &x, &y0, 0.1, 15, 4, &streams, &mut CostCounters::default()).unwrap();
        assert_eq!(run(), run());
        let other = sgd_inner(&prob, &x, &y0, 0.1, 15, 4, &Streams::new(12), &mut CostCounters::default()).unwrap();
        assert_ne!(run(), other);
    }

    fn noisy(seed: u64) -> QuadraticBilevel {
        let mut p = make_quadratic(2, 3, 4.0, 0.0, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shifts: Vec<DVector<f64>> = (0..50).map(|_| gaussian_vector(3, &mut rng)).collect();
        let mean = shifts.iter().fold(DVector::zeros(3), |a, b| a + b) / 50.0;
        p.set_noise(QuadraticNoise {
            lower_shift: Some(shifts.into_iter().map(|s| s - &mean).collect()),
            ..Default::default()
        })
        .unwrap();
        p
    }

    #[test]
    fn sgd_mean_square_error_bound() {
        // E‖y^D − y*‖² ≤ ((L−μ)/(L+μ))^{2D}‖y0 − y*‖² + σ²/(LμS) at α = 2/(L+μ).
        let prob = noisy(3);
        let c = prob.constants().clone();
        let x = point(2, 1);
        let y0 = point(3, 2) * 3.0;
        let ys = prob.lower_solution(&x).unwrap();
        let alpha = 2.0 / (c.l + c.mu);
        let (d, s) = (6usize, 2usize);
        let runs = 1000;
        let errs: Vec<f64> = (0..runs)
            .map(|r| {
                let streams = Streams::new(r);
                let y = sgd_inner(&prob, &x, &y0, alpha, d, s, &streams, &mut CostCounters::default()).unwrap();
                (y - &ys).norm_squared()
            })
            .collect();
        let mean = errs.iter().sum::<f64>() / runs as f64;
        let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
        let se = (var / runs as f64).sqrt();
        let rate = ((c.l - c.mu) / (c.l + c.mu)).powi(2 * d as i32);
        let bound = rate * (&y0 - &ys).norm_squared() + c.sigma * c.sigma / (c.l * c.mu * s as f64);
        assert!(mean <= bound + 3.0 * se, "{mean} vs {bound}");
    }
}
