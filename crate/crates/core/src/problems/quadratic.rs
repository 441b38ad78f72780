//! Quadratic lower level with a nonconvex upper term and closed-form oracles.
//!
//! ```text
//! g(x, y) = ½ yᵀA y − yᵀ(B x + c)
//! f(x, y) = φ(x) + (w/2)‖y − d‖²
//! ```
//!
//! Stochastic samples shift `c` (and optionally `d`, and `A` by a bounded
//! symmetric perturbation). Shifts are centered over the finite population so
//! the deterministic objective is exactly the population mean.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, BilevelError, Result};
use crate::linalg::{gaussian_matrix, gaussian_vector, random_orthogonal, spd_solve, symmetric_extremes, RowMajor};
use crate::problem::{BilevelProblem, Constant, ExactOracle, Samples, SmoothnessConstants};

/// The x-only part φ of the upper objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UpperTerm {
    /// `Σ cos(xᵢ) + ridge·‖x‖²`: nonconvex but bounded below.
    CosineRidge { ridge: f64 },
    /// `⟨coef, x⟩`.
    Linear { coef: Vec<f64> },
    Zero,
}

impl Default for UpperTerm {
    fn default() -> Self {
        UpperTerm::CosineRidge { ridge: 0.05 }
    }
}

impl UpperTerm {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match self {
            UpperTerm::CosineRidge { ridge } => x.iter().map(|v| v.cos()).sum::<f64>() + ridge * x.norm_squared(),
            UpperTerm::Linear { coef } => coef.iter().zip(x.iter()).map(|(a, b)| a * b).sum(),
            UpperTerm::Zero => 0.0,
        }
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            UpperTerm::CosineRidge { ridge } => x.map(|v| -v.sin() + 2.0 * ridge * v),
            UpperTerm::Linear { coef } => DVector::from_column_slice(coef),
            UpperTerm::Zero => DVector::zeros(x.len()),
        }
    }

    fn check(&self, p: usize) -> Result<()> {
        match self {
            UpperTerm::CosineRidge { ridge } if !ridge.is_finite() || *ridge < 0.0 => {
                Err(invalid("ridge", "must be finite and non-negative"))
            }
            UpperTerm::Linear { coef } => check_dim("linear upper term", p, coef.len()),
            _ => Ok(()),
        }
    }
}

/// Per-sample perturbations, each centered over the population.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuadraticNoise {
    /// Shifts `ζᵢ` of `c` in the lower objective.
    pub lower_shift: Option<Vec<DVector<f64>>>,
    /// Shifts `ξᵢ` of `d` in the upper objective.
    pub upper_shift: Option<Vec<DVector<f64>>>,
    /// Symmetric perturbations `Eᵢ` of `A`, each with `‖Eᵢ‖₂ ≤ μ/2`.
    pub hessian: Option<Vec<DMatrix<f64>>>,
}

/// Construction parameters for [`QuadraticBilevel::generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticSpec {
    pub p: usize,
    pub q: usize,
    #[serde(default = "one")]
    pub kappa: f64,
    /// Standard deviation of each coordinate of the lower-level shift.
    #[serde(default)]
    pub noise_sigma: f64,
    /// Standard deviation of each coordinate of the upper-level shift.
    #[serde(default)]
    pub upper_noise: f64,
    /// Spectral-norm radius of the per-sample Hessian perturbation (clamped to μ/2).
    #[serde(default)]
    pub hessian_noise: f64,
    #[serde(default = "default_population")]
    pub population: usize,
    #[serde(default)]
    pub upper: UpperTerm,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

fn default_population() -> usize {
    1000
}

impl QuadraticSpec {
    pub fn new(p: usize, q: usize, kappa: f64, noise_sigma: f64, seed: u64) -> Self {
        Self {
            p,
            q,
            kappa,
            noise_sigma,
            upper_noise: 0.0,
            hessian_noise: 0.0,
            population: default_population(),
            upper: UpperTerm::default(),
            seed,
        }
    }
}

/// Shorthand for [`QuadraticSpec::new`] followed by generation.
pub fn make_quadratic(p: usize, q: usize, kappa: f64, noise_sigma: f64, seed: u64) -> Result<QuadraticBilevel> {
    QuadraticBilevel::generate(&QuadraticSpec::new(p, q, kappa, noise_sigma, seed))
}

#[derive(Debug, Clone)]
pub struct QuadraticBilevel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DVector<f64>,
    d: DVector<f64>,
    upper: UpperTerm,
    y_weight: f64,
    noise: QuadraticNoise,
    population: usize,
    constants: SmoothnessConstants,
    // mean of ½‖ξᵢ‖² over the population, part of the deterministic upper value
    upper_noise_energy: f64,
}

impl QuadraticBilevel {
    /// Random instance with spectrum of `A` geometrically spaced in `[1, κ]`.
    pub fn generate(spec: &QuadraticSpec) -> Result<Self> {
        let QuadraticSpec { p, q, kappa, .. } = *spec;
        if p == 0 || q == 0 {
            return Err(invalid("dims", "p and q must be at least 1"));
        }
        if !kappa.is_finite() || kappa < 1.0 {
            return Err(invalid("kappa", format!("{kappa} must be finite and >= 1")));
        }
        if q == 1 && kappa != 1.0 {
            return Err(invalid("kappa", "a one-dimensional lower level has kappa = 1"));
        }
        for (name, v) in [
            ("noise_sigma", spec.noise_sigma),
            ("upper_noise", spec.upper_noise),
            ("hessian_noise", spec.hessian_noise),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid(name, format!("{v} must be finite and non-negative")));
            }
        }
        if spec.population == 0 {
            return Err(invalid("population", "must be at least 1"));
        }
        spec.upper.check(p)?;

        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let basis = random_orthogonal(q, &mut rng);
        let spectrum = DVector::from_fn(q, |i, _| {
            if q == 1 {
                1.0
            } else {
                kappa.powf(i as f64 / (q - 1) as f64)
            }
        });
        let mut a = &basis * DMatrix::from_diagonal(&spectrum) * basis.transpose();
        a = (&a + a.transpose()) * 0.5;
        let b = gaussian_matrix(q, p, &mut rng) / (p as f64).sqrt();
        let c = gaussian_vector(q, &mut rng);
        let d = gaussian_vector(q, &mut rng);

        let n = spec.population;
        let lower_shift = (spec.noise_sigma > 0.0).then(|| centered_shifts(n, q, spec.noise_sigma, &mut rng));
        let upper_shift = (spec.upper_noise > 0.0).then(|| centered_shifts(n, q, spec.upper_noise, &mut rng));
        let hessian = (spec.hessian_noise > 0.0).then(|| {
            let raw: Vec<DMatrix<f64>> = (0..n)
                .map(|_| {
                    let g = gaussian_matrix(q, q, &mut rng);
                    (&g + g.transpose()) * 0.5
                })
                .collect();
            let mean = raw.iter().fold(DMatrix::zeros(q, q), |acc, m| acc + m) / n as f64;
            let centered: Vec<DMatrix<f64>> = raw.into_iter().map(|m| m - &mean).collect();
            let largest = centered
                .iter()
                .map(crate::linalg::spectral_norm_symmetric)
                .fold(0.0, f64::max);
            let radius = spec.hessian_noise.min(0.5);
            let scale = if largest > 0.0 { radius / largest } else { 0.0 };
            centered.into_iter().map(|m| m * scale).collect()
        });

        let mut prob = Self::assemble(a, b, c, d, spec.upper.clone(), 1.0, n)?;
        // exact by construction of the spectrum
        prob.constants.mu = 1.0;
        prob.constants.l = kappa;
        prob.set_noise(QuadraticNoise {
            lower_shift,
            upper_shift,
            hessian,
        })?;
        Ok(prob)
    }

    /// Instance from explicit data, noise-free, population of one.
    pub fn from_parts(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DVector<f64>,
        d: DVector<f64>,
        upper: UpperTerm,
        y_weight: f64,
    ) -> Result<Self> {
        Self::assemble(a, b, c, d, upper, y_weight, 1)
    }

    fn assemble(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DVector<f64>,
        d: DVector<f64>,
        upper: UpperTerm,
        y_weight: f64,
        population: usize,
    ) -> Result<Self> {
        let q = a.nrows();
        check_dim("A columns", q, a.ncols())?;
        check_dim("B rows", q, b.nrows())?;
        check_dim("c", q, c.len())?;
        check_dim("d", q, d.len())?;
        upper.check(b.ncols())?;
        if !y_weight.is_finite() || y_weight < 0.0 {
            return Err(invalid("y_weight", "must be finite and non-negative"));
        }
        if (&a - a.transpose()).amax() > 1e-12 * a.amax().max(1.0) {
            return Err(invalid("A", "must be symmetric"));
        }
        let (mu, l) = symmetric_extremes(&a);
        if mu.is_nan() || mu <= 0.0 {
            return Err(invalid("A", format!("must be positive definite (lambda_min = {mu:e})")));
        }
        let y0 = spd_solve(&a, &c)?;
        let m_est = (y_weight * (&y0 - &d).norm()).max(y_weight);
        let constants = SmoothnessConstants::new(m_est, l, mu, 0.0, 0.0, 0.0)?.with_estimated(&[Constant::M]);
        Ok(Self {
            a,
            b,
            c,
            d,
            upper,
            y_weight,
            noise: QuadraticNoise::default(),
            population,
            constants,
            upper_noise_energy: 0.0,
        })
    }

    /// Replace the per-sample perturbations; the population size becomes the
    /// length of the noise vectors (or stays as is when all are absent).
    pub fn set_noise(&mut self, noise: QuadraticNoise) -> Result<()> {
        let q = self.lower_dim();
        let mut n = None;
        let mut claim = |len: usize| -> Result<()> {
            match n {
                None => {
                    n = Some(len);
                    Ok(())
                }
                Some(k) => check_dim("noise population", k, len),
            }
        };
        if let Some(z) = &noise.lower_shift {
            claim(z.len())?;
            for v in z {
                check_dim("lower shift", q, v.len())?;
            }
        }
        if let Some(z) = &noise.upper_shift {
            claim(z.len())?;
            for v in z {
                check_dim("upper shift", q, v.len())?;
            }
        }
        if let Some(e) = &noise.hessian {
            claim(e.len())?;
            for m in e {
                check_dim("hessian perturbation", q, m.nrows())?;
                check_dim("hessian perturbation", q, m.ncols())?;
                if crate::linalg::spectral_norm_symmetric(m) > 0.5 * self.constants.mu * (1.0 + 1e-9) {
                    return Err(invalid("hessian_noise", "per-sample perturbation exceeds mu/2"));
                }
            }
        }
        if let Some(n) = n {
            if n == 0 {
                return Err(invalid("population", "noise vectors are empty"));
            }
            self.population = n;
        }
        self.upper_noise_energy = noise
            .upper_shift
            .as_ref()
            .map(|z| 0.5 * z.iter().map(|v| v.norm_squared()).sum::<f64>() / z.len() as f64)
            .unwrap_or(0.0);

        // σ² = E‖∇G − ∇g‖² is exact for shifts of c; a Hessian perturbation adds
        // a y-dependent term, bounded here at the lower solution for x = 0.
        let shift_var = noise
            .lower_shift
            .as_ref()
            .map(|z| z.iter().map(|v| v.norm_squared()).sum::<f64>() / z.len() as f64)
            .unwrap_or(0.0);
        let mut sigma = shift_var.sqrt();
        self.constants.estimated.retain(|c| *c != Constant::Sigma);
        if let Some(e) = &noise.hessian {
            let radius = e.iter().map(crate::linalg::spectral_norm_symmetric).fold(0.0, f64::max);
            let y0 = spd_solve(&self.a, &self.c)?;
            sigma += radius * y0.norm();
            self.constants.estimated.push(Constant::Sigma);
        }
        self.constants.sigma = sigma;
        self.noise = noise;
        Ok(())
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn coupling(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn upper_term(&self) -> &UpperTerm {
        &self.upper
    }

    pub fn y_weight(&self) -> f64 {
        self.y_weight
    }

    pub fn noise(&self) -> &QuadraticNoise {
        &self.noise
    }

    pub fn constants_mut(&mut self) -> &mut SmoothnessConstants {
        &mut self.constants
    }

    /// `y*(x) = A⁻¹(Bx + c)`.
    pub fn oracle_lower_solution(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("x", self.upper_dim(), x.len())?;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(BilevelError::NonFinite {
                context: "upper point".into(),
            });
        }
        spd_solve(&self.a, &(&self.b * x + &self.c))
    }

    /// `∇Φ(x) = ∇φ(x) + Bᵀ A⁻¹ w (y*(x) − d)`.
    pub fn oracle_hypergradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let y = self.oracle_lower_solution(x)?;
        let v = spd_solve(&self.a, &((&y - &self.d) * self.y_weight))?;
        Ok(self.upper.gradient(x) + self.b.transpose() * v)
    }

    /// Upper objective at the exact lower solution, `Φ(x)`.
    pub fn oracle_objective(&self, x: &DVector<f64>) -> Result<f64> {
        let y = self.oracle_lower_solution(x)?;
        Ok(self.upper_value(x, &y, Samples::Full))
    }

    fn mean_shift(&self, shifts: &Option<Vec<DVector<f64>>>, s: Samples) -> Option<DVector<f64>> {
        let z = shifts.as_ref()?;
        match s {
            // centered over the population
            Samples::Full => None,
            Samples::Batch(b) => {
                let mut acc = DVector::zeros(self.lower_dim());
                for &i in b.indices() {
                    acc += &z[i];
                }
                Some(acc / b.len() as f64)
            }
        }
    }

    fn hessian_apply(&self, v: &DVector<f64>, s: Samples) -> DVector<f64> {
        let mut out = &self.a * v;
        if let (Some(e), Samples::Batch(b)) = (&self.noise.hessian, s) {
            let w = 1.0 / b.len() as f64;
            for &i in b.indices() {
                out += (&e[i] * v) * w;
            }
        }
        out
    }

    fn shifted_target(&self, s: Samples) -> DVector<f64> {
        match self.mean_shift(&self.noise.upper_shift, s) {
            Some(xi) => &self.d + xi,
            None => self.d.clone(),
        }
    }

    pub(crate) fn to_snapshot(&self) -> QuadraticSnapshot {
        QuadraticSnapshot {
            a: RowMajor::from(&self.a),
            b: RowMajor::from(&self.b),
            c: self.c.as_slice().to_vec(),
            d: self.d.as_slice().to_vec(),
            upper: self.upper.clone(),
            y_weight: self.y_weight,
            population: self.population,
            lower_shift: self.noise.lower_shift.as_ref().map(|z| RowMajor::from(&stack(z))),
            upper_shift: self.noise.upper_shift.as_ref().map(|z| RowMajor::from(&stack(z))),
            hessian: self
                .noise
                .hessian
                .as_ref()
                .map(|e| e.iter().map(RowMajor::from).collect()),
            constants: self.constants.clone(),
        }
    }

    pub(crate) fn from_snapshot(s: &QuadraticSnapshot) -> Result<Self> {
        let mut prob = Self::assemble(
            s.a.to_matrix()?,
            s.b.to_matrix()?,
            DVector::from_vec(s.c.clone()),
            DVector::from_vec(s.d.clone()),
            s.upper.clone(),
            s.y_weight,
            s.population,
        )?;
        let unstack = |m: &RowMajor| -> Result<Vec<DVector<f64>>> {
            let m = m.to_matrix()?;
            Ok(m.row_iter().map(|r| r.transpose()).collect())
        };
        let noise = QuadraticNoise {
            lower_shift: s.lower_shift.as_ref().map(unstack).transpose()?,
            upper_shift: s.upper_shift.as_ref().map(unstack).transpose()?,
            hessian: s
                .hessian
                .as_ref()
                .map(|e| e.iter().map(RowMajor::to_matrix).collect::<Result<Vec<_>>>())
                .transpose()?,
        };
        prob.set_noise(noise)?;
        s.constants.validate()?;
        prob.constants = s.constants.clone();
        Ok(prob)
    }
}

fn stack(rows: &[DVector<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let q = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(n, q, |i, j| rows[i][j])
}

fn centered_shifts<R: rand::Rng + ?Sized>(n: usize, q: usize, scale: f64, rng: &mut R) -> Vec<DVector<f64>> {
    let raw: Vec<DVector<f64>> = (0..n).map(|_| gaussian_vector(q, rng) * scale).collect();
    let mean = raw.iter().fold(DVector::zeros(q), |acc, v| acc + v) / n as f64;
    raw.into_iter().map(|v| v - &mean).collect()
}

/// JSON form of a [`QuadraticBilevel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticSnapshot {
    pub a: RowMajor,
    pub b: RowMajor,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    pub upper: UpperTerm,
    pub y_weight: f64,
    pub population: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower_shift: Option<RowMajor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper_shift: Option<RowMajor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hessian: Option<Vec<RowMajor>>,
    pub constants: SmoothnessConstants,
}

impl BilevelProblem for QuadraticBilevel {
    fn upper_dim(&self) -> usize {
        self.b.ncols()
    }

    fn lower_dim(&self) -> usize {
        self.a.nrows()
    }

    fn constants(&self) -> &SmoothnessConstants {
        &self.constants
    }

    fn upper_population(&self) -> usize {
        self.population
    }

    fn lower_population(&self) -> usize {
        self.population
    }

    fn upper_value(&self, x: &DVector<f64>, y: &DVector<f64>, s: Samples) -> f64 {
        let phi = self.upper.value(x);
        let w = self.y_weight;
        match (&self.noise.upper_shift, s) {
            (Some(z), Samples::Batch(b)) => {
                let base = y - &self.d;
                let mean = b.indices().iter().map(|&i| (&base - &z[i]).norm_squared()).sum::<f64>() / b.len() as f64;
                phi + 0.5 * w * mean
            }
            _ => phi + 0.5 * w * (y - &self.d).norm_squared() + w * self.upper_noise_energy,
        }
    }

    fn lower_value(&self, x: &DVector<f64>, y: &DVector<f64>, s: Samples) -> f64 {
        let mut lin = &self.b * x + &self.c;
        if let Some(z) = self.mean_shift(&self.noise.lower_shift, s) {
            lin += z;
        }
        0.5 * y.dot(&self.hessian_apply(y, s)) - y.dot(&lin)
    }

    fn upper_grad_x(&self, x: &DVector<f64>, _y: &DVector<f64>, _s: Samples) -> DVector<f64> {
        self.upper.gradient(x)
    }

    fn upper_grad_y(&self, _x: &DVector<f64>, y: &DVector<f64>, s: Samples) -> DVector<f64> {
        (y - self.shifted_target(s)) * self.y_weight
    }

    fn lower_grad_y(&self, x: &DVector<f64>, y: &DVector<f64>, s: Samples) -> DVector<f64> {
        let mut g = self.hessian_apply(y, s) - &self.b * x - &self.c;
        if let Some(z) = self.mean_shift(&self.noise.lower_shift, s) {
            g -= z;
        }
        g
    }

    fn lower_jvp(&self, _x: &DVector<f64>, _y: &DVector<f64>, v: &DVector<f64>, _s: Samples) -> DVector<f64> {
        -(self.b.transpose() * v)
    }

    fn lower_hvp(&self, _x: &DVector<f64>, _y: &DVector<f64>, v: &DVector<f64>, s: Samples) -> DVector<f64> {
        self.hessian_apply(v, s)
    }

    fn exact_oracle(&self) -> Option<&dyn ExactOracle> {
        Some(self)
    }
}

impl ExactOracle for QuadraticBilevel {
    fn lower_solution(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.oracle_lower_solution(x)
    }

    fn hypergradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.oracle_hypergradient(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{sample_batch, Batch, Role, Streams};

    fn random_point(n: usize, seed: u64) -> DVector<f64> {
        gaussian_vector(n, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn identity_spectrum_gives_identity() {
        let prob = make_quadratic(2, 2, 1.0, 0.0, 9).unwrap();
        let err = (prob.a() - DMatrix::<f64>::identity(2, 2)).amax();
        assert!(err < 1e-14, "{err}");
    }

    #[test]
    fn constants_match_emitted_spectrum() {
        let prob = make_quadratic(4, 3, 10.0, 0.0, 21).unwrap();
        let eig = prob.a().clone().symmetric_eigen();
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        assert!((ev[0] - 1.0).abs() < 1e-12);
        assert!((ev[2] - 10.0).abs() < 1e-12);
        let c = prob.constants();
        assert_eq!((c.mu, c.l), (1.0, 10.0));
        assert_eq!(c.kappa(), 10.0);
    }

    #[test]
    fn equal_seeds_bit_identical() {
        let mut spec = QuadraticSpec::new(3, 4, 5.0, 0.3, 77);
        spec.hessian_noise = 0.2;
        spec.upper_noise = 0.1;
        spec.population = 50;
        let a = QuadraticBilevel::generate(&spec).unwrap();
        let b = QuadraticBilevel::generate(&spec).unwrap();
        assert_eq!(a.to_snapshot(), b.to_snapshot());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(make_quadratic(0, 2, 1.0, 0.0, 0).is_err());
        assert!(make_quadratic(2, 2, 0.5, 0.0, 0).is_err());
        assert!(make_quadratic(2, 2, f64::NAN, 0.0, 0).is_err());
        assert!(make_quadratic(2, 2, 2.0, -1.0, 0).is_err());
        assert!(make_quadratic(2, 1, 2.0, 0.0, 0).is_err());
    }

    #[test]
    fn lower_solution_trivial_cases() {
        let eye = DMatrix::<f64>::identity(2, 2);
        let zero = QuadraticBilevel::from_parts(
            eye.clone(),
            DMatrix::zeros(2, 3),
            DVector::zeros(2),
            DVector::zeros(2),
            UpperTerm::default(),
            1.0,
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        assert_eq!(zero.oracle_lower_solution(&x).unwrap(), DVector::zeros(2));

        let b = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
        let ident = QuadraticBilevel::from_parts(eye, b.clone(), DVector::zeros(2), DVector::zeros(2), UpperTerm::Zero, 1.0)
            .unwrap();
        let y = ident.oracle_lower_solution(&x).unwrap();
        assert!((y - &b * &x).amax() < 1e-14);
    }

    #[test]
    fn lower_solution_zeroes_gradient() {
        let prob = make_quadratic(3, 3, 20.0, 0.0, 4).unwrap();
        for s in 0..5 {
            let x = random_point(3, s) * 3.0;
            let y = prob.oracle_lower_solution(&x).unwrap();
            let r = prob.lower_grad_y(&x, &y, Samples::Full).norm();
            assert!(r <= 1e-10 * (1.0 + x.norm()), "{r}");
        }
    }

    #[test]
    fn decoupled_hypergradient_is_phi_gradient() {
        let mut prob = make_quadratic(3, 3, 4.0, 0.0, 8).unwrap();
        prob.b = DMatrix::zeros(3, 3);
        let x = random_point(3, 1);
        let g = prob.oracle_hypergradient(&x).unwrap();
        assert!((g - prob.upper.gradient(&x)).amax() < 1e-15);
    }

    #[test]
    fn y_free_upper_gives_partial_gradient() {
        let base = make_quadratic(3, 4, 4.0, 0.0, 8).unwrap();
        let prob = QuadraticBilevel::from_parts(
            base.a.clone(),
            base.b.clone(),
            base.c.clone(),
            base.d.clone(),
            UpperTerm::default(),
            0.0,
        )
        .unwrap();
        let x = random_point(3, 2);
        let y = prob.oracle_lower_solution(&x).unwrap();
        let g = prob.oracle_hypergradient(&x).unwrap();
        assert_eq!(g, prob.upper_grad_x(&x, &y, Samples::Full));
    }

    #[test]
    fn full_population_batch_equals_deterministic() {
        let mut spec = QuadraticSpec::new(3, 4, 6.0, 0.5, 5);
        spec.hessian_noise = 0.3;
        spec.upper_noise = 0.4;
        spec.population = 40;
        let prob = QuadraticBilevel::generate(&spec).unwrap();
        let full = Batch::full(40).unwrap();
        let x = random_point(3, 10);
        let y = random_point(4, 11);
        let v = random_point(4, 12);
        let bs = Samples::Batch(&full);
        let pairs = [
            (prob.lower_grad_y(&x, &y, Samples::Full), prob.lower_grad_y(&x, &y, bs)),
            (prob.upper_grad_y(&x, &y, Samples::Full), prob.upper_grad_y(&x, &y, bs)),
            (prob.lower_hvp(&x, &y, &v, Samples::Full), prob.lower_hvp(&x, &y, &v, bs)),
            (prob.lower_jvp(&x, &y, &v, Samples::Full), prob.lower_jvp(&x, &y, &v, bs)),
        ];
        for (det, mean) in pairs {
            assert!((&det - &mean).norm() <= 1e-12 * det.norm().max(1.0));
        }
        let fv = prob.upper_value(&x, &y, Samples::Full);
        assert!((fv - prob.upper_value(&x, &y, bs)).abs() <= 1e-12 * fv.abs().max(1.0));
        let gv = prob.lower_value(&x, &y, Samples::Full);
        assert!((gv - prob.lower_value(&x, &y, bs)).abs() <= 1e-12 * gv.abs().max(1.0));
    }

    #[test]
    fn per_sample_hessians_stay_spd() {
        let mut spec = QuadraticSpec::new(2, 5, 3.0, 0.0, 6);
        spec.hessian_noise = 10.0;
        spec.population = 30;
        let prob = QuadraticBilevel::generate(&spec).unwrap();
        for e in prob.noise.hessian.as_ref().unwrap() {
            let (lo, _) = symmetric_extremes(&(prob.a() + e));
            assert!(lo >= 0.5 - 1e-12, "{lo}");
        }
        let mut rng = Streams::new(1).rng(Role::NeumannBatch, 0);
        let batch = sample_batch(30, 1, &mut rng).unwrap();
        let x = DVector::zeros(2);
        let y = DVector::zeros(5);
        for s in 0..10 {
            let v = random_point(5, s).normalize();
            let quad = v.dot(&prob.lower_hvp(&x, &y, &v, Samples::Batch(&batch)));
            assert!(quad >= 0.5 - 1e-12);
        }
    }

    #[test]
    fn shift_variance_sets_sigma() {
        let prob = make_quadratic(2, 3, 2.0, 0.5, 13).unwrap();
        let z = prob.noise.lower_shift.as_ref().unwrap();
        let var = z.iter().map(|v| v.norm_squared()).sum::<f64>() / z.len() as f64;
        assert!((prob.constants().sigma - var.sqrt()).abs() < 1e-15);
        assert!(!prob.constants().is_estimated(Constant::Sigma));
    }
}
