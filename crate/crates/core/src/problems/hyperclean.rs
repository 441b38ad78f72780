//! Data hyper-cleaning: learn per-sample weights `σ(λᵢ)` on a label-corrupted
//! training set so that the weighted, regularized softmax classifier fits a
//! clean validation set.
//!
//! ```text
//! g(λ, w) = (1/n) Σᵢ σ(λᵢ)·CE(W xᵢ, yᵢ) + C_r‖w‖²     (train)
//! f(λ, w) = (1/m) Σⱼ CE(W xⱼ, yⱼ)                     (validation)
//! ```
//!
//! `W` is the `k × dim` weight matrix stored row-major in the lower variable.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};
use crate::linalg::{symmetric_extremes, RowMajor};
use crate::problem::{BilevelProblem, Constant, Samples, SmoothnessConstants};

/// Distance between any two class means.
pub const CLASS_SEPARATION: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperCleanSpec {
    pub n_tr: usize,
    pub n_val: usize,
    pub dim: usize,
    pub k: usize,
    /// Probability that a training label is replaced by another class.
    pub p: f64,
    #[serde(default = "default_c_r")]
    pub c_r: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_c_r() -> f64 {
    0.001
}

#[derive(Debug, Clone)]
pub struct HyperCleanProblem {
    dim: usize,
    k: usize,
    c_r: f64,
    corruption_rate: f64,
    x_tr: Vec<f64>,
    y_tr: Vec<usize>,
    y_true: Vec<usize>,
    mask: Vec<bool>,
    x_val: Vec<f64>,
    y_val: Vec<usize>,
    constants: SmoothnessConstants,
}

pub fn make_hyperclean(
    n_tr: usize,
    n_val: usize,
    dim: usize,
    k: usize,
    p: f64,
    c_r: f64,
    seed: u64,
) -> Result<HyperCleanProblem> {
    HyperCleanProblem::generate(&HyperCleanSpec {
        n_tr,
        n_val,
        dim,
        k,
        p,
        c_r,
        seed,
    })
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl HyperCleanProblem {
    pub fn generate(spec: &HyperCleanSpec) -> Result<Self> {
        let HyperCleanSpec {
            n_tr,
            n_val,
            dim,
            k,
            p,
            c_r,
            seed,
        } = *spec;
        if n_tr == 0 || n_val == 0 || dim == 0 {
            return Err(invalid("sizes", "n_tr, n_val and dim must be at least 1"));
        }
        if k < 2 {
            return Err(invalid("k", "need at least two classes"));
        }
        if !(0.0..1.0).contains(&p) {
            return Err(invalid("p", format!("corruption rate {p} must lie in [0, 1)")));
        }
        if !c_r.is_finite() || c_r <= 0.0 {
            return Err(invalid("c_r", "regularizer weight must be positive"));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Orthogonal means at distance 3 when k <= dim, random directions otherwise.
        let radius = CLASS_SEPARATION / 2f64.sqrt();
        let means: Vec<Vec<f64>> = (0..k)
            .map(|c| {
                if k <= dim {
                    (0..dim).map(|j| if j == c { radius } else { 0.0 }).collect()
                } else {
                    let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                    let n = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    g.into_iter().map(|v| v * radius / n).collect()
                }
            })
            .collect();
        let draw = |n: usize, rng: &mut ChaCha8Rng| {
            let mut xs = Vec::with_capacity(n * dim);
            let mut ys = Vec::with_capacity(n);
            for _ in 0..n {
                let y = rng.random_range(0..k);
                ys.push(y);
                for j in 0..dim {
                    let z: f64 = rng.sample(StandardNormal);
                    xs.push(means[y][j] + z);
                }
            }
            (xs, ys)
        };
        let (x_tr, y_true) = draw(n_tr, &mut rng);
        let (x_val, y_val) = draw(n_val, &mut rng);

        let mut y_tr = y_true.clone();
        let mut mask = vec![false; n_tr];
        for i in 0..n_tr {
            if p > 0.0 && rng.random_bool(p) {
                let r = rng.random_range(0..k - 1);
                y_tr[i] = if r >= y_true[i] { r + 1 } else { r };
                mask[i] = true;
            }
        }

        let mut prob = Self {
            dim,
            k,
            c_r,
            corruption_rate: p,
            x_tr,
            y_tr,
            y_true,
            mask,
            x_val,
            y_val,
            constants: SmoothnessConstants::new(1.0, 1.0, 1.0, 0.0, 0.0, 0.0)?,
        };
        prob.constants = prob.estimate_constants()?;
        Ok(prob)
    }

    // μ = 2·C_r is exact; the rest are upper estimates from the data.
    fn estimate_constants(&self) -> Result<SmoothnessConstants> {
        let mu = 2.0 * self.c_r;
        let gram_max = |xs: &[f64], n: usize| {
            let m = DMatrix::from_row_slice(n, self.dim, xs);
            symmetric_extremes(&(m.transpose() * &m)).1 / n as f64
        };
        // softmax cross-entropy curvature is at most 1/2 along any direction
        let curv = 0.5 * gram_max(&self.x_tr, self.n_tr()).max(gram_max(&self.x_val, self.n_val()));
        let l = mu + curv;
        let norms = |xs: &[f64]| -> Vec<f64> {
            xs.chunks(self.dim)
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect()
        };
        let tr = norms(&self.x_tr);
        let val = norms(&self.x_val);
        let max_tr = tr.iter().copied().fold(0.0, f64::max);
        let mean_val = val.iter().sum::<f64>() / val.len() as f64;
        let n = self.n_tr() as f64;
        let m = 2f64.sqrt() * mean_val;
        let tau = 0.25 * max_tr * max_tr / n.sqrt();
        let rho = 0.5 * max_tr.powi(3) / n;
        let sigma = 2.0 * 2f64.sqrt() * max_tr;
        Ok(SmoothnessConstants::new(m, l, mu, tau, rho, sigma)?.with_estimated(&[
            Constant::M,
            Constant::L,
            Constant::Tau,
            Constant::Rho,
            Constant::Sigma,
        ]))
    }

    pub fn n_tr(&self) -> usize {
        self.y_tr.len()
    }

    pub fn n_val(&self) -> usize {
        self.y_val.len()
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn feature_dim(&self) -> usize {
        self.dim
    }

    pub fn c_r(&self) -> f64 {
        self.c_r
    }

    pub fn corruption_rate(&self) -> f64 {
        self.corruption_rate
    }

    /// Ground truth: which training labels were resampled. Evaluation only.
    pub fn corruption_mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn observed_labels(&self) -> &[usize] {
        &self.y_tr
    }

    pub fn true_labels(&self) -> &[usize] {
        &self.y_true
    }

    /// `σ(λᵢ)` for each training sample.
    pub fn sample_weights(&self, lambda: &DVector<f64>) -> DVector<f64> {
        lambda.map(sigmoid)
    }

    /// Mean `σ(λᵢ)` over corrupted and clean samples.
    pub fn weight_split(&self, lambda: &DVector<f64>) -> (f64, f64) {
        let (mut sc, mut nc, mut sk, mut nk) = (0.0, 0usize, 0.0, 0usize);
        for (i, &bad) in self.mask.iter().enumerate() {
            let w = sigmoid(lambda[i]);
            if bad {
                sc += w;
                nc += 1;
            } else {
                sk += w;
                nk += 1;
            }
        }
        (sc / nc.max(1) as f64, sk / nk.max(1) as f64)
    }

    /// Fraction of validation samples classified correctly.
    pub fn validation_accuracy(&self, w: &DVector<f64>) -> f64 {
        let mut logits = vec![0.0; self.k];
        let hits = (0..self.n_val())
            .filter(|&j| {
                self.logits(w.as_slice(), self.val_row(j), &mut logits);
                let best = (0..self.k).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap();
                best == self.y_val[j]
            })
            .count();
        hits as f64 / self.n_val() as f64
    }

    fn tr_row(&self, i: usize) -> &[f64] {
        &self.x_tr[i * self.dim..(i + 1) * self.dim]
    }

    fn val_row(&self, j: usize) -> &[f64] {
        &self.x_val[j * self.dim..(j + 1) * self.dim]
    }

    fn logits(&self, w: &[f64], x: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let row = &w[c * self.dim..(c + 1) * self.dim];
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    /// Softmax probabilities in place; returns log-sum-exp of the logits.
    fn softmax(z: &mut [f64]) -> f64 {
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in z.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in z.iter_mut() {
            *v /= sum;
        }
        max + sum.ln()
    }

    fn check_w(&self, w: &DVector<f64>) {
        assert_eq!(w.len(), self.k * self.dim, "lower variable has wrong length");
    }

    /// Σ weight·(p − e_y) ⊗ x over the given rows.
    fn ce_gradient<'a>(&self, w: &DVector<f64>, rows: impl Iterator<Item = (&'a [f64], usize, f64)>) -> DVector<f64> {
        let mut g = DVector::zeros(self.k * self.dim);
        let mut z = vec![0.0; self.k];
        for (x, y, wt) in rows {
            self.logits(w.as_slice(), x, &mut z);
            Self::softmax(&mut z);
            z[y] -= 1.0;
            for c in 0..self.k {
                let s = wt * z[c];
                if s != 0.0 {
                    let out = &mut g.as_mut_slice()[c * self.dim..(c + 1) * self.dim];
                    for (o, xv) in out.iter_mut().zip(x) {
                        *o += s * xv;
                    }
                }
            }
        }
        g
    }

    pub(crate) fn to_snapshot(&self) -> HyperCleanSnapshot {
        HyperCleanSnapshot {
            dim: self.dim,
            k: self.k,
            c_r: self.c_r,
            corruption_rate: self.corruption_rate,
            x_tr: RowMajor {
                rows: self.n_tr(),
                cols: self.dim,
                data: self.x_tr.clone(),
            },
            y_tr: self.y_tr.clone(),
            y_true: self.y_true.clone(),
            mask: self.mask.clone(),
            x_val: RowMajor {
                rows: self.n_val(),
                cols: self.dim,
                data: self.x_val.clone(),
            },
            y_val: self.y_val.clone(),
            constants: self.constants.clone(),
        }
    }

    pub(crate) fn from_snapshot(s: &HyperCleanSnapshot) -> Result<Self> {
        check_dim("x_tr columns", s.dim, s.x_tr.cols)?;
        check_dim("x_val columns", s.dim, s.x_val.cols)?;
        check_dim("x_tr data", s.x_tr.rows * s.dim, s.x_tr.data.len())?;
        check_dim("x_val data", s.x_val.rows * s.dim, s.x_val.data.len())?;
        for (ctx, len) in [("y_tr", s.y_tr.len()), ("y_true", s.y_true.len()), ("mask", s.mask.len())] {
            check_dim(ctx, s.x_tr.rows, len)?;
        }
        check_dim("y_val", s.x_val.rows, s.y_val.len())?;
        if s.y_tr.iter().chain(&s.y_true).chain(&s.y_val).any(|&y| y >= s.k) {
            return Err(invalid("labels", "label out of range"));
        }
        s.constants.validate()?;
        Ok(Self {
            dim: s.dim,
            k: s.k,
            c_r: s.c_r,
            corruption_rate: s.corruption_rate,
            x_tr: s.x_tr.data.clone(),
            y_tr: s.y_tr.clone(),
            y_true: s.y_true.clone(),
            mask: s.mask.clone(),
            x_val: s.x_val.data.clone(),
            y_val: s.y_val.clone(),
            constants: s.constants.clone(),
        })
    }
}

/// JSON form of a [`HyperCleanProblem`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperCleanSnapshot {
    pub dim: usize,
    pub k: usize,
    pub c_r: f64,
    pub corruption_rate: f64,
    pub x_tr: RowMajor,
    pub y_tr: Vec<usize>,
    pub y_true: Vec<usize>,
    pub mask: Vec<bool>,
    pub x_val: RowMajor,
    pub y_val: Vec<usize>,
    pub constants: SmoothnessConstants,
}

impl BilevelProblem for HyperCleanProblem {
    fn upper_dim(&self) -> usize {
        self.n_tr()
    }

    fn lower_dim(&self) -> usize {
        self.k * self.dim
    }

    fn constants(&self) -> &SmoothnessConstants {
        &self.constants
    }

    fn upper_population(&self) -> usize {
        self.n_val()
    }

    fn lower_population(&self) -> usize {
        self.n_tr()
    }

    fn upper_value(&self, _x: &DVector<f64>, w: &DVector<f64>, s: Samples) -> f64 {
        self.check_w(w);
        let mut z = vec![0.0; self.k];
        s.weighted(self.n_val())
            .into_iter()
            .map(|(j, wt)| {
                self.logits(w.as_slice(), self.val_row(j), &mut z);
                let zy = z[self.y_val[j]];
                wt * (Self::softmax(&mut z) - zy)
            })
            .sum()
    }

    fn lower_value(&self, lambda: &DVector<f64>, w: &DVector<f64>, s: Samples) -> f64 {
        self.check_w(w);
        let mut z = vec![0.0; self.k];
        let data: f64 = s
            .weighted(self.n_tr())
            .into_iter()
            .map(|(i, wt)| {
                self.logits(w.as_slice(), self.tr_row(i), &mut z);
                let zy = z[self.y_tr[i]];
                wt * sigmoid(lambda[i]) * (Self::softmax(&mut z) - zy)
            })
            .sum();
        data + self.c_r * w.norm_squared()
    }

    fn upper_grad_x(&self, _x: &DVector<f64>, _w: &DVector<f64>, _s: Samples) -> DVector<f64> {
        DVector::zeros(self.n_tr())
    }

    fn upper_grad_y(&self, _x: &DVector<f64>, w: &DVector<f64>, s: Samples) -> DVector<f64> {
        self.check_w(w);
        let rows = s
            .weighted(self.n_val())
            .into_iter()
            .map(|(j, wt)| (self.val_row(j), self.y_val[j], wt));
        self.ce_gradient(w, rows)
    }

    fn lower_grad_y(&self, lambda: &DVector<f64>, w: &DVector<f64>, s: Samples) -> DVector<f64> {
        self.check_w(w);
        let rows = s
            .weighted(self.n_tr())
            .into_iter()
            .map(|(i, wt)| (self.tr_row(i), self.y_tr[i], wt * sigmoid(lambda[i])));
        self.ce_gradient(w, rows) + w * (2.0 * self.c_r)
    }

    fn lower_jvp(&self, lambda: &DVector<f64>, w: &DVector<f64>, v: &DVector<f64>, s: Samples) -> DVector<f64> {
        self.check_w(w);
        self.check_w(v);
        let mut out = DVector::zeros(self.n_tr());
        let mut z = vec![0.0; self.k];
        let mut vx = vec![0.0; self.k];
        for (i, wt) in s.weighted(self.n_tr()) {
            let x = self.tr_row(i);
            self.logits(w.as_slice(), x, &mut z);
            Self::softmax(&mut z);
            z[self.y_tr[i]] -= 1.0;
            self.logits(v.as_slice(), x, &mut vx);
            let inner: f64 = z.iter().zip(&vx).map(|(a, b)| a * b).sum();
            let sg = sigmoid(lambda[i]);
            out[i] += wt * sg * (1.0 - sg) * inner;
        }
        out
    }

    fn lower_hvp(&self, lambda: &DVector<f64>, w: &DVector<f64>, v: &DVector<f64>, s: Samples) -> DVector<f64> {
        self.check_w(w);
        self.check_w(v);
        let mut out = v * (2.0 * self.c_r);
        let mut p = vec![0.0; self.k];
        let mut vx = vec![0.0; self.k];
        for (i, wt) in s.weighted(self.n_tr()) {
            let x = self.tr_row(i);
            self.logits(w.as_slice(), x, &mut p);
            Self::softmax(&mut p);
            self.logits(v.as_slice(), x, &mut vx);
            // (diag(p) − ppᵀ)·(V x)
            let pv: f64 = p.iter().zip(&vx).map(|(a, b)| a * b).sum();
            let scale = wt * sigmoid(lambda[i]);
            for c in 0..self.k {
                let coef = scale * p[c] * (vx[c] - pv);
                if coef != 0.0 {
                    let row = &mut out.as_mut_slice()[c * self.dim..(c + 1) * self.dim];
                    for (o, xv) in row.iter_mut().zip(x) {
                        *o += coef * xv;
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian_vector;
    use crate::rng::Batch;

    fn small() -> HyperCleanProblem {
        make_hyperclean(40, 30, 4, 3, 0.3, 0.01, 17).unwrap()
    }

    #[test]
    fn zero_rate_no_corruption() {
        let prob = make_hyperclean(200, 10, 5, 4, 0.0, 0.001, 3).unwrap();
        assert!(prob.corruption_mask().iter().all(|m| !m));
        assert_eq!(prob.observed_labels(), prob.true_labels());
    }

    #[test]
    fn mask_marks_exactly_changed_labels() {
        let prob = make_hyperclean(500, 10, 5, 4, 0.4, 0.001, 8).unwrap();
        for i in 0..prob.n_tr() {
            assert_eq!(prob.corruption_mask()[i], prob.observed_labels()[i] != prob.true_labels()[i]);
        }
    }

    #[test]
    fn mask_density_concentrates() {
        // Binomial(1000, 0.4) has sd 15.5; [350, 450] is beyond 3.2 sd.
        for seed in 0..20 {
            let prob = make_hyperclean(1000, 10, 20, 10, 0.4, 0.001, seed).unwrap();
            let dens = prob.corruption_mask().iter().filter(|&&m| m).count() as f64 / 1000.0;
            assert!((0.35..=0.45).contains(&dens), "seed {seed}: {dens}");
        }
    }

    #[test]
    fn default_regularizer_gives_mu() {
        let prob = make_hyperclean(50, 10, 3, 3, 0.1, 0.001, 0).unwrap();
        assert_eq!(prob.constants().mu, 0.002);
        assert!(!prob.constants().is_estimated(Constant::Mu));
        assert!(prob.constants().is_estimated(Constant::L));
    }

    #[test]
    fn rejects_degenerate() {
        assert!(make_hyperclean(0, 10, 3, 3, 0.1, 0.001, 0).is_err());
        assert!(make_hyperclean(10, 10, 3, 1, 0.1, 0.001, 0).is_err());
        assert!(make_hyperclean(10, 10, 3, 3, 1.0, 0.001, 0).is_err());
        assert!(make_hyperclean(10, 10, 3, 3, 0.1, 0.0, 0).is_err());
    }

    #[test]
    fn gradients_match_central_differences() {
        let prob = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lam = gaussian_vector(prob.n_tr(), &mut rng);
        let w = gaussian_vector(12, &mut rng) * 0.3;
        let h = 1e-6;
        let gy = prob.lower_grad_y(&lam, &w, Samples::Full);
        let fy = prob.upper_grad_y(&lam, &w, Samples::Full);
        for j in 0..12 {
            let mut e = DVector::zeros(12);
            e[j] = h;
            let dg = (prob.lower_value(&lam, &(&w + &e), Samples::Full) - prob.lower_value(&lam, &(&w - &e), Samples::Full)) / (2.0 * h);
            let df = (prob.upper_value(&lam, &(&w + &e), Samples::Full) - prob.upper_value(&lam, &(&w - &e), Samples::Full)) / (2.0 * h);
            assert!((dg - gy[j]).abs() < 1e-7, "{j}: {dg} vs {}", gy[j]);
            assert!((df - fy[j]).abs() < 1e-7, "{j}: {df} vs {}", fy[j]);
        }
        // HVP and JVP against differences of the gradient
        let v = gaussian_vector(12, &mut rng);
        let hv = prob.lower_hvp(&lam, &w, &v, Samples::Full);
        let fd = (prob.lower_grad_y(&lam, &(&w + &v * h), Samples::Full) - prob.lower_grad_y(&lam, &(&w - &v * h), Samples::Full)) / (2.0 * h);
        assert!((hv - fd).amax() < 1e-7);
        let jv = prob.lower_jvp(&lam, &w, &v, Samples::Full);
        for i in [0, 7, 39] {
            let mut e = DVector::zeros(prob.n_tr());
            e[i] = h;
            let dgv = (prob.lower_grad_y(&(&lam + &e), &w, Samples::Full).dot(&v)
                - prob.lower_grad_y(&(&lam - &e), &w, Samples::Full).dot(&v))
                / (2.0 * h);
            assert!((dgv - jv[i]).abs() < 1e-8, "{i}: {dgv} vs {}", jv[i]);
        }
    }

    #[test]
    fn full_batch_equals_deterministic() {
        let prob = small();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lam = gaussian_vector(prob.n_tr(), &mut rng);
        let w = gaussian_vector(12, &mut rng);
        let v = gaussian_vector(12, &mut rng);
        let tr = Batch::full(prob.n_tr()).unwrap();
        let val = Batch::full(prob.n_val()).unwrap();
        let close = |a: DVector<f64>, b: DVector<f64>| (&a - &b).norm() <= 1e-12 * a.norm().max(1.0);
        assert!(close(prob.lower_grad_y(&lam, &w, Samples::Full), prob.lower_grad_y(&lam, &w, Samples::Batch(&tr))));
        assert!(close(prob.lower_hvp(&lam, &w, &v, Samples::Full), prob.lower_hvp(&lam, &w, &v, Samples::Batch(&tr))));
        assert!(close(prob.lower_jvp(&lam, &w, &v, Samples::Full), prob.lower_jvp(&lam, &w, &v, Samples::Batch(&tr))));
        assert!(close(prob.upper_grad_y(&lam, &w, Samples::Full), prob.upper_grad_y(&lam, &w, Samples::Batch(&val))));
    }

    #[test]
    fn hessian_spectrum_within_constants() {
        let prob = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lam = gaussian_vector(prob.n_tr(), &mut rng);
        let w = gaussian_vector(12, &mut rng);
        let c = prob.constants();
        for _ in 0..20 {
            let v = gaussian_vector(12, &mut rng).normalize();
            let q = v.dot(&prob.lower_hvp(&lam, &w, &v, Samples::Full));
            assert!(q >= c.mu * (1.0 - 1e-12) && q <= c.l, "{q}");
        }
    }
}
