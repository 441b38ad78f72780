//! The acceptance suite: twelve numbered checks, each returning a
//! [`CriterionReport`] with the measured quantity, its threshold and a
//! pass/fail verdict. Every check uses fixed seeds and is deterministic.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use bilevel_core::cg::cg_solve;
use bilevel_core::hypergrad::{aid_estimate, itd_estimate, stocbio_estimate, Method};
use bilevel_core::inner::gd_inner;
use bilevel_core::linalg::{gaussian_vector, random_orthogonal, rel_err, spd_solve};
use bilevel_core::neumann::{build_schedule, neumann_vq};
use bilevel_core::optimizers::{default_eta, run, RunConfig};
use bilevel_core::problems::{make_hyperclean, make_multitask, make_quadratic, QuadraticBilevel, QuadraticSpec, UpperTerm};
use bilevel_core::theory::{cg_error_factor, dense_inverse_apply, exact_neumann_expectation, finite_diff_hypergrad};
use bilevel_core::trace::StopReason;
use bilevel_core::{BilevelProblem, CostCounters, ExactOracle, Result, Role, Samples, Streams};

#[derive(Debug, Clone, Serialize)]
pub struct CriterionReport {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub measured: String,
    pub threshold: String,
    pub seconds: f64,
    pub details: Value,
}

impl CriterionReport {
    /// One line: `criterion N <name>: PASS|FAIL (measured ...; threshold ...)`.
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {:<28} {} (measured {}; threshold {}; {:.2}s)",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.measured,
            self.threshold,
            self.seconds
        )
    }
}

pub type Check = fn() -> CriterionReport;

/// All criteria in order.
pub const CRITERIA: [(u32, Check); 12] = [
    (1, hypergradient_exactness),
    (2, finite_difference_agreement),
    (3, itd_exponential_decay),
    (4, cg_convergence_law),
    (5, neumann_bias),
    (6, neumann_variance),
    (7, rate_trend),
    (8, stochastic_floor),
    (9, warm_start),
    (10, counter_structure),
    (11, hyper_cleaning),
    (12, task_sampling_variance),
];

pub fn run_all() -> Vec<CriterionReport> {
    CRITERIA.iter().map(|(_, check)| check()).collect()
}

fn point(n: usize, seed: u64) -> DVector<f64> {
    gaussian_vector(n, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn report(id: u32, name: &'static str, start: Instant, outcome: Result<(bool, String, String, Value)>) -> CriterionReport {
    let seconds = start.elapsed().as_secs_f64();
    match outcome {
        Ok((passed, measured, threshold, details)) => CriterionReport {
            id,
            name,
            passed,
            measured,
            threshold,
            seconds,
            details,
        },
        Err(e) => CriterionReport {
            id,
            name,
            passed: false,
            measured: format!("error: {e}"),
            threshold: String::new(),
            seconds,
            details: Value::Null,
        },
    }
}

/// Instances shared by the first two criteria: p = q = 5, κ cycling 1, 10, 100.
fn exactness_instances() -> Result<Vec<(f64, QuadraticBilevel, DVector<f64>)>> {
    (0..20u64)
        .map(|i| {
            let kappa = [1.0, 10.0, 100.0][i as usize % 3];
            Ok((kappa, make_quadratic(5, 5, kappa, 0.0, 1000 + i)?, point(5, 2000 + i)))
        })
        .collect()
}

pub fn hypergradient_exactness() -> CriterionReport {
    let start = Instant::now();
    let outcome = (|| {
        let mut worst: f64 = 0.0;
        for (_, prob, x) in exactness_instances()? {
            let ys = prob.lower_solution(&x)?;
            let est = aid_estimate(&prob, &x, &ys, &DVector::zeros(5), 5, 0.0, &mut CostCounters::default())?;
            worst = worst.max(rel_err(&est.grad, &prob.hypergradient(&x)?));
        }
        let secs = start.elapsed().as_secs_f64();
        Ok((
            worst <= 1e-8 && secs < 1.0,
            format!("max rel err {worst:.2e} in {secs:.3}s"),
            "rel err <= 1e-8, < 1 s".into(),
            json!({"max_rel_err": worst, "seconds": secs}),
        ))
    })();
    report(1, "hypergradient exactness", start, outcome)
}

pub fn finite_difference_agreement() -> CriterionReport {
    let start = Instant::now();
    let outcome = (|| {
        let mut rows = Vec::new();
        let (mut worst_itd, mut worst_aid): (f64, f64) = (0.0, 0.0);
        for (kappa, prob, x) in exactness_instances()? {
            let fd = finite_diff_hypergrad(&prob, &x, 1e-5)?;
            let ys = prob.lower_solution(&x)?;
            let aid = aid_estimate(&prob, &x, &ys, &DVector::zeros(5), 5, 0.0, &mut CostCounters::default())?;
            let alpha = 1.0 / prob.constants().l;
            let traj = gd_inner(&prob, &x, &ys, alpha, 200, &mut CostCounters::default())?;
            let itd = itd_estimate(&prob, &x, &traj, &mut CostCounters::default())?;
            let (e_aid, e_itd) = (rel_err(&aid.grad, &fd), rel_err(&itd.grad, &fd));
            worst_aid = worst_aid.max(e_aid);
            worst_itd = worst_itd.max(e_itd);
            rows.push(json!({"kappa": kappa, "aid_rel_err": e_aid, "itd_rel_err": e_itd}));
        }
        let by_kappa: Vec<Value> = [1.0, 10.0, 100.0]
            .iter()
            .map(|k| {
                let worst = rows
                    .iter()
                    .filter(|r| r["kappa"] == json!(k))
                    .map(|r| r["itd_rel_err"].as_f64().unwrap())
                    .fold(0.0, f64::max);
                json!({"kappa": k, "itd_max_rel_err": worst})
            })
            .collect();
        Ok((
            worst_aid <= 1e-4 && worst_itd <= 1e-4,
            format!("max rel err AID {worst_aid:.2e}, ITD {worst_itd:.2e}"),
            "rel err <= 1e-4 (h = 1e-5, ITD D = 200, alpha = 1/L)".into(),
            json!({"instances": rows, "itd_by_kappa": by_kappa}),
        ))
    })();
    report(2, "finite-difference agreement", start, outcome)
}

/// Least-squares slope of `ys` against `xs`.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

pub fn itd_exponential_decay() -> CriterionReport {
    let start = Instant::now();
    let outcome = (|| {
        let kappa = 10.0;
        let mut slopes = Vec::new();
        let mut theory = 0.0;
        for seed in 0..5u64 {
            let prob = make_quadratic(5, 5, kappa, 0.0, 3000 + seed)?;
            let x = point(5, 3100 + seed);
            let truth = prob.hypergradient(&x)?;
            let alpha = 1.0 / prob.constants().l;
            theory = (1.0 - alpha * prob.constants().mu).ln() / 2.0;
            let (mut ds, mut logs) = (Vec::new(), Vec::new());
            for d in 5..=60 {
                let traj = gd_inner(&prob, &x, &DVector::zeros(5), alpha, d, &mut CostCounters::default())?;
                let est = itd_estimate(&prob, &x, &traj, &mut CostCounters::default())?;
                ds.push(d as f64);
                logs.push((est.grad - &truth).norm().ln());
            }
            slopes.push(slope(&ds, &logs));
        }
        let med = median(slopes.clone());
        let rel = (med - theory).abs() / theory.abs();
        Ok((
            rel <= 0.1,
            format!("median slope {med:.4} vs {theory:.4} (off by {:.0}%, ratio {:.2})", rel * 100.0, med / theory),
            "slope within 10% of ln(1 - alpha*mu)/2".into(),
            json!({"slopes": slopes, "theory_slope": theory, "gd_contraction_slope": 2.0 * theory}),
        ))
    })();
    report(3, "ITD exponential decay", start, outcome)
}

pub fn cg_convergence_law() -> CriterionReport {
    let start = Instant::now();
    let outcome = (|| {
        let q = 8;
        let (mut worst_excess, mut worst_finite, mut worst_finite_warm): (f64, f64, f64) = (0.0, 0.0, 0.0);
        let mut worst_textbook: f64 = 0.0;
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
            let kappa = 10f64.powf(2.0 * seed as f64 / 49.0);
            let u = random_orthogonal(q, &mut rng);
            let spec = DVector::from_fn(q, |i, _| kappa.powf(i as f64 / (q - 1) as f64));
            let a = &u * DMatrix::from_diagonal(&spec) * u.transpose();
            let a = (&a + a.transpose()) * 0.5;
            let b = gaussian_vector(q, &mut rng);
            let warm = gaussian_vector(q, &mut rng);
            let exact = spd_solve(&a, &b)?;
            for v0 in [DVector::zeros(q), warm] {
                let e0 = (&v0 - &exact).norm();
                let cold = v0.iter().all(|&t| t == 0.0);
                for n in 0..=q {
                    let res = cg_solve(|v| &a * v, &b, &v0, n, 0.0, &mut CostCounters::default())?;
                    let ratio = (&res.v - &exact).norm() / e0;
                    worst_excess = worst_excess.max(ratio - cg_error_factor(kappa, n));
                    worst_textbook = worst_textbook.max(ratio / (2.0 * cg_error_factor(kappa, n) + 1e-9));
                    if n == q && cold {
                        worst_finite = worst_finite.max(rel_err(&res.v, &exact));
                    } else if n == q {
                        worst_finite_warm = worst_finite_warm.max(rel_err(&res.v, &exact));
                    }
                }
            }
        }
        Ok((
            worst_excess <= 1e-9 && worst_finite <= 1e-9,
            format!("max excess over bound {worst_excess:.1e}, rel err at N = q {worst_finite:.1e}"),
            "error/initial error <= bound (+1e-9); rel err <= 1e-9 at N = q from v0 = 0".into(),
            json!({
                "max_excess_over_bound": worst_excess,
                "max_ratio_to_twice_bound": worst_textbook,
                "finite_termination_rel_err": worst_finite,
                "finite_termination_rel_err_random_start": worst_finite_warm,
            }),
        ))
    })();
    report(4, "CG convergence law", start, outcome)
}

fn noisy_hessian_quadratic(seed: u64) -> Result<QuadraticBilevel> {
    QuadraticBilevel::generate(&QuadraticSpec {
        hessian_noise: 0.5,
        ..QuadraticSpec::new(3, 4, 2.0, 0.0, seed)
    })
}

/// Per-coordinate mean and standard error of a sample of vectors.
fn mean_and_se(samples: &[DVector<f64>]) -> (DVector<f64>, DVector<f64>) {
    let n = samples.len() as f64;
    let q = samples[0].len();
    let mean = samples.iter().fold(DVector::zeros(q), |a, s| a + s) / n;
    let var = samples
        .iter()
        .fold(DVector::zeros(q), |a: DVector<f64>, s| a + (s - &mean).map(|d| d * d))
        / (n - 1.0);
    (mean, var.map(|v| (v / n).sqrt()))
}

pub fn neumann_bias() -> CriterionReport {
    let start = Instant::now();
    let outcome = (|| {
        let prob = noisy_hessian_quadratic(5000)?;
        let c = prob.constants().clone();
        let x = point(3, 5001);
        let y = point(4, 5002);
        let v0 = prob.upper_grad_y(&x, &y, Samples::Full);
        let m = v0.norm();
        let eta = default_eta(&c);
        let inv = dense_inverse_apply(&prob, &x, &y, &v0)?;
        let draws = 10_000u64;
        let mut worst_z: f64 = 0.0;
        let mut worst_bias_ratio: f64 = 0.0;
        let mut rows = Vec::new();
        for q in 1..=20usize {
            let sched = build_schedule(q, 1, eta, c.mu)?;
            let samples: Vec<DVector<f64>> = (0..draws)
                .into_par_iter()
                .map(|r| {
                    let streams = Streams::new(r).at_iteration(q as u64);
                    neumann_vq(&prob, &x, &y, &v0, &sched, &streams, &mut CostCounters::default())
                })
                .collect::<Result<_>>()?;
            let (mean, se) = mean_and_se(&samples);
            let pooled = se.norm();
            let exact = exact_neumann_expectation(&prob, &x, &y, &v0, q, eta)?;
            let z = (&mean - &exact).norm() / pooled;
            let bound = (1.0 - eta * c.mu).powi(q as i32 + 1) * m / c.mu;
            let bias_exact = (&exact - &inv).norm();
            let bias_mc = (&mean - &inv).norm();
            worst_z = worst_z.max(z);
            worst_bias_ratio = worst_bias_ratio.max(bias_exact / bound).max((bias_mc - 3.0 * pooled) / bound);
            rows.push(json!({"Q": q, "z": z, "bias_exact": bias_exact, "bias_mc": bias_mc, "bound": bound, "pooled_se": pooled}));
        }
        let secs = start.elapsed().as_secs_f64();
        Ok((
            worst_z <= 3.0 && worst_bias_ratio <= 1.0 && secs < 30.0,
            format!("max |MC - exact|/SE {worst_z:.2}, max bias/bound {worst_bias_ratio:.3}, {secs:.1}s"),
            "<= 3 SE; bias <= (1-eta*mu)^(Q+1) M/mu for Q in 1..20; < 30 s".into(),
            json!({"per_q": rows, "M": m, "eta": eta}),
        ))
    })();
    report(5, "Neumann bias", start, outcome)
}

pub fn neumann_variance() -> CriterionReport {
    let start = Instant::now();
    let outcome = (|| {
        // only the Hessian is noisy, so the Neumann batches drive the variance
        let prob = noisy_hessian_quadratic(6000)?;
        let c = prob.constants().clone();
        let x = point(3, 6001);
        let y = point(4, 6002);
        let eta = default_eta(&c);
        let q = 10;
        let replicates = 1000u64;
        let variance = |b: usize| -> Result<f64> {
            let sched = build_schedule(q, b, eta, c.mu)?;
            let ests: Vec<DVector<f64>> = (0..replicates)
                .into_par_iter()
                .map(|r| {
                    let streams = Streams::new(r);
                    stocbio_estimate(&prob, &x, &y, &sched, 1, 1, &streams, &mut CostCounters::default()).map(|e| e.grad)
                })
                .collect::<Result<_>>()?;
            let mean = ests.iter().fold(DVector::zeros(3), |a, e| a + e) / replicates as f64;
            Ok(ests.iter().map(|e| (e - &mean).norm_squared()).sum::<f64>() / (replicates - 1) as f64)
        };
        let mut ratios = Vec::new();
        for b in [4usize, 8, 16] {
            ratios.push(json!({"B": b, "ratio": variance(b)? / variance(2 * b)?}));
        }
        let vals: Vec<f64> = ratios.iter().map(|r| r["ratio"].as_f64().unwrap()).collect();
        let ok = vals.iter().all(|r| (1.6..=2.4).contains(r));
        Ok((
            ok,
            format!("variance ratios {}", vals.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(", ")),
            "each in [1.6, 2.4] for B -> 2B, B in {4, 8, 16}".into(),
            json!({"ratios": ratios, "Q": q, "replicates": replicates}),
        ))
    })();
    report(6, "Neumann variance vs B", start, outcome)
}

/// Prefix mean of `vals[..k]`.
fn prefix_mean(vals: &[f64], k: usize) -> f64 {
    vals[..k].iter().sum::<f64>() / k as f64
}

pub fn rate_trend() -> CriterionReport {
    let start = Instant::now();
    let outcome = (|| {
        let mut rows = Vec::new();
        let mut medians = Vec::new();
        for method in [Method::Aid, Method::Itd] {
            let mut ratios = Vec::new();
            for seed in 0..5u64 {
                let prob = QuadraticBilevel::generate(&QuadraticSpec {
                    upper: UpperTerm::Zero,
                    ..QuadraticSpec::new(5, 5, RATE_KAPPA, 0.0, 7000 + seed)
                })?;
                let mut cfg = match method {
                    Method::Aid => RunConfig::aid(400, 20, 5),
                    _ => RunConfig::itd(400, 20),
                };
                cfg.x0 = Some(point(5, 7100 + seed).as_slice().to_vec());
                cfg.record_wall_time = false;
                let trace = run(&prob, &cfg).map_err(|e| e.error)?;
                let g: Vec<f64> = trace.rows[..400].iter().map(|r| r.grad_norm_sq_oracle.unwrap()).collect();
                let ratio = prefix_mean(&g, 400) / prefix_mean(&g, 200);
                ratios.push(ratio);
                rows.push(json!({"seed": seed, "method": method, "ratio": ratio, "beta": trace.beta}));
            }
            medians.push((method, median(ratios)));
        }
        let worst = medians.iter().map(|(_, r)| *r).fold(0.0, f64::max);
        Ok((
            worst <= 0.625,
            medians
                .iter()
                .map(|(m, r)| format!("{m} median avg(400)/avg(200) {r:.3}"))
                .collect::<Vec<_>>()
                .join(", "),
            "<= 0.625 for each method (median of 5 instances, theory stepsizes)".into(),
            json!({"runs": rows, "kappa": RATE_KAPPA}),
        ))
    })();
    report(7, "rate trend", start, outcome)
}

const RATE_KAPPA: f64 = 1.0;

fn floor_problem(seed: u64) -> Result<QuadraticBilevel> {
    QuadraticBilevel::generate(&QuadraticSpec {
        upper_noise: 1.0,
        hessian_noise: 0.3,
        ..QuadraticSpec::new(3, 4, 2.0, 1.0, seed)
    })
}

pub fn stochastic_floor() -> CriterionReport {
    let start = Instant::now();
    let outcome = (|| {
        let k = FLOOR_K;
        let plateau = |prob: &QuadraticBilevel, batch: usize, seed: u64| -> Result<f64> {
            let mut cfg = RunConfig::stocbio(k, 10, 20, batch);
            cfg.beta = Some(FLOOR_BETA);
            cfg.seed = seed;
            cfg.record_wall_time = false;
            let trace = run(prob, &cfg).map_err(|e| e.error)?;
            let tail: Vec<f64> = trace.rows[k / 2..k].iter().map(|r| r.grad_norm_sq_oracle.unwrap()).collect();
            Ok(tail.iter().sum::<f64>() / tail.len() as f64)
        };
        let results: Vec<(f64, f64)> = (0..5u64)
            .into_par_iter()
            .map(|seed| {
                let prob = floor_problem(8000 + seed)?;
                Ok((plateau(&prob, 2, seed)?, plateau(&prob, 8, seed)?))
            })
            .collect::<Result<_>>()?;
        let ratios: Vec<f64> = results.iter().map(|(a, b)| a / b).collect();
        let med = median(ratios.clone());
        Ok((
            med >= 2.0,
            format!("median plateau ratio {med:.2}"),
            ">= 2 when (S, Df, Dg, B) go from 2 to 8".into(),
            json!({"plateaus": results, "ratios": ratios, "K": k, "beta": FLOOR_BETA}),
        ))
    })();
    report(8, "stochastic floor", start, outcome)
}

const FLOOR_K: usize = 2000;
const FLOOR_BETA: f64 = 0.05;

pub fn warm_start() -> CriterionReport {
    let start = Instant::now();
    let outcome = (|| {
        let cost = |prob: &QuadraticBilevel, x0: &DVector<f64>, warm: bool| -> Result<Option<u64>> {
            let mut cfg = RunConfig::aid(WARM_K, 5, 3);
            cfg.beta = Some(WARM_BETA);
            cfg.warm_start_y = warm;
            cfg.warm_start_v = warm;
            cfg.grad_threshold = Some(1e-3);
            cfg.x0 = Some(x0.as_slice().to_vec());
            cfg.record_wall_time = false;
            let trace = run(prob, &cfg).map_err(|e| e.error)?;
            Ok(match trace.stop {
                StopReason::Threshold => Some(trace.totals().hv_g),
                StopReason::Completed => None,
            })
        };
        let mut rows = Vec::new();
        let mut wins = 0;
        for seed in 0..10u64 {
            let prob = make_quadratic(5, 5, 10.0, 0.0, 9000 + seed)?;
            let x0 = point(5, 9100 + seed);
            let (w, c) = (cost(&prob, &x0, true)?, cost(&prob, &x0, false)?);
            // an unreached threshold counts as infinite cost
            let (wf, cf) = (w.map_or(f64::INFINITY, |v| v as f64), c.map_or(f64::INFINITY, |v| v as f64));
            if w.is_some() && wf <= cf {
                wins += 1;
            }
            rows.push(json!({"seed": seed, "warm_hv": w, "cold_hv": c}));
        }
        Ok((
            wins >= 5,
            format!("warm <= cold in {wins}/10 instances"),
            "median instance: warm hv_g <= cold hv_g to reach ||grad||^2 <= 1e-3".into(),
            json!({"instances": rows, "D": 5, "N": 3, "beta": WARM_BETA, "K_max": WARM_K}),
        ))
    })();
    report(9, "warm start", start, outcome)
}

const WARM_K: usize = 3000;
const WARM_BETA: f64 = 0.05;

fn tuple(c: CostCounters) -> String {
    format!("({}, {}, {}, {})", c.gc_f, c.gc_g, c.jv_g, c.hv_g)
}

pub fn counter_structure() -> CriterionReport {
    let start = Instant::now();
    let outcome = (|| {
        let prob = make_quadratic(3, 8, 10.0, 0.0, 10_000)?;
        let (d, n, k) = (10usize, 4usize, 6usize);
        let mut aid_cfg = RunConfig::aid(k, d, n);
        aid_cfg.warm_start_v = false;
        let aid = run(&prob, &aid_cfg).map_err(|e| e.error)?;
        let itd = run(&prob, &RunConfig::itd(k, d)).map_err(|e| e.error)?;
        let warm = run(&prob, &RunConfig::aid(k, d, n)).map_err(|e| e.error)?;
        let per_iter = |rows: &[bilevel_core::trace::TraceRow]| -> Vec<CostCounters> {
            let mut prev = CostCounters::default();
            rows[..k]
                .iter()
                .map(|r| {
                    let c = r.counters();
                    let step = c - prev;
                    prev = c;
                    step
                })
                .collect()
        };
        let (du, nu) = (d as u64, n as u64);
        let aid_ok = per_iter(&aid.rows).iter().all(|c| *c == CostCounters::new(2, du, 1, nu));
        let itd_ok = per_iter(&itd.rows).iter().all(|c| *c == CostCounters::new(2, du, du, du - 1));
        let warm_steps = per_iter(&warm.rows);
        let warm_ok = warm_steps[0] == CostCounters::new(2, du, 1, nu)
            && warm_steps[1..].iter().all(|c| *c == CostCounters::new(2, du, 1, nu + 1));
        let ordering = aid.totals().jv_g < itd.totals().jv_g && aid.totals().hv_g < itd.totals().hv_g;
        Ok((
            aid_ok && itd_ok && warm_ok && ordering,
            format!(
                "AID {}, ITD {} per iteration; warm AID +1 HVP: {warm_ok}",
                tuple(per_iter(&aid.rows)[0]),
                tuple(per_iter(&itd.rows)[0])
            ),
            "AID (2,D,1,N), ITD (2,D,D,D-1), D > N gives AID JV/HV < ITD".into(),
            json!({"D": d, "N": n, "aid_total": aid.totals(), "itd_total": itd.totals(), "warm_total": warm.totals()}),
        ))
    })();
    report(10, "counter structure", start, outcome)
}

pub fn hyper_cleaning() -> CriterionReport {
    let start = Instant::now();
    let outcome = (|| {
        let results: Vec<Value> = (0..5u64)
            .into_par_iter()
            .map(|seed| -> Result<Value> {
                let t0 = Instant::now();
                let prob = make_hyperclean(1000, 500, 20, 10, 0.4, 0.001, 11_000 + seed)?;
                let mut cfg = RunConfig::stocbio(500, CLEAN_D, CLEAN_Q, CLEAN_BATCH);
                cfg.beta = Some(CLEAN_BETA);
                cfg.seed = seed;
                cfg.record_wall_time = false;
                let trace = run(&prob, &cfg).map_err(|e| e.error)?;
                let init = trace.upper_values[0];
                let w = &trace.final_state.y_warm;
                let last = prob.upper_value(trace.final_x(), w, Samples::Full);
                let (corrupt, clean) = prob.weight_split(trace.final_x());
                Ok(json!({
                    "seed": seed,
                    "initial_val_loss": init,
                    "final_val_loss": last,
                    "reduction": 1.0 - last / init,
                    "weight_corrupted": corrupt,
                    "weight_clean": clean,
                    "val_accuracy": prob.validation_accuracy(w),
                    "seconds": t0.elapsed().as_secs_f64(),
                }))
            })
            .collect::<Result<_>>()?;
        let get = |key: &str| results.iter().map(|r| r[key].as_f64().unwrap()).collect::<Vec<_>>();
        let reduction = median(get("reduction"));
        let gap = median(
            get("weight_corrupted")
                .iter()
                .zip(get("weight_clean"))
                .map(|(c, k)| c - k)
                .collect(),
        );
        let slowest = get("seconds").into_iter().fold(0.0, f64::max);
        Ok((
            reduction >= 0.3 && gap < 0.0 && slowest < 60.0,
            format!("median loss reduction {:.1}%, median weight gap {gap:.3}, slowest run {slowest:.1}s", reduction * 100.0),
            "reduction >= 30%, corrupted mean sigma < clean, < 60 s".into(),
            json!({"runs": results, "D": CLEAN_D, "Q": CLEAN_Q, "batch": CLEAN_BATCH, "beta": CLEAN_BETA}),
        ))
    })();
    report(11, "hyper-cleaning", start, outcome)
}

const CLEAN_D: usize = 20;
const CLEAN_Q: usize = 10;
const CLEAN_BATCH: usize = 50;
const CLEAN_BETA: f64 = 500.0;

pub fn task_sampling_variance() -> CriterionReport {
    let start = Instant::now();
    let outcome = (|| {
        let prob = make_multitask(64, 5, 3, 4.0, 12_000)?;
        let x = point(5, 12_001);
        let full = prob.hypergradient(&x)?;
        let per_task: Vec<DVector<f64>> = (0..64).map(|i| prob.task_hypergradient(i, &x)).collect::<Result<_>>()?;
        let sigma2 = per_task.iter().map(|h| (h - &full).norm_squared()).sum::<f64>() / 64.0;
        let draws = 4000u64;
        let mut scaled = Vec::new();
        for b in [4usize, 16, 64] {
            let var = (0..draws)
                .map(|r| {
                    let mut rng = Streams::new(r).rng(Role::TaskBatch, b as u64);
                    let batch = bilevel_core::rng::sample_batch(64, b, &mut rng)?;
                    Ok((prob.batch_hypergradient(&x, &batch)? - &full).norm_squared())
                })
                .sum::<Result<f64>>()?
                / draws as f64;
            scaled.push(json!({"B": b, "variance": var, "variance_times_B": var * b as f64}));
        }
        let vb: Vec<f64> = scaled.iter().map(|s| s["variance_times_B"].as_f64().unwrap()).collect();
        let spread = vb.iter().copied().fold(0.0, f64::max) / vb.iter().copied().fold(f64::INFINITY, f64::min);
        let vs_theory = vb.iter().map(|v| (v / sigma2).max(sigma2 / v)).fold(0.0, f64::max);
        Ok((
            spread <= 2.0 && vs_theory <= 2.0,
            format!("max/min of variance*|B| {spread:.3}; worst vs sigma^2 {vs_theory:.3}"),
            "variance*|B| constant within a factor 2".into(),
            json!({"per_batch": scaled, "task_variance": sigma2}),
        ))
    })();
    report(12, "task-sampling variance", start, outcome)
}
