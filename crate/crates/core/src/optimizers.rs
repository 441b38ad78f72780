//! Outer loops: AID-BiO and ITD-BiO (deterministic) and stocBiO.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{invalid, BilevelError, Result};
use crate::hypergrad::{aid_estimate, itd_estimate, stocbio_estimate, HypergradEstimate, Method};
use crate::inner::{gd_inner, sgd_inner};
use crate::neumann::{build_schedule, NeumannSchedule};
use crate::problem::{BilevelProblem, CostCounters, Samples, SmoothnessConstants};
use crate::rng::Streams;
use crate::trace::{IterateState, RunTrace, StopReason, TraceRow};

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

/// Parameters of one optimizer run. Missing stepsizes fall back to
/// [`default_stepsizes`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Method,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "N", default)]
    pub n: Option<usize>,
    #[serde(rename = "Q", default)]
    pub q: Option<usize>,
    #[serde(rename = "B", default)]
    pub b: Option<usize>,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(rename = "S", default)]
    pub s: Option<usize>,
    #[serde(rename = "Df", default)]
    pub df: Option<usize>,
    #[serde(rename = "Dg", default)]
    pub dg: Option<usize>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default = "yes")]
    pub warm_start_y: bool,
    #[serde(default = "yes")]
    pub warm_start_v: bool,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate the exact oracle every this many iterations (and at the end).
    #[serde(default = "one")]
    pub oracle_every: usize,
    /// CG early-exit residual; 0 runs exactly `N` steps.
    #[serde(default)]
    pub cg_tol: f64,
    /// Stop once the oracle `‖∇Φ(x_k)‖²` falls to this value.
    #[serde(default)]
    pub grad_threshold: Option<f64>,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub y0: Option<Vec<f64>>,
    #[serde(default = "yes")]
    pub record_wall_time: bool,
}

impl RunConfig {
    /// A config with every optional field at its default.
    pub fn new(algorithm: Method, k: usize, d: usize) -> Self {
        Self {
            algorithm,
            k,
            d,
            n: None,
            q: None,
            b: None,
            eta: None,
            s: None,
            df: None,
            dg: None,
            alpha: None,
            beta: None,
            warm_start_y: true,
            warm_start_v: true,
            seed: 0,
            oracle_every: 1,
            cg_tol: 0.0,
            grad_threshold: None,
            x0: None,
            y0: None,
            record_wall_time: true,
        }
    }

    pub fn aid(k: usize, d: usize, n: usize) -> Self {
        Self {
            n: Some(n),
            ..Self::new(Method::Aid, k, d)
        }
    }

    pub fn itd(k: usize, d: usize) -> Self {
        Self::new(Method::Itd, k, d)
    }

    /// stocBiO with `S = Df = Dg = B = batch`.
    pub fn stocbio(k: usize, d: usize, q: usize, batch: usize) -> Self {
        Self {
            q: Some(q),
            b: Some(batch),
            s: Some(batch),
            df: Some(batch),
            dg: Some(batch),
            ..Self::new(Method::Stocbio, k, d)
        }
    }

    /// Checks that the fields the algorithm needs are present and sane.
    pub fn validate(&self) -> Result<()> {
        let need = |v: Option<usize>, key: &'static str| match v {
            Some(0) => Err(invalid(key, "must be at least 1")),
            Some(_) => Ok(()),
            None => Err(invalid(key, format!("required for {}", self.algorithm))),
        };
        match self.algorithm {
            Method::Aid => {
                if self.n.is_none() {
                    return Err(invalid("N", "required for AID-BiO"));
                }
            }
            Method::Itd => {}
            Method::Stocbio => {
                need(self.q, "Q")?;
                need(self.b, "B")?;
                need(self.s, "S")?;
                need(self.df, "Df")?;
                need(self.dg, "Dg")?;
            }
        }
        for (key, v) in [("alpha", self.alpha), ("beta", self.beta), ("eta", self.eta)] {
            if let Some(v) = v {
                if !v.is_finite() || v <= 0.0 {
                    return Err(invalid(key, format!("{v} must be positive")));
                }
            }
        }
        if self.oracle_every == 0 {
            return Err(invalid("oracle_every", "must be at least 1"));
        }
        if self.cg_tol.is_nan() || self.cg_tol < 0.0 {
            return Err(invalid("cg_tol", "must be non-negative"));
        }
        Ok(())
    }

    fn start(&self, p: usize, q: usize) -> Result<(DVector<f64>, DVector<f64>)> {
        let x = match &self.x0 {
            Some(v) if v.len() != p => return Err(invalid("x0", format!("expected {p} entries, got {}", v.len()))),
            Some(v) => DVector::from_vec(v.clone()),
            None => DVector::zeros(p),
        };
        let y = match &self.y0 {
            Some(v) if v.len() != q => return Err(invalid("y0", format!("expected {q} entries, got {}", v.len()))),
            Some(v) => DVector::from_vec(v.clone()),
            None => DVector::zeros(q),
        };
        Ok((x, y))
    }
}

/// Theory stepsizes `(α, β)`: `(1/L, 1/(8L_Φ))` for AID-BiO,
/// `(1/L, 1/(4L_Φ))` for ITD-BiO and `(2/(L+μ), 1/(4L_Φ))` for stocBiO.
pub fn default_stepsizes(c: &SmoothnessConstants, method: Method) -> Result<(f64, f64)> {
    c.validate()?;
    let l_phi = c.l_phi();
    Ok(match method {
        Method::Aid => (1.0 / c.l, 1.0 / (8.0 * l_phi)),
        Method::Itd => (1.0 / c.l, 1.0 / (4.0 * l_phi)),
        Method::Stocbio => (2.0 / (c.l + c.mu), 1.0 / (4.0 * l_phi)),
    })
}

/// Neumann step used when the config leaves `eta` unset.
pub fn default_eta(c: &SmoothnessConstants) -> f64 {
    0.5 / c.l
}

/// A failed run, with the rows recorded before the failure.
#[derive(Debug, Clone, Error)]
#[error("{error}")]
pub struct RunError {
    pub error: BilevelError,
    pub partial: Option<Box<RunTrace>>,
}

impl From<BilevelError> for RunError {
    fn from(error: BilevelError) -> Self {
        Self { error, partial: None }
    }
}

pub fn run_aid_bio<P: BilevelProblem + ?Sized>(prob: &P, cfg: &RunConfig) -> std::result::Result<RunTrace, RunError> {
    run_as(prob, cfg, Method::Aid)
}

pub fn run_itd_bio<P: BilevelProblem + ?Sized>(prob: &P, cfg: &RunConfig) -> std::result::Result<RunTrace, RunError> {
    run_as(prob, cfg, Method::Itd)
}

pub fn run_stocbio<P: BilevelProblem + ?Sized>(prob: &P, cfg: &RunConfig) -> std::result::Result<RunTrace, RunError> {
    run_as(prob, cfg, Method::Stocbio)
}

/// Runs the algorithm named in the config.
pub fn run<P: BilevelProblem + ?Sized>(prob: &P, cfg: &RunConfig) -> std::result::Result<RunTrace, RunError> {
    run_as(prob, cfg, cfg.algorithm)
}

struct Oracle {
    grad_sq: Option<f64>,
    y_star: Option<DVector<f64>>,
}

fn oracle_at<P: BilevelProblem + ?Sized>(prob: &P, x: &DVector<f64>, wanted: bool) -> Result<Oracle> {
    match prob.exact_oracle() {
        Some(o) if wanted => Ok(Oracle {
            grad_sq: Some(o.hypergradient(x)?.norm_squared()),
            y_star: Some(o.lower_solution(x)?),
        }),
        _ => Ok(Oracle {
            grad_sq: None,
            y_star: None,
        }),
    }
}

fn run_as<P: BilevelProblem + ?Sized>(prob: &P, cfg: &RunConfig, method: Method) -> std::result::Result<RunTrace, RunError> {
    cfg.validate()?;
    let c = prob.constants();
    let (theory_alpha, theory_beta) = default_stepsizes(c, method)?;
    let alpha = cfg.alpha.unwrap_or(theory_alpha);
    let beta = cfg.beta.unwrap_or(theory_beta);
    if alpha > theory_alpha {
        log::warn!("{method}: inner stepsize {alpha:.6e} exceeds the theory value {theory_alpha:.6e}");
    }
    log::info!("{method}: theory stepsizes alpha={theory_alpha:.6e} beta={theory_beta:.6e}, using alpha={alpha:.6e} beta={beta:.6e}");
    let schedule: Option<NeumannSchedule> = match method {
        Method::Stocbio => Some(build_schedule(
            cfg.q.unwrap_or(1),
            cfg.b.unwrap_or(1),
            cfg.eta.unwrap_or_else(|| default_eta(c)),
            c.mu,
        )?),
        _ => None,
    };
    let (x0, y0) = cfg.start(prob.upper_dim(), prob.lower_dim())?;
    let q = prob.lower_dim();

    let mut state = IterateState {
        k: 0,
        x: x0,
        y_warm: y0.clone(),
        v_warm: (method == Method::Aid).then(|| DVector::zeros(q)),
        counters: CostCounters::default(),
    };
    let mut trace = RunTrace {
        method,
        rows: Vec::with_capacity(cfg.k + 1),
        iterates: Vec::with_capacity(cfg.k + 1),
        upper_values: Vec::with_capacity(cfg.k + 1),
        alpha,
        beta,
        theory_alpha,
        theory_beta,
        stop: StopReason::Completed,
        final_state: state.clone(),
    };
    let clock = Instant::now();
    let wall = |record: bool| record.then(|| clock.elapsed().as_secs_f64() * 1e3);

    let fail = |error: BilevelError, mut trace: RunTrace, state: &IterateState| {
        trace.final_state = state.clone();
        RunError {
            error,
            partial: Some(Box::new(trace)),
        }
    };

    for k in 0..cfg.k {
        state.k = k;
        let wanted = k % cfg.oracle_every == 0 || cfg.grad_threshold.is_some();
        let oracle = match oracle_at(prob, &state.x, wanted) {
            Ok(o) => o,
            Err(e) => return Err(fail(e, trace, &state)),
        };
        if let (Some(t), Some(g)) = (cfg.grad_threshold, oracle.grad_sq) {
            if g <= t {
                trace.stop = StopReason::Threshold;
                break;
            }
        }
        let y_init = if cfg.warm_start_y { state.y_warm.clone() } else { y0.clone() };
        let upper_value = prob.upper_value(&state.x, &y_init, Samples::Full);
        let step = iterate(
            prob,
            cfg,
            method,
            alpha,
            schedule.as_ref(),
            &state.x,
            &y_init,
            state.v_warm.as_ref(),
            k,
            &mut state.counters,
        );
        let (est, y_d) = match step {
            Ok(v) => v,
            Err(e) => return Err(fail(e, trace, &state)),
        };
        let tracking_err = oracle.y_star.as_ref().map(|ys| (&y_d - ys).norm());
        trace.rows.push(TraceRow {
            k,
            grad_norm_sq_est: Some(est.grad.norm_squared()),
            grad_norm_sq_oracle: oracle.grad_sq,
            tracking_err,
            inner_diag: est.inner_diag(),
            gc_f: state.counters.gc_f,
            gc_g: state.counters.gc_g,
            jv_g: state.counters.jv_g,
            hv_g: state.counters.hv_g,
            wall_ms: wall(cfg.record_wall_time),
        });
        trace.iterates.push(state.x.clone());
        trace.upper_values.push(upper_value);

        let next = &state.x - &est.grad * beta;
        if !next.iter().all(|v| v.is_finite()) {
            let err = BilevelError::Divergence {
                step: k,
                norm: next.norm(),
            };
            return Err(fail(err, trace, &state));
        }
        state.x = next;
        state.y_warm = y_d;
        if method == Method::Aid && cfg.warm_start_v {
            state.v_warm = est.v_out;
        }
        state.k = k + 1;
    }

    // final row at the last iterate
    let oracle = match oracle_at(prob, &state.x, true) {
        Ok(o) => o,
        Err(e) => return Err(fail(e, trace, &state)),
    };
    let y_last = if cfg.warm_start_y { &state.y_warm } else { &y0 };
    trace.upper_values.push(prob.upper_value(&state.x, y_last, Samples::Full));
    trace.rows.push(TraceRow {
        k: state.k,
        grad_norm_sq_est: None,
        grad_norm_sq_oracle: oracle.grad_sq,
        tracking_err: None,
        inner_diag: None,
        gc_f: state.counters.gc_f,
        gc_g: state.counters.gc_g,
        jv_g: state.counters.jv_g,
        hv_g: state.counters.hv_g,
        wall_ms: wall(cfg.record_wall_time),
    });
    trace.iterates.push(state.x.clone());
    trace.final_state = state;
    Ok(trace)
}

#[allow(clippy::too_many_arguments)]
fn iterate<P: BilevelProblem + ?Sized>(
    prob: &P,
    cfg: &RunConfig,
    method: Method,
    alpha: f64,
    schedule: Option<&NeumannSchedule>,
    x: &DVector<f64>,
    y_init: &DVector<f64>,
    v_warm: Option<&DVector<f64>>,
    k: usize,
    counters: &mut CostCounters,
) -> Result<(HypergradEstimate, DVector<f64>)> {
    match method {
        Method::Aid => {
            let traj = gd_inner(prob, x, y_init, alpha, cfg.d, counters)?;
            let zero = DVector::zeros(prob.lower_dim());
            let v0 = match v_warm {
                Some(v) if cfg.warm_start_v => v,
                _ => &zero,
            };
            let est = aid_estimate(prob, x, traj.last(), v0, cfg.n.unwrap_or(0), cfg.cg_tol, counters)?;
            Ok((est, traj.into_last()))
        }
        Method::Itd => {
            let traj = gd_inner(prob, x, y_init, alpha, cfg.d, counters)?;
            let est = itd_estimate(prob, x, &traj, counters)?;
            Ok((est, traj.into_last()))
        }
        Method::Stocbio => {
            let streams = Streams::new(cfg.seed).at_iteration(k as u64);
            let sched = schedule.expect("stocBiO runs build a schedule");
            let y = sgd_inner(prob, x, y_init, alpha, cfg.d, cfg.s.unwrap_or(1), &streams, counters)?;
            let est = stocbio_estimate(prob, x, &y, sched, cfg.df.unwrap_or(1), cfg.dg.unwrap_or(1), &streams, counters)?;
            Ok((est, y))
        }
    }
}
