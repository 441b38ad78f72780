//! The `run`, `gradcheck` and `report` subcommands.

use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use bilevel_core::hypergrad::{aid_estimate, itd_estimate, stocbio_estimate, Method};
use bilevel_core::inner::gd_inner;
use bilevel_core::linalg::{gaussian_vector, rel_err};
use bilevel_core::neumann::{build_schedule, NeumannSchedule};
use bilevel_core::optimizers::{default_eta, run, RunError};
use bilevel_core::problems::AnyProblem;
use bilevel_core::theory::{compute_bounds, finite_diff_hypergrad, lower_solution, TheoryBounds, TheoryParams};
use bilevel_core::trace::{RunTrace, StopReason};
use bilevel_core::{BilevelError, CostCounters, SmoothnessConstants, Streams};

use crate::acceptance::{self, CriterionReport};
use crate::config::{ExperimentConfig, GradcheckConfig, LabeledRun};
use crate::error::{HarnessError, Result};

pub const DEFAULT_OUT: &str = "bilevel-out";

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Threshold,
    Diverged,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScheduleSummary {
    #[serde(flatten)]
    pub schedule: NeumannSchedule,
    pub total: usize,
}

/// One entry of `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub label: String,
    pub algorithm: Method,
    pub status: RunStatus,
    pub error: Option<String>,
    pub trace_file: String,
    /// Outer iterations actually performed.
    pub iterations: usize,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub theory_alpha: Option<f64>,
    pub theory_beta: Option<f64>,
    pub final_grad_norm_sq_oracle: Option<f64>,
    pub last_grad_norm_sq_est: Option<f64>,
    pub average_grad_norm_sq_oracle: Option<f64>,
    pub best_k: Option<usize>,
    pub final_x: Vec<f64>,
    pub best_x: Option<Vec<f64>>,
    pub counters: CostCounters,
    pub wall_ms: Option<f64>,
    pub neumann_schedule: Option<ScheduleSummary>,
    pub theory_bounds: Option<TheoryBounds>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunsSummary {
    pub family: &'static str,
    pub problem_file: String,
    pub constants: SmoothnessConstants,
    pub runs: Vec<RunSummary>,
}

impl RunsSummary {
    pub fn diverged(&self) -> Option<&RunSummary> {
        self.runs.iter().find(|r| matches!(r.status, RunStatus::Diverged))
    }

    pub fn failed(&self) -> Option<&RunSummary> {
        self.runs.iter().find(|r| matches!(r.status, RunStatus::Failed))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| HarnessError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    use std::io::Write;
    out.write_all(b"\n").map_err(|e| HarnessError::io(path, e))
}

fn thread_pool(parallel: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| HarnessError::config("--parallel", e.to_string()))
}

fn schedule_for(c: &SmoothnessConstants, run: &LabeledRun) -> Option<NeumannSchedule> {
    let cfg = &run.config;
    (cfg.algorithm == Method::Stocbio)
        .then(|| build_schedule(cfg.q?, cfg.b?, cfg.eta.unwrap_or_else(|| default_eta(c)), c.mu).ok())
        .flatten()
}

fn bounds_for(c: &SmoothnessConstants, run: &LabeledRun, alpha: f64, beta: f64) -> Option<TheoryBounds> {
    let cfg = &run.config;
    let params = TheoryParams {
        alpha,
        beta,
        eta: cfg.eta.unwrap_or_else(|| default_eta(c)),
        d: cfg.d,
        n: cfg.n.unwrap_or(0),
        q: cfg.q.unwrap_or(0),
        s: cfg.s.unwrap_or(1),
        df: cfg.df.unwrap_or(1),
        dg: cfg.dg.unwrap_or(1),
        b: cfg.b.unwrap_or(1),
    };
    compute_bounds(c, &params)
        .map_err(|e| log::warn!("run `{}`: no theory bounds: {e}", run.label))
        .ok()
}

fn summarize(
    prob: &AnyProblem,
    run: &LabeledRun,
    outcome: &std::result::Result<RunTrace, RunError>,
    trace_file: String,
    with_bounds: bool,
) -> RunSummary {
    let c = prob.as_dyn().constants();
    let (trace, status, error) = match outcome {
        Ok(t) => (
            Some(t),
            match t.stop {
                StopReason::Completed => RunStatus::Completed,
                StopReason::Threshold => RunStatus::Threshold,
            },
            None,
        ),
        Err(e) => (
            e.partial.as_deref(),
            match e.error {
                BilevelError::Divergence { .. } | BilevelError::NonFinite { .. } => RunStatus::Diverged,
                _ => RunStatus::Failed,
            },
            Some(e.to_string()),
        ),
    };
    let stepsizes = trace.map(|t| (t.alpha, t.beta));
    let last_est = trace.and_then(|t| t.rows.iter().rev().find_map(|r| r.grad_norm_sq_est));
    RunSummary {
        label: run.label.clone(),
        algorithm: run.config.algorithm,
        status,
        error,
        trace_file,
        iterations: trace.map_or(0, |t| t.rows.len().saturating_sub(1)),
        alpha: stepsizes.map(|s| s.0),
        beta: stepsizes.map(|s| s.1),
        theory_alpha: trace.map(|t| t.theory_alpha),
        theory_beta: trace.map(|t| t.theory_beta),
        final_grad_norm_sq_oracle: trace.and_then(|t| t.rows.last().and_then(|r| r.grad_norm_sq_oracle)),
        last_grad_norm_sq_est: last_est,
        average_grad_norm_sq_oracle: trace.and_then(RunTrace::average_oracle),
        best_k: trace.and_then(RunTrace::best_k),
        final_x: trace.map(|t| t.final_x().as_slice().to_vec()).unwrap_or_default(),
        best_x: trace.and_then(|t| t.best_x().map(|x| x.as_slice().to_vec())),
        counters: trace.map(RunTrace::totals).unwrap_or_default(),
        wall_ms: trace.and_then(|t| t.rows.last().and_then(|r| r.wall_ms)),
        neumann_schedule: schedule_for(c, run).map(|s| ScheduleSummary { total: s.total(), schedule: s }),
        theory_bounds: match stepsizes {
            Some((a, b)) if with_bounds => bounds_for(c, run, a, b),
            _ => None,
        },
    }
}

/// Executes every run block, writing `<label>.csv`, `problem.json` and
/// `summary.json` under `out`. Diverged runs keep their partial traces.
pub fn execute_runs(cfg: &ExperimentConfig, out: &Path, parallel: usize) -> Result<RunsSummary> {
    let prob = cfg.build_problem()?;
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let problem_file = out.join("problem.json");
    prob.save(&problem_file).map_err(|e| HarnessError::io(&problem_file, e))?;

    let outcomes: Vec<_> = thread_pool(parallel)?.install(|| {
        cfg.runs
            .par_iter()
            .map(|r| {
                log::info!("run `{}`: {} with K={}", r.label, r.config.algorithm, r.config.k);
                run(prob.as_dyn(), &r.config)
            })
            .collect()
    });

    let mut runs = Vec::with_capacity(outcomes.len());
    for (r, outcome) in cfg.runs.iter().zip(&outcomes) {
        let file = format!("{}.csv", r.label);
        let rows = match outcome {
            Ok(t) => Some(&t.rows),
            Err(e) => e.partial.as_ref().map(|t| &t.rows),
        };
        if let Some(rows) = rows {
            let path = out.join(&file);
            bilevel_core::trace::write_rows(rows, create(&path)?)?;
        }
        if let Err(e) = outcome {
            log::error!("run `{}`: {e}", r.label);
        }
        runs.push(summarize(&prob, r, outcome, file, cfg.report.bounds_check));
    }
    let summary = RunsSummary {
        family: prob.family(),
        problem_file: "problem.json".into(),
        constants: prob.as_dyn().constants().clone(),
        runs,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn output_dir(cfg: &ExperimentConfig, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.as_ref().map(|d| cfg.base_dir.join(d)))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// `run`: fails with the divergence (exit 3) after writing all outputs.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path, parallel: usize) -> Result<RunsSummary> {
    if cfg.runs.is_empty() {
        return Err(HarnessError::config("runs", "at least one run block is required"));
    }
    let summary = execute_runs(cfg, out, parallel)?;
    if let Some(bad) = summary.diverged().or_else(|| summary.failed()) {
        let label = bad.label.clone();
        let source = RunError {
            error: BilevelError::NonFinite {
                context: bad.error.clone().unwrap_or_default(),
            },
            partial: None,
        };
        return Err(match bad.status {
            RunStatus::Diverged => HarnessError::Divergence { label, source },
            _ => HarnessError::Run { label, source },
        });
    }
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckRow {
    pub method: Method,
    #[serde(rename = "D")]
    pub d: usize,
    /// CG steps for AID, truncation order for stocBiO.
    pub order: Option<usize>,
    pub rel_err_oracle: Option<f64>,
    pub rel_err_fd: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn failures(&self) -> Vec<&GradcheckRow> {
        self.rows.iter().filter(|r| !r.passed).collect()
    }

    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }
}

impl GradcheckRow {
    /// `AID-BiO D=5 N=3` style name for messages.
    pub fn label(&self) -> String {
        let order = match (self.method, self.order) {
            (Method::Aid, Some(n)) => format!(" N={n}"),
            (Method::Stocbio, Some(q)) => format!(" Q={q}"),
            _ => String::new(),
        };
        format!("{} D={}{order}", self.method, self.d)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>5} {:>5} {:>14} {:>14} {:>10}  result", "method", "D", "N/Q", "vs oracle", "vs fd", "threshold")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<8} {:>5} {:>5} {:>14} {:>14.3e} {:>10.1e}  {}",
                r.method.to_string(),
                r.d,
                r.order.map_or("-".into(), |n| n.to_string()),
                r.rel_err_oracle.map_or("-".into(), |e| format!("{e:.3e}")),
                r.rel_err_fd,
                r.threshold,
                if r.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Compares each configured estimator with the exact hypergradient (when
/// the problem has one) and central finite differences. A check passes when
/// its error against the exact hypergradient, or against finite differences
/// if there is none, is at most `max_rel_err`.
pub fn gradcheck(prob: &AnyProblem, g: &GradcheckConfig) -> Result<GradcheckReport> {
    let prob = prob.as_dyn();
    let c = prob.constants();
    let x = match &g.x {
        Some(v) if v.len() != prob.upper_dim() => {
            return Err(HarnessError::config("gradcheck.x", format!("expected {} entries, got {}", prob.upper_dim(), v.len())))
        }
        Some(v) => DVector::from_vec(v.clone()),
        None => gaussian_vector(prob.upper_dim(), &mut ChaCha8Rng::seed_from_u64(g.seed)),
    };
    let fd = finite_diff_hypergrad(prob, &x, g.fd_step)?;
    let oracle = prob.exact_oracle().map(|o| o.hypergradient(&x)).transpose()?;
    let y_star = lower_solution(prob, &x, 1e-12)?;
    let mut rows = Vec::new();
    for (i, check) in g.checks.iter().enumerate() {
        let y0 = match &check.y0 {
            Some(v) if v.len() != prob.lower_dim() => {
                return Err(HarnessError::config(
                    format!("gradcheck.checks[{i}].y0"),
                    format!("expected {} entries, got {}", prob.lower_dim(), v.len()),
                ))
            }
            Some(v) => DVector::from_vec(v.clone()),
            None => y_star.clone(),
        };
        let alpha = check.alpha.unwrap_or(1.0 / c.l);
        let mut counters = CostCounters::default();
        let traj = gd_inner(prob, &x, &y0, alpha, check.d, &mut counters)?;
        let (est, order) = match check.method {
            Method::Aid => {
                let n = check.n.unwrap_or(0);
                let zero = DVector::zeros(prob.lower_dim());
                (aid_estimate(prob, &x, traj.last(), &zero, n, 0.0, &mut counters)?, Some(n))
            }
            Method::Itd => (itd_estimate(prob, &x, &traj, &mut counters)?, None),
            Method::Stocbio => {
                let (q, b) = (check.q.unwrap_or(1), check.b.unwrap_or(1));
                let sched = build_schedule(q, b, check.eta.unwrap_or_else(|| default_eta(c)), c.mu)?;
                let streams = Streams::new(g.seed);
                (stocbio_estimate(prob, &x, traj.last(), &sched, b, b, &streams, &mut counters)?, Some(q))
            }
        };
        let rel_err_oracle = oracle.as_ref().map(|o| rel_err(&est.grad, o));
        let rel_err_fd = rel_err(&est.grad, &fd);
        let reference = rel_err_oracle.unwrap_or(rel_err_fd);
        rows.push(GradcheckRow {
            method: check.method,
            d: check.d,
            order,
            rel_err_oracle,
            rel_err_fd,
            threshold: check.max_rel_err,
            passed: reference <= check.max_rel_err,
        });
    }
    Ok(GradcheckReport { rows })
}

pub fn cmd_gradcheck(cfg: &ExperimentConfig) -> Result<GradcheckReport> {
    let g = cfg
        .gradcheck
        .as_ref()
        .ok_or_else(|| HarnessError::config("gradcheck", "the config has no gradcheck block"))?;
    gradcheck(&cfg.build_problem()?, g)
}

/// Everything `report` emits as `report.json`.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub passed: bool,
    pub criteria: Vec<CriterionReport>,
    pub runs: Option<RunsSummary>,
    pub gradcheck: Option<GradcheckReport>,
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.criteria {
            writeln!(f, "{}", c.line())?;
        }
        if let Some(runs) = &self.runs {
            for r in &runs.runs {
                write!(
                    f,
                    "run {:<16} {:<8} {:?}: final oracle ||grad||^2 {}, counters ({}, {}, {}, {})",
                    r.label,
                    r.algorithm.to_string(),
                    r.status,
                    r.final_grad_norm_sq_oracle.map_or("-".into(), |g| format!("{g:.3e}")),
                    r.counters.gc_f,
                    r.counters.gc_g,
                    r.counters.jv_g,
                    r.counters.hv_g,
                )?;
                if let Some(s) = &r.neumann_schedule {
                    write!(f, ", Neumann samples {}", s.total)?;
                }
                if let Some(b) = &r.theory_bounds {
                    write!(f, ", L_Phi {:.3e}", b.l_phi)?;
                }
                writeln!(f)?;
            }
        }
        if let Some(g) = &self.gradcheck {
            write!(f, "{g}")?;
        }
        let failed = self.criteria.iter().filter(|c| !c.passed).count();
        writeln!(f, "{} of {} criteria passed", self.criteria.len() - failed, self.criteria.len())
    }
}

/// `report`: the acceptance suite, plus the config's runs and gradient
/// checks when a config is given. Writes `report.json` under `out`.
pub fn cmd_report(cfg: Option<&ExperimentConfig>, out: &Path, parallel: usize) -> Result<Report> {
    let wanted = cfg.and_then(|c| c.report.criteria.clone());
    let criteria: Vec<CriterionReport> = acceptance::CRITERIA
        .iter()
        .filter(|(id, _)| wanted.as_ref().is_none_or(|w| w.contains(id)))
        .map(|(id, check)| {
            log::info!("criterion {id}");
            check()
        })
        .collect();
    let runs = match cfg {
        Some(c) if !c.runs.is_empty() => Some(execute_runs(c, out, parallel)?),
        _ => None,
    };
    let gradcheck = match cfg {
        Some(c) if c.report.gradient_check && c.gradcheck.is_some() => Some(cmd_gradcheck(c)?),
        _ => None,
    };
    let passed = criteria.iter().all(|c| c.passed)
        && gradcheck.as_ref().is_none_or(GradcheckReport::passed)
        && runs.as_ref().is_none_or(|r| r.diverged().is_none() && r.failed().is_none());
    let report = Report {
        passed,
        criteria,
        runs,
        gradcheck,
    };
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}
