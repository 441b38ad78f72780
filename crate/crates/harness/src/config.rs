//! The JSON experiment document.
//!
//! ```json
//! {
//!   "problem": {"family": "quadratic", "p": 5, "q": 5, "kappa": 10, "seed": 1},
//!   "runs": [
//!     {"label": "aid", "algorithm": "aid", "K": 200, "D": 20, "N": 5},
//!     {"label": "itd", "algorithm": "itd", "K": 200, "D": 20}
//!   ],
//!   "output_dir": "out/quadratic",
//!   "report": {"bounds_check": true, "gradient_check": true},
//!   "gradcheck": {"checks": [{"method": "aid", "D": 50, "N": 50, "max_rel_err": 1e-6}]}
//! }
//! ```
//!
//! `problem` is either a family block (`quadratic`, `hyperclean`,
//! `multitask`, with that family's generator parameters) or
//! `{"family": "snapshot", "path": "problem.json"}`; relative paths resolve
//! against the config file's directory. Each run block is a labelled
//! optimizer configuration.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use bilevel_core::hypergrad::Method;
use bilevel_core::optimizers::RunConfig;
use bilevel_core::problems::{AnyProblem, HyperCleanProblem, HyperCleanSpec, MultitaskQuadratic, MultitaskSpec, QuadraticBilevel, QuadraticSpec};
use bilevel_core::BilevelError;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ProblemConfig {
    Quadratic(QuadraticSpec),
    Hyperclean(HyperCleanSpec),
    Multitask(MultitaskSpec),
    Snapshot { path: PathBuf },
}

impl ProblemConfig {
    pub fn build(&self, base_dir: &Path) -> Result<AnyProblem> {
        let built = match self {
            ProblemConfig::Quadratic(s) => QuadraticBilevel::generate(s).map(AnyProblem::from),
            ProblemConfig::Hyperclean(s) => HyperCleanProblem::generate(s).map(AnyProblem::from),
            ProblemConfig::Multitask(s) => MultitaskQuadratic::generate(s).map(AnyProblem::from),
            ProblemConfig::Snapshot { path } => AnyProblem::load(&base_dir.join(path)),
        };
        built.map_err(|e| core_to_config("problem", e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabeledRun {
    pub label: String,
    #[serde(flatten)]
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ReportToggles {
    /// Embed the analysis constants for every run in summaries and reports.
    #[serde(default = "yes")]
    pub bounds_check: bool,
    /// Run the `gradcheck` block as part of `report`.
    #[serde(default = "yes")]
    pub gradient_check: bool,
    /// Restrict `report` to these criterion numbers.
    #[serde(default)]
    pub criteria: Option<Vec<u32>>,
}

impl Default for ReportToggles {
    fn default() -> Self {
        Self {
            bounds_check: true,
            gradient_check: true,
            criteria: None,
        }
    }
}

fn yes() -> bool {
    true
}

fn default_fd_step() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Evaluation point; a seeded Gaussian point when absent.
    #[serde(default)]
    pub x: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    pub checks: Vec<GradcheckEntry>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckEntry {
    pub method: Method,
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
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Inner starting point; the exact lower solution when absent.
    #[serde(default)]
    pub y0: Option<Vec<f64>>,
    pub max_rel_err: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    problem: Value,
    #[serde(default)]
    runs: Vec<Value>,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(default)]
    report: ReportToggles,
    #[serde(default)]
    gradcheck: Option<GradcheckConfig>,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub runs: Vec<LabeledRun>,
    pub output_dir: Option<PathBuf>,
    pub report: ReportToggles,
    pub gradcheck: Option<GradcheckConfig>,
    /// Directory that relative paths in the document resolve against.
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base_dir: PathBuf) -> Result<Self> {
        let raw: RawConfig = serde_json::from_str(text).map_err(|e| serde_to_config("config", e))?;
        let problem: ProblemConfig = serde_json::from_value(raw.problem).map_err(|e| serde_to_config("problem", e))?;
        let mut runs = Vec::with_capacity(raw.runs.len());
        let mut seen = HashSet::new();
        for (i, block) in raw.runs.into_iter().enumerate() {
            let run = parse_run(block, i)?;
            if !seen.insert(run.label.clone()) {
                return Err(HarnessError::config(format!("runs[{i}].label"), format!("duplicate label `{}`", run.label)));
            }
            runs.push(run);
        }
        if let Some(g) = &raw.gradcheck {
            if g.fd_step.is_nan() || g.fd_step <= 0.0 {
                return Err(HarnessError::config("gradcheck.fd_step", "must be positive"));
            }
            for (i, c) in g.checks.iter().enumerate() {
                if c.max_rel_err.is_nan() || c.max_rel_err < 0.0 {
                    return Err(HarnessError::config(format!("gradcheck.checks[{i}].max_rel_err"), "must be non-negative"));
                }
                let needs = match c.method {
                    Method::Aid => [("N", c.n)].to_vec(),
                    Method::Itd => Vec::new(),
                    Method::Stocbio => [("Q", c.q), ("B", c.b)].to_vec(),
                };
                for (key, v) in needs {
                    if v.is_none() {
                        return Err(HarnessError::config(format!("gradcheck.checks[{i}].{key}"), format!("required for {}", c.method)));
                    }
                }
            }
        }
        Ok(Self {
            problem,
            runs,
            output_dir: raw.output_dir,
            report: raw.report,
            gradcheck: raw.gradcheck,
            base_dir,
        })
    }

    /// Replaces the seed of every run block.
    pub fn override_seed(&mut self, seed: u64) {
        for run in &mut self.runs {
            run.config.seed = seed;
        }
        if let Some(g) = &mut self.gradcheck {
            g.seed = seed;
        }
    }

    pub fn build_problem(&self) -> Result<AnyProblem> {
        self.problem.build(&self.base_dir)
    }
}

fn parse_run(block: Value, i: usize) -> Result<LabeledRun> {
    let Value::Object(mut map) = block else {
        return Err(HarnessError::config(format!("runs[{i}]"), "run block must be an object"));
    };
    let label = match map.remove("label") {
        Some(Value::String(s)) => s,
        Some(_) => return Err(HarnessError::config(format!("runs[{i}].label"), "must be a string")),
        None => return Err(HarnessError::config(format!("runs[{i}].label"), "missing field `label`")),
    };
    if label.is_empty() || !label.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
        return Err(HarnessError::config(
            format!("runs[{i}].label"),
            format!("`{label}` must be non-empty and use only letters, digits, '-', '_' or '.'"),
        ));
    }
    let config: RunConfig = serde_json::from_value(Value::Object(map)).map_err(|e| serde_to_config(&format!("runs[{i}]"), e))?;
    config.validate().map_err(|e| core_to_config(&format!("runs[{i}]"), e))?;
    Ok(LabeledRun { label, config })
}

/// Serde reports the offending field in its message (`unknown field `x``,
/// `missing field `K``), so the section name plus the message names the key.
fn serde_to_config(section: &str, e: serde_json::Error) -> HarnessError {
    let msg = e.to_string();
    let field = msg.split('`').nth(1).filter(|_| msg.contains("field `"));
    match field {
        Some(f) => HarnessError::config(format!("{section}.{f}"), msg),
        None => HarnessError::config(section, msg),
    }
}

fn core_to_config(section: &str, e: BilevelError) -> HarnessError {
    match &e {
        BilevelError::InvalidParameter { name, .. } => HarnessError::config(format!("{section}.{name}"), e.to_string()),
        _ => HarnessError::config(section, e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(text, PathBuf::new())
    }

    #[test]
    fn minimal_document() {
        let cfg = parse(
            r#"{"problem": {"family": "quadratic", "p": 3, "q": 4, "kappa": 5},
                "runs": [{"label": "a", "algorithm": "aid", "K": 3, "D": 2, "N": 2}]}"#,
        )
        .unwrap();
        assert_eq!(cfg.runs[0].label, "a");
        assert_eq!(cfg.runs[0].config, RunConfig::aid(3, 2, 2));
        assert!(cfg.report.bounds_check);
        let prob = cfg.build_problem().unwrap();
        assert_eq!(prob.as_dyn().upper_dim(), 3);
    }

    fn key_of(text: &str) -> String {
        match parse(text).unwrap_err() {
            HarnessError::Config { key, .. } => key,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn errors_name_the_key() {
        let prob = r#""problem": {"family": "quadratic", "p": 3, "q": 4}"#;
        assert_eq!(key_of(&format!(r#"{{{prob}, "runs": [{{"label": "a", "algorithm": "aid", "D": 2, "N": 2}}]}}"#)), "runs[0].K");
        assert_eq!(
            key_of(&format!(r#"{{{prob}, "runs": [{{"label": "a", "algorithm": "aid", "K": 1, "D": 2}}]}}"#)),
            "runs[0].N"
        );
        assert_eq!(
            key_of(&format!(r#"{{{prob}, "runs": [{{"label": "a", "algorithm": "itd", "K": 1, "D": 2, "bogus": 1}}]}}"#)),
            "runs[0].bogus"
        );
        assert_eq!(
            key_of(&format!(r#"{{{prob}, "runs": [{{"label": "a", "algorithm": "itd", "K": 1, "D": 2, "beta": -1}}]}}"#)),
            "runs[0].beta"
        );
        assert_eq!(key_of(r#"{"problem": {"family": "quadratic", "p": 3, "q": 4, "kapa": 2}}"#), "problem.kapa");
        assert_eq!(key_of(r#"{"problem": {"family": "quadratic", "p": 3, "q": 4}, "extra": 1}"#), "config.extra");
    }

    #[test]
    fn duplicate_labels_rejected() {
        let text = r#"{"problem": {"family": "quadratic", "p": 3, "q": 4},
            "runs": [{"label": "a", "algorithm": "itd", "K": 1, "D": 1},
                     {"label": "a", "algorithm": "itd", "K": 1, "D": 1}]}"#;
        assert_eq!(key_of(text), "runs[1].label");
    }

    #[test]
    fn unknown_family_rejected() {
        assert!(key_of(r#"{"problem": {"family": "cubic"}}"#).starts_with("problem"));
    }

    #[test]
    fn seed_override_applies_to_every_run() {
        let mut cfg = parse(
            r#"{"problem": {"family": "quadratic", "p": 3, "q": 4},
                "runs": [{"label": "a", "algorithm": "itd", "K": 1, "D": 1, "seed": 3},
                         {"label": "b", "algorithm": "itd", "K": 1, "D": 1}]}"#,
        )
        .unwrap();
        cfg.override_seed(42);
        assert!(cfg.runs.iter().all(|r| r.config.seed == 42));
    }
}
