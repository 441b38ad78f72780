//! Built-in problem families and their JSON snapshots.

mod hyperclean;
mod multitask;
mod quadratic;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::problem::BilevelProblem;

pub use hyperclean::{make_hyperclean, HyperCleanProblem, HyperCleanSnapshot, HyperCleanSpec, CLASS_SEPARATION};
pub use multitask::{make_multitask, MultitaskQuadratic, MultitaskSnapshot, MultitaskSpec};
pub use quadratic::{make_quadratic, QuadraticBilevel, QuadraticNoise, QuadraticSnapshot, QuadraticSpec, UpperTerm};

/// A serialized problem instance, tagged by family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ProblemSnapshot {
    Quadratic(QuadraticSnapshot),
    Hyperclean(HyperCleanSnapshot),
    Multitask(MultitaskSnapshot),
}

/// Any of the built-in families.
#[derive(Debug, Clone)]
pub enum AnyProblem {
    Quadratic(QuadraticBilevel),
    Hyperclean(HyperCleanProblem),
    Multitask(MultitaskQuadratic),
}

impl AnyProblem {
    pub fn as_dyn(&self) -> &dyn BilevelProblem {
        match self {
            AnyProblem::Quadratic(p) => p,
            AnyProblem::Hyperclean(p) => p,
            AnyProblem::Multitask(p) => p,
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            AnyProblem::Quadratic(_) => "quadratic",
            AnyProblem::Hyperclean(_) => "hyperclean",
            AnyProblem::Multitask(_) => "multitask",
        }
    }

    pub fn snapshot(&self) -> ProblemSnapshot {
        match self {
            AnyProblem::Quadratic(p) => ProblemSnapshot::Quadratic(p.to_snapshot()),
            AnyProblem::Hyperclean(p) => ProblemSnapshot::Hyperclean(p.to_snapshot()),
            AnyProblem::Multitask(p) => ProblemSnapshot::Multitask(p.to_snapshot()),
        }
    }

    pub fn from_snapshot(s: &ProblemSnapshot) -> Result<Self> {
        Ok(match s {
            ProblemSnapshot::Quadratic(q) => AnyProblem::Quadratic(QuadraticBilevel::from_snapshot(q)?),
            ProblemSnapshot::Hyperclean(h) => AnyProblem::Hyperclean(HyperCleanProblem::from_snapshot(h)?),
            ProblemSnapshot::Multitask(m) => AnyProblem::Multitask(MultitaskQuadratic::from_snapshot(m)?),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.snapshot()).expect("snapshots always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let snap: ProblemSnapshot =
            serde_json::from_str(text).map_err(|e| invalid("problem", format!("bad problem document: {e}")))?;
        Self::from_snapshot(&snap)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid("problem", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

impl From<QuadraticBilevel> for AnyProblem {
    fn from(p: QuadraticBilevel) -> Self {
        AnyProblem::Quadratic(p)
    }
}

impl From<HyperCleanProblem> for AnyProblem {
    fn from(p: HyperCleanProblem) -> Self {
        AnyProblem::Hyperclean(p)
    }
}

impl From<MultitaskQuadratic> for AnyProblem {
    fn from(p: MultitaskQuadratic) -> Self {
        AnyProblem::Multitask(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::Samples;
    use nalgebra::DVector;

    fn same_behaviour(a: &AnyProblem, b: &AnyProblem) {
        let (a, b) = (a.as_dyn(), b.as_dyn());
        let x = DVector::from_fn(a.upper_dim(), |i, _| 0.1 * i as f64 - 0.3);
        let y = DVector::from_fn(a.lower_dim(), |i, _| 0.05 * i as f64);
        assert_eq!(a.lower_grad_y(&x, &y, Samples::Full), b.lower_grad_y(&x, &y, Samples::Full));
        assert_eq!(a.upper_grad_y(&x, &y, Samples::Full), b.upper_grad_y(&x, &y, Samples::Full));
        assert_eq!(a.lower_jvp(&x, &y, &y, Samples::Full), b.lower_jvp(&x, &y, &y, Samples::Full));
        assert_eq!(a.constants(), b.constants());
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let problems: Vec<AnyProblem> = vec![
            make_quadratic(3, 4, 10.0, 0.5, 1).unwrap().into(),
            make_hyperclean(20, 10, 3, 3, 0.3, 0.001, 2).unwrap().into(),
            make_multitask(3, 2, 2, 2.0, 3).unwrap().into(),
        ];
        for p in &problems {
            let text = p.to_json();
            assert!(text.contains(&format!("\"family\":\"{}\"", p.family())));
            let back = AnyProblem::from_json(&text).unwrap();
            same_behaviour(p, &back);
        }
    }

    #[test]
    fn unknown_family_rejected() {
        assert!(AnyProblem::from_json(r#"{"family":"cubic"}"#).is_err());
    }
}
