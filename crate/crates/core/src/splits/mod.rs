//! Case-level split plans: fixed test set, Monte Carlo folds, nested
//! fraction subsets and cross-domain assignments.

mod io;
mod leakage;
mod ops;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use leakage::{verify_no_leakage, LeakageReport, Violation};
pub use ops::{
    case_masses, make_cross_domain_plan, make_folds, make_scaling_plan, make_test_split, select_case_subset,
    subsample_fraction, CrossDomainParams, FoldOptions, ScalingParams, TestSplit,
};

pub const PLAN_SCHEMA_VERSION: u32 = 1;

/// Dataset fractions of the scaling experiment.
pub const FRACTION_LADDER: [f64; 4] = [0.001, 0.01, 0.1, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PlanKind {
    Scaling,
    CrossDomain,
}

impl PlanKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PlanKind::Scaling => "scaling",
            PlanKind::CrossDomain => "crossdomain",
        }
    }
}

impl std::str::FromStr for PlanKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "scaling" => Ok(PlanKind::Scaling),
            "crossdomain" => Ok(PlanKind::CrossDomain),
            other => Err(crate::Error::invalid("kind", format!("unknown plan kind `{other}`"))),
        }
    }
}

/// Annotation-id subset of a fold's training pool at one fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionSubset {
    pub fraction: f64,
    pub annotation_ids: Vec<String>,
    /// Set when a class had to be kept at one sample to stay present.
    pub floored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub fold_index: usize,
    pub train_cases: BTreeSet<String>,
    pub val_cases: BTreeSet<String>,
    pub subsets: Vec<FractionSubset>,
}

impl FoldSpec {
    pub fn subset(&self, fraction: f64) -> Option<&FractionSubset> {
        self.subsets.iter().find(|s| s.fraction == fraction)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub kind: PlanKind,
    pub seed: u64,
    pub dataset: String,
    /// Fixed test cases: the scaling test set or the in-domain holdout.
    pub test_cases: BTreeSet<String>,
    pub folds: Vec<FoldSpec>,
    pub fractions: Vec<f64>,
    pub train_domain: Option<String>,
    /// Out-of-domain test cases keyed by domain (cross-domain plans only).
    pub ood_tests: BTreeMap<String, BTreeSet<String>>,
    /// Annotation mass requested for the test set and the mass achieved.
    pub test_target: f64,
    pub test_mass: usize,
    pub total_mass: usize,
    pub flags: Vec<String>,
}

/// One training session enumerated by a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub fold_index: usize,
    pub fraction: f64,
}

impl SplitPlan {
    pub fn sessions(&self) -> Vec<Session> {
        let mut out = Vec::new();
        for fold in &self.folds {
            for s in &fold.subsets {
                out.push(Session {
                    fold_index: fold.fold_index,
                    fraction: s.fraction,
                });
            }
        }
        out
    }

    pub fn fold(&self, index: usize) -> crate::Result<&FoldSpec> {
        self.folds
            .iter()
            .find(|f| f.fold_index == index)
            .ok_or_else(|| crate::Error::invalid("fold", format!("fold {index} not in plan")))
    }

    /// Test sets as (test domain, cases, in-domain flag).
    pub fn test_sets(&self) -> Vec<(String, &BTreeSet<String>, bool)> {
        let mut out = vec![(self.train_domain.clone().unwrap_or_default(), &self.test_cases, true)];
        for (d, cases) in &self.ood_tests {
            out.push((d.clone(), cases, false));
        }
        out
    }
}
