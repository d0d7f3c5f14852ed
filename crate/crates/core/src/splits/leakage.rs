use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::SplitPlan;
use crate::ingest::DatasetManifest;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// A case assigned to more than one role; `roles` lists every role it
    /// holds, qualified by fold where relevant.
    Overlap { case_id: String, roles: Vec<String> },
    /// An annotation whose case holds no role in the listed folds.
    Orphan {
        annotation_id: String,
        case_id: String,
        folds: Vec<usize>,
    },
    /// A plan case that does not occur in the manifest.
    UnknownCase { case_id: String },
    /// A fraction subset naming an annotation outside the fold's training cases.
    SubsetOutsideTrain { fold_index: usize, annotation_id: String },
    /// An out-of-domain test set holding a case from another domain.
    DomainMismatch { case_id: String, expected: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub violations: Vec<Violation>,
}

impl LeakageReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks role disjointness per fold, annotation coverage, subset
/// containment and domain consistency. Violations are grouped per case
/// (overlaps) and per annotation (orphans).
pub fn verify_no_leakage(plan: &SplitPlan, manifest: &DatasetManifest) -> LeakageReport {
    let mut violations = Vec::new();
    let case_domain: BTreeMap<&str, &str> =
        manifest.records.iter().map(|r| (r.case_id.as_str(), r.domain.as_str())).collect();
    let in_scope = |domain: &str| match plan.kind {
        super::PlanKind::Scaling => true,
        super::PlanKind::CrossDomain => {
            plan.train_domain.as_deref() == Some(domain) || plan.ood_tests.contains_key(domain)
        }
    };

    let mut plan_cases: BTreeSet<&str> = plan.test_cases.iter().map(String::as_str).collect();
    for cases in plan.ood_tests.values() {
        plan_cases.extend(cases.iter().map(String::as_str));
    }
    for f in &plan.folds {
        plan_cases.extend(f.train_cases.iter().chain(&f.val_cases).map(String::as_str));
    }
    for c in &plan_cases {
        if !case_domain.contains_key(c) {
            violations.push(Violation::UnknownCase { case_id: c.to_string() });
        }
    }

    // role membership per case, across all folds
    let mut roles: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    let mut conflicted: BTreeSet<&str> = BTreeSet::new();
    let shared: Vec<(String, &BTreeSet<String>)> = std::iter::once(("test".to_string(), &plan.test_cases))
        .chain(plan.ood_tests.iter().map(|(d, c)| (format!("ood_test[{d}]"), c)))
        .collect();
    let folds: Vec<Option<&super::FoldSpec>> =
        if plan.folds.is_empty() { vec![None] } else { plan.folds.iter().map(Some).collect() };
    let mut orphan_folds: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for fold in &folds {
        let mut per_fold: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        for (name, cases) in &shared {
            for c in cases.iter() {
                per_fold.entry(c).or_default().push(name.clone());
            }
        }
        if let Some(f) = fold {
            for c in &f.train_cases {
                per_fold.entry(c).or_default().push(format!("fold{}.train", f.fold_index));
            }
            for c in &f.val_cases {
                per_fold.entry(c).or_default().push(format!("fold{}.val", f.fold_index));
            }
        }
        for (c, r) in &per_fold {
            if r.len() > 1 {
                conflicted.insert(c);
            }
            roles.entry(c).or_default().extend(r.iter().cloned());
        }
        for rec in &manifest.records {
            if in_scope(&rec.domain) && !per_fold.contains_key(rec.case_id.as_str()) {
                orphan_folds
                    .entry(rec.annotation_id.as_str())
                    .or_default()
                    .push(fold.map_or(0, |f| f.fold_index));
            }
        }
    }
    for c in conflicted {
        violations.push(Violation::Overlap {
            case_id: c.to_string(),
            roles: roles[c].iter().cloned().collect(),
        });
    }
    let index = manifest.index();
    for (id, folds) in orphan_folds {
        violations.push(Violation::Orphan {
            annotation_id: id.to_string(),
            case_id: index[id].case_id.clone(),
            folds,
        });
    }

    for f in &plan.folds {
        for s in &f.subsets {
            for id in &s.annotation_ids {
                let ok = index.get(id.as_str()).is_some_and(|r| f.train_cases.contains(&r.case_id));
                if !ok {
                    violations.push(Violation::SubsetOutsideTrain {
                        fold_index: f.fold_index,
                        annotation_id: id.clone(),
                    });
                }
            }
        }
    }

    if let Some(td) = &plan.train_domain {
        let mut check = |cases: &BTreeSet<String>, expected: &str| {
            for c in cases {
                if let Some(d) = case_domain.get(c.as_str()) {
                    if *d != expected {
                        violations.push(Violation::DomainMismatch {
                            case_id: c.clone(),
                            expected: expected.to_string(),
                        });
                    }
                }
            }
        };
        check(&plan.test_cases, td);
        for f in &plan.folds {
            check(&f.train_cases, td);
            check(&f.val_cases, td);
        }
        for (d, cases) in &plan.ood_tests {
            check(cases, d);
        }
    }
    LeakageReport { violations }
}
