use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FoldSpec, FractionSubset, PlanKind, SplitPlan, PLAN_SCHEMA_VERSION};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case", deny_unknown_fields)]
enum Line {
    Header {
        schema_version: u32,
        kind: PlanKind,
        seed: u64,
        dataset: String,
        fractions: Vec<f64>,
        train_domain: Option<String>,
        test_target: f64,
        test_mass: usize,
        total_mass: usize,
        flags: Vec<String>,
    },
    Test {
        cases: BTreeSet<String>,
    },
    OodTest {
        domain: String,
        cases: BTreeSet<String>,
    },
    Fold {
        fold_index: usize,
        train_cases: BTreeSet<String>,
        val_cases: BTreeSet<String>,
    },
    Fraction {
        fold_index: usize,
        fraction: f64,
        floored: bool,
        annotation_ids: Vec<String>,
    },
}

impl SplitPlan {
    /// One JSON object per line: header, test set, out-of-domain sets,
    /// folds and fraction subsets, in a fixed order.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        let mut emit = |line: &Line| -> Result<()> {
            serde_json::to_writer(&mut w, line)?;
            w.write_all(b"\n").map_err(|e| Error::io("<plan>", e))
        };
        emit(&Line::Header {
            schema_version: PLAN_SCHEMA_VERSION,
            kind: self.kind,
            seed: self.seed,
            dataset: self.dataset.clone(),
            fractions: self.fractions.clone(),
            train_domain: self.train_domain.clone(),
            test_target: self.test_target,
            test_mass: self.test_mass,
            total_mass: self.total_mass,
            flags: self.flags.clone(),
        })?;
        emit(&Line::Test {
            cases: self.test_cases.clone(),
        })?;
        for (domain, cases) in &self.ood_tests {
            emit(&Line::OodTest {
                domain: domain.clone(),
                cases: cases.clone(),
            })?;
        }
        for f in &self.folds {
            emit(&Line::Fold {
                fold_index: f.fold_index,
                train_cases: f.train_cases.clone(),
                val_cases: f.val_cases.clone(),
            })?;
            for s in &f.subsets {
                emit(&Line::Fraction {
                    fold_index: f.fold_index,
                    fraction: s.fraction,
                    floored: s.floored,
                    annotation_ids: s.annotation_ids.clone(),
                })?;
            }
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            what: format!("plan line {}", line + 1),
            message,
        };
        let mut plan: Option<SplitPlan> = None;
        let mut folds: BTreeMap<usize, FoldSpec> = BTreeMap::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<plan>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line).map_err(|e| err(i, e.to_string()))?;
            if let Line::Header {
                schema_version,
                kind,
                seed,
                dataset,
                fractions,
                train_domain,
                test_target,
                test_mass,
                total_mass,
                flags,
            } = parsed
            {
                if plan.is_some() {
                    return Err(err(i, "second header".into()));
                }
                if schema_version != PLAN_SCHEMA_VERSION {
                    return Err(err(i, format!("unsupported schema_version {schema_version}")));
                }
                plan = Some(SplitPlan {
                    kind,
                    seed,
                    dataset,
                    test_cases: BTreeSet::new(),
                    folds: Vec::new(),
                    fractions,
                    train_domain,
                    ood_tests: BTreeMap::new(),
                    test_target,
                    test_mass,
                    total_mass,
                    flags,
                });
                continue;
            }
            let p = plan.as_mut().ok_or_else(|| err(i, "header must come first".into()))?;
            match parsed {
                Line::Header { .. } => unreachable!(),
                Line::Test { cases } => p.test_cases = cases,
                Line::OodTest { domain, cases } => {
                    p.ood_tests.insert(domain, cases);
                }
                Line::Fold {
                    fold_index,
                    train_cases,
                    val_cases,
                } => {
                    folds.insert(
                        fold_index,
                        FoldSpec {
                            fold_index,
                            train_cases,
                            val_cases,
                            subsets: Vec::new(),
                        },
                    );
                }
                Line::Fraction {
                    fold_index,
                    fraction,
                    floored,
                    annotation_ids,
                } => {
                    let f = folds
                        .get_mut(&fold_index)
                        .ok_or_else(|| err(i, format!("fraction for unknown fold {fold_index}")))?;
                    f.subsets.push(FractionSubset {
                        fraction,
                        annotation_ids,
                        floored,
                    });
                }
            }
        }
        let mut plan = plan.ok_or_else(|| err(0, "empty plan document".into()))?;
        plan.folds = folds.into_values().collect();
        Ok(plan)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }
}
