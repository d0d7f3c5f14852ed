//! Mean ± std summaries over run records.
//!
//! Every function here is a pure fold over its input: records are grouped
//! into ordered maps and values are sorted before summation, so any
//! permutation of the store gives bit-identical output.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::StdKind;
use super::store::RunRecord;
use crate::adapt::AdaptationMode;
use crate::error::{Error, Result};
use crate::metrics::EvalResult;
use crate::splits::PlanKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    BalancedAccuracy,
    WeightedF1,
    Auroc,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::BalancedAccuracy, Metric::WeightedF1, Metric::Auroc];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::BalancedAccuracy => "balanced_accuracy",
            Metric::WeightedF1 => "weighted_f1",
            Metric::Auroc => "auroc",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Metric::BalancedAccuracy => "Balanced ACC",
            Metric::WeightedF1 => "Weighted F1",
            Metric::Auroc => "AUROC",
        }
    }

    pub fn of(self, e: &EvalResult) -> Option<f64> {
        match self {
            Metric::BalancedAccuracy => Some(e.balanced_accuracy),
            Metric::WeightedF1 => Some(e.weighted_f1),
            Metric::Auroc => e.auroc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Mean and standard deviation; `None` for an empty slice. The sample
/// estimator of a single value is reported as 0.
pub fn mean_std(values: &[f64], kind: StdKind) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mut v = values.to_vec();
    let mean = sorted_sum(&mut v) / n as f64;
    let mut sq: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
    let ss = sorted_sum(&mut sq);
    let denom = match kind {
        StdKind::Population => n as f64,
        StdKind::Sample if n > 1 => (n - 1) as f64,
        StdKind::Sample => 1.0,
    };
    Some(MeanStd {
        mean,
        std: (ss / denom).sqrt(),
        n,
    })
}

/// Record attributes usable as grouping keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Dataset,
    PlanKind,
    Model,
    Mode,
    Fraction,
    TrainDomain,
    TestDomain,
    InDomain,
}

impl GroupBy {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupBy::Dataset => "dataset",
            GroupBy::PlanKind => "plan_kind",
            GroupBy::Model => "model",
            GroupBy::Mode => "mode",
            GroupBy::Fraction => "fraction",
            GroupBy::TrainDomain => "train_domain",
            GroupBy::TestDomain => "test_domain",
            GroupBy::InDomain => "in_domain",
        }
    }

    pub fn value(self, r: &RunRecord) -> String {
        let opt = |v: &Option<String>| v.clone().unwrap_or_else(|| "-".into());
        match self {
            GroupBy::Dataset => r.dataset.clone(),
            GroupBy::PlanKind => r.plan_kind.as_str().into(),
            GroupBy::Model => r.model.clone(),
            GroupBy::Mode => r.mode.as_str().into(),
            GroupBy::Fraction => r.fraction.map_or_else(|| "-".into(), |f| f.to_string()),
            GroupBy::TrainDomain => opt(&r.train_domain),
            GroupBy::TestDomain => opt(&r.test_domain),
            GroupBy::InDomain => match r.in_domain {
                Some(true) => "in".into(),
                Some(false) => "out".into(),
                None => "-".into(),
            },
        }
    }
}

impl std::str::FromStr for GroupBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "dataset" => GroupBy::Dataset,
            "plan_kind" | "kind" => GroupBy::PlanKind,
            "model" => GroupBy::Model,
            "mode" => GroupBy::Mode,
            "fraction" => GroupBy::Fraction,
            "train_domain" => GroupBy::TrainDomain,
            "test_domain" => GroupBy::TestDomain,
            "in_domain" => GroupBy::InDomain,
            other => return Err(Error::invalid("group_by", format!("unknown key `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub key: Vec<(String, String)>,
    pub runs: usize,
    /// Missing when no run of the group produced the metric.
    pub metrics: BTreeMap<Metric, MeanStd>,
}

impl AggregateRow {
    pub fn get(&self, m: Metric) -> Option<&MeanStd> {
        self.metrics.get(&m)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregation {
    pub rows: Vec<AggregateRow>,
    /// Groups or cells left out, with the reason.
    pub notes: Vec<String>,
}

fn summarize(records: &[&RunRecord], kind: StdKind) -> BTreeMap<Metric, MeanStd> {
    Metric::ALL
        .iter()
        .filter_map(|&m| {
            let v: Vec<f64> = records.iter().filter_map(|r| m.of(&r.eval)).collect();
            mean_std(&v, kind).map(|s| (m, s))
        })
        .collect()
}

/// Groups `records` by `keys` and summarizes each metric.
pub fn aggregate(records: &[RunRecord], keys: &[GroupBy], kind: StdKind) -> Result<Aggregation> {
    if records.is_empty() {
        return Err(Error::Empty("results store".into()));
    }
    let mut groups: BTreeMap<Vec<String>, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(keys.iter().map(|k| k.value(r)).collect()).or_default().push(r);
    }
    let mut out = Aggregation::default();
    for (values, members) in groups {
        let metrics = summarize(&members, kind);
        let key: Vec<(String, String)> =
            keys.iter().zip(values).map(|(k, v)| (k.as_str().to_string(), v)).collect();
        for m in Metric::ALL {
            if !metrics.contains_key(&m) {
                out.notes.push(format!("{} omitted for {key:?}: no run produced it", m.as_str()));
            }
        }
        out.rows.push(AggregateRow {
            key,
            runs: members.len(),
            metrics,
        });
    }
    Ok(out)
}

/// Row of a per-fraction table: one model + mode, three metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model: String,
    pub mode: AdaptationMode,
    pub runs: usize,
    pub metrics: BTreeMap<Metric, MeanStd>,
}

/// Scaling results at one dataset fraction, one row per model + mode.
pub fn fraction_table(records: &[RunRecord], fraction: f64, kind: StdKind) -> Vec<ModelRow> {
    let mut groups: BTreeMap<(String, AdaptationMode), Vec<&RunRecord>> = BTreeMap::new();
    for r in records
        .iter()
        .filter(|r| r.plan_kind == PlanKind::Scaling && r.fraction == Some(fraction))
    {
        groups.entry((r.model.clone(), r.mode)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((model, mode), rs)| ModelRow {
            model,
            mode,
            runs: rs.len(),
            metrics: summarize(&rs, kind),
        })
        .collect()
}

/// One curve of the scaling plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingCurve {
    pub model: String,
    pub mode: AdaptationMode,
    /// (fraction, summary) in increasing fraction order.
    pub points: Vec<(f64, MeanStd)>,
}

pub fn scaling_curves(records: &[RunRecord], metric: Metric, kind: StdKind) -> Vec<ScalingCurve> {
    let mut groups: BTreeMap<(String, AdaptationMode), BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.plan_kind == PlanKind::Scaling) {
        let (Some(f), Some(v)) = (r.fraction, metric.of(&r.eval)) else {
            continue;
        };
        // Positive finite floats order like their bit patterns.
        groups
            .entry((r.model.clone(), r.mode))
            .or_default()
            .entry(f.to_bits())
            .or_default()
            .push(v);
    }
    groups
        .into_iter()
        .map(|((model, mode), by_f)| ScalingCurve {
            model,
            mode,
            points: by_f
                .into_iter()
                .filter_map(|(bits, v)| mean_std(&v, kind).map(|s| (f64::from_bits(bits), s)))
                .collect(),
        })
        .collect()
}

/// Cross-domain summary row: in-domain and out-of-domain values per metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainRow {
    pub model: String,
    pub mode: AdaptationMode,
    pub in_scenarios: usize,
    pub out_scenarios: usize,
    pub in_domain: BTreeMap<Metric, MeanStd>,
    pub out_domain: BTreeMap<Metric, MeanStd>,
}

impl DomainRow {
    /// The six metric columns in display order.
    pub fn columns(&self) -> Vec<(String, Option<MeanStd>)> {
        let mut out = Vec::with_capacity(6);
        for m in Metric::ALL {
            out.push((format!("in_{}", m.as_str()), self.in_domain.get(&m).copied()));
            out.push((format!("out_{}", m.as_str()), self.out_domain.get(&m).copied()));
        }
        out
    }
}

type Scenario = (String, String);

fn scenario_means(records: &[&RunRecord], metric: Metric, kind: StdKind) -> BTreeMap<Scenario, MeanStd> {
    let mut by: BTreeMap<Scenario, Vec<f64>> = BTreeMap::new();
    for r in records {
        if let (Some(tr), Some(te), Some(v)) = (&r.train_domain, &r.test_domain, metric.of(&r.eval)) {
            by.entry((tr.clone(), te.clone())).or_default().push(v);
        }
    }
    by.into_iter().filter_map(|(k, v)| mean_std(&v, kind).map(|s| (k, s))).collect()
}

/// Cross-domain table. Each (train domain, test domain) scenario is first
/// averaged over its runs; the in-domain and out-of-domain columns are the
/// mean ± std of those scenario means.
pub fn cross_domain_table(records: &[RunRecord], kind: StdKind) -> Vec<DomainRow> {
    let mut groups: BTreeMap<(String, AdaptationMode), Vec<&RunRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.plan_kind == PlanKind::CrossDomain) {
        groups.entry((r.model.clone(), r.mode)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((model, mode), rs)| {
            let mut in_domain = BTreeMap::new();
            let mut out_domain = BTreeMap::new();
            let mut counts = (0, 0);
            for m in Metric::ALL {
                let scen = scenario_means(&rs, m, kind);
                let ins: Vec<f64> = scen.iter().filter(|((a, b), _)| a == b).map(|(_, s)| s.mean).collect();
                let outs: Vec<f64> = scen.iter().filter(|((a, b), _)| a != b).map(|(_, s)| s.mean).collect();
                if m == Metric::BalancedAccuracy {
                    counts = (ins.len(), outs.len());
                }
                if let Some(s) = mean_std(&ins, kind) {
                    in_domain.insert(m, s);
                }
                if let Some(s) = mean_std(&outs, kind) {
                    out_domain.insert(m, s);
                }
            }
            DomainRow {
                model,
                mode,
                in_scenarios: counts.0,
                out_scenarios: counts.1,
                in_domain,
                out_domain,
            }
        })
        .collect()
}

/// Train-domain × test-domain matrix of one metric for one model + mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMatrix {
    pub model: String,
    pub mode: AdaptationMode,
    pub metric: Metric,
    pub domains: Vec<String>,
    /// `cells[i][j]`: trained on `domains[i]`, tested on `domains[j]`.
    pub cells: Vec<Vec<Option<MeanStd>>>,
}

pub fn cross_domain_matrices(records: &[RunRecord], metric: Metric, kind: StdKind) -> Vec<DomainMatrix> {
    let mut groups: BTreeMap<(String, AdaptationMode), Vec<&RunRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.plan_kind == PlanKind::CrossDomain) {
        groups.entry((r.model.clone(), r.mode)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((model, mode), rs)| {
            let scen = scenario_means(&rs, metric, kind);
            let mut domains: Vec<String> = rs
                .iter()
                .flat_map(|r| [r.train_domain.clone(), r.test_domain.clone()])
                .flatten()
                .collect();
            domains.sort();
            domains.dedup();
            let cells = domains
                .iter()
                .map(|a| domains.iter().map(|b| scen.get(&(a.clone(), b.clone())).copied()).collect())
                .collect();
            DomainMatrix {
                model,
                mode,
                metric,
                domains,
                cells,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_and_singleton() {
        let s = mean_std(&[0.8, 0.9], StdKind::Population).unwrap();
        assert!((s.mean - 0.85).abs() < 1e-12 && (s.std - 0.05).abs() < 1e-12);
        let s = mean_std(&[0.7], StdKind::Population).unwrap();
        assert_eq!((s.mean, s.std), (0.7, 0.0));
        let s = mean_std(&[0.7], StdKind::Sample).unwrap();
        assert_eq!(s.std, 0.0);
        let s = mean_std(&[0.8, 0.9], StdKind::Sample).unwrap();
        assert!((s.std - 0.05 * 2f64.sqrt()).abs() < 1e-12);
        assert!(mean_std(&[], StdKind::Population).is_none());
    }
}
