use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{FoldSpec, FractionSubset, PlanKind, SplitPlan, FRACTION_LADDER};
use crate::error::{Error, Result};
use crate::ingest::{AnnotationRecord, DatasetManifest, Label};
use crate::seed::{derive_seed, rng_from, Rng};

/// Annotation count per case.
pub fn case_masses<'a>(records: impl IntoIterator<Item = &'a AnnotationRecord>) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for r in records {
        *out.entry(r.case_id.clone()).or_insert(0) += 1;
    }
    out
}

/// Seeded randomized greedy selection of cases whose mass approaches
/// `fraction` of the total.
///
/// Cases are shuffled and added while the selected mass is below target.
/// The last case added is kept or dropped, whichever lands closer (ties
/// keep it). Unless `fraction >= 1`, the result is kept nonempty and
/// strictly smaller than the full case set.
pub fn select_case_subset(masses: &BTreeMap<String, usize>, fraction: f64, rng: &mut Rng) -> BTreeSet<String> {
    let total: usize = masses.values().sum();
    let target = fraction * total as f64;
    let mut order: Vec<(&String, usize)> = masses.iter().map(|(c, m)| (c, *m)).collect();
    order.shuffle(rng);
    let mut chosen = Vec::new();
    let mut mass = 0usize;
    for (case, m) in &order {
        if (mass as f64) >= target {
            break;
        }
        chosen.push((*case, *m));
        mass += m;
    }
    if let Some(&(_, last)) = chosen.last() {
        let with = (mass as f64 - target).abs();
        let without = ((mass - last) as f64 - target).abs();
        if without < with {
            chosen.pop();
        }
    }
    if fraction > 0.0 && fraction < 1.0 {
        if chosen.is_empty() && !order.is_empty() {
            chosen.push(order[0]);
        }
        if chosen.len() == order.len() && order.len() > 1 {
            chosen.pop();
        }
    }
    chosen.into_iter().map(|(c, _)| c.clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSplit {
    pub test_cases: BTreeSet<String>,
    pub trainval_cases: BTreeSet<String>,
    pub target_mass: f64,
    pub test_mass: usize,
    pub total_mass: usize,
    pub warnings: Vec<String>,
}

fn check_cases(masses: &BTreeMap<String, usize>, what: &str) -> Result<()> {
    if masses.len() < 2 {
        return Err(Error::DegenerateSplit(format!(
            "{what} needs at least 2 cases, found {}",
            masses.len()
        )));
    }
    Ok(())
}

fn check_fraction(name: &str, f: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::invalid(name, format!("{f} outside [0, 1]")));
    }
    Ok(())
}

pub fn make_test_split(manifest: &DatasetManifest, target: f64, seed: u64) -> Result<TestSplit> {
    check_fraction("target", target)?;
    let masses = case_masses(&manifest.records);
    check_cases(&masses, "test split")?;
    let counts = manifest.label_counts();
    if counts.mitotic_figure == 0 || counts.hard_negative == 0 {
        return Err(Error::invalid("manifest", "both labels must be present"));
    }
    let mut rng = rng_from(seed, &["test-split"]);
    let test_cases = select_case_subset(&masses, target, &mut rng);
    let total_mass: usize = masses.values().sum();
    let test_mass: usize = test_cases.iter().map(|c| masses[c]).sum();
    let trainval_cases: BTreeSet<String> = masses.keys().filter(|c| !test_cases.contains(*c)).cloned().collect();
    let mut warnings = Vec::new();
    if test_mass == 0 {
        warnings.push("degenerate: test set has zero annotation mass".into());
    }
    if trainval_cases.is_empty() && target < 1.0 {
        warnings.push("degenerate: no cases left for training".into());
    }
    Ok(TestSplit {
        test_cases,
        trainval_cases,
        target_mass: target * total_mass as f64,
        test_mass,
        total_mass,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldOptions {
    pub k: usize,
    pub val_fraction: f64,
    /// Permits `val_fraction = 0`, producing folds without validation cases.
    pub allow_empty_val: bool,
}

impl Default for FoldOptions {
    fn default() -> Self {
        FoldOptions {
            k: 5,
            val_fraction: 0.2,
            allow_empty_val: false,
        }
    }
}

/// Independent seeded train/validation draws over `trainval` case masses.
/// Fraction subsets are left empty; see [`subsample_fraction`].
pub fn make_folds(trainval: &BTreeMap<String, usize>, opts: &FoldOptions, seed: u64) -> Result<Vec<FoldSpec>> {
    check_fraction("val_fraction", opts.val_fraction)?;
    if opts.k == 0 {
        return Err(Error::invalid("k", "must be positive"));
    }
    if opts.val_fraction == 0.0 && !opts.allow_empty_val {
        return Err(Error::invalid(
            "val_fraction",
            "0 yields an empty validation set; enable allow_empty_val to permit it",
        ));
    }
    if opts.val_fraction >= 1.0 {
        return Err(Error::invalid("val_fraction", "must leave training cases"));
    }
    if opts.val_fraction > 0.0 {
        check_cases(trainval, "fold generation")?;
    } else if trainval.is_empty() {
        return Err(Error::DegenerateSplit("fold generation needs at least 1 case".into()));
    }
    let mut folds = Vec::with_capacity(opts.k);
    for i in 0..opts.k {
        let val_cases = if opts.val_fraction > 0.0 {
            let mut rng = rng_from(seed, &["fold", &i.to_string()]);
            select_case_subset(trainval, opts.val_fraction, &mut rng)
        } else {
            BTreeSet::new()
        };
        let train_cases = trainval.keys().filter(|c| !val_cases.contains(*c)).cloned().collect();
        folds.push(FoldSpec {
            fold_index: i,
            train_cases,
            val_cases,
            subsets: Vec::new(),
        });
    }
    Ok(folds)
}

/// Stratified subset of the training pool at `fraction`.
///
/// Positive and negative ids are sorted and shuffled once with a rng that
/// depends only on `seed`; each fraction takes a prefix of both lists, so
/// subsets for one seed are nested. The target size is `⌈fraction·N⌉`,
/// split between classes in proportion to the pool, with at least one
/// sample per class present in the pool.
pub fn subsample_fraction(pool: &[(&str, Label)], fraction: f64, seed: u64) -> Result<FractionSubset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("fraction", format!("{fraction} outside (0, 1]")));
    }
    if pool.is_empty() {
        return Err(Error::Empty("training pool".into()));
    }
    let mut pos: Vec<&str> = pool.iter().filter(|(_, l)| l.is_positive()).map(|(id, _)| *id).collect();
    let mut neg: Vec<&str> = pool.iter().filter(|(_, l)| !l.is_positive()).map(|(id, _)| *id).collect();
    pos.sort_unstable();
    neg.sort_unstable();
    let mut rng = rng_from(seed, &["fraction-order"]);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let n_total = pool.len();
    let n = ((fraction * n_total as f64) - 1e-9).ceil().max(1.0) as usize;
    let n = n.min(n_total);
    let ratio = pos.len() as f64 / n_total as f64;
    let mut n_pos = (n as f64 * ratio).round() as usize;
    let mut n_neg = n - n_pos.min(n);
    let mut floored = false;
    if !pos.is_empty() && n_pos == 0 {
        n_pos = 1;
        floored = true;
    }
    if !neg.is_empty() && n_neg == 0 {
        n_neg = 1;
        floored = true;
    }
    n_pos = n_pos.min(pos.len());
    n_neg = n_neg.min(neg.len());
    let mut annotation_ids: Vec<String> = pos[..n_pos].iter().chain(&neg[..n_neg]).map(|s| s.to_string()).collect();
    annotation_ids.sort_unstable();
    Ok(FractionSubset {
        fraction,
        annotation_ids,
        floored,
    })
}

fn attach_subsets(
    manifest: &DatasetManifest,
    folds: &mut [FoldSpec],
    fractions: &[f64],
    seed: u64,
    flags: &mut Vec<String>,
) -> Result<()> {
    for fold in folds.iter_mut() {
        let pool: Vec<(&str, Label)> = manifest
            .records
            .iter()
            .filter(|r| fold.train_cases.contains(&r.case_id))
            .map(|r| (r.annotation_id.as_str(), r.label))
            .collect();
        let fold_seed = derive_seed(seed, &["fold-subsets", &fold.fold_index.to_string()]);
        fold.subsets = fractions
            .iter()
            .map(|f| subsample_fraction(&pool, *f, fold_seed))
            .collect::<Result<_>>()?;
        for s in &fold.subsets {
            if s.floored {
                flags.push(format!(
                    "fold {} fraction {}: class floor applied (one sample kept per class)",
                    fold.fold_index, s.fraction
                ));
            }
        }
    }
    Ok(())
}

fn check_fractions(fractions: &[f64]) -> Result<Vec<f64>> {
    if fractions.is_empty() {
        return Err(Error::invalid("fractions", "at least one fraction is required"));
    }
    let mut out = fractions.to_vec();
    for f in &out {
        if !(*f > 0.0 && *f <= 1.0) {
            return Err(Error::invalid("fractions", format!("{f} outside (0, 1]")));
        }
    }
    out.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    out.dedup();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingParams {
    pub test_fraction: f64,
    pub folds: FoldOptions,
    pub fractions: Vec<f64>,
}

impl Default for ScalingParams {
    fn default() -> Self {
        ScalingParams {
            test_fraction: 0.2,
            folds: FoldOptions::default(),
            fractions: FRACTION_LADDER.to_vec(),
        }
    }
}

pub fn make_scaling_plan(manifest: &DatasetManifest, params: &ScalingParams, seed: u64) -> Result<SplitPlan> {
    let fractions = check_fractions(&params.fractions)?;
    let split = make_test_split(manifest, params.test_fraction, seed)?;
    let masses = case_masses(&manifest.records);
    let trainval: BTreeMap<String, usize> = split.trainval_cases.iter().map(|c| (c.clone(), masses[c])).collect();
    let mut folds = make_folds(&trainval, &params.folds, seed)?;
    let mut flags = split.warnings.clone();
    attach_subsets(manifest, &mut folds, &fractions, seed, &mut flags)?;
    Ok(SplitPlan {
        kind: PlanKind::Scaling,
        seed,
        dataset: manifest.name.clone(),
        test_cases: split.test_cases,
        folds,
        fractions,
        train_domain: None,
        ood_tests: BTreeMap::new(),
        test_target: split.target_mass,
        test_mass: split.test_mass,
        total_mass: split.total_mass,
        flags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossDomainParams {
    pub runs: usize,
    pub holdout: f64,
    pub val_fraction: f64,
}

impl Default for CrossDomainParams {
    fn default() -> Self {
        CrossDomainParams {
            runs: 5,
            holdout: 0.2,
            val_fraction: 0.2,
        }
    }
}

pub fn make_cross_domain_plan(
    manifest: &DatasetManifest,
    train_domain: &str,
    params: &CrossDomainParams,
    seed: u64,
) -> Result<SplitPlan> {
    check_fraction("holdout", params.holdout)?;
    let domains = manifest.domains();
    if domains.len() < 2 {
        return Err(Error::invalid("manifest", format!("needs at least 2 domains, found {}", domains.len())));
    }
    if !domains.contains(train_domain) {
        return Err(Error::invalid("train_domain", format!("`{train_domain}` not in manifest")));
    }
    let masses = case_masses(manifest.records.iter().filter(|r| r.domain == train_domain));
    check_cases(&masses, &format!("domain `{train_domain}`"))?;

    let mut flags = Vec::new();
    let mut rng = rng_from(seed, &["holdout", train_domain]);
    let test_cases = select_case_subset(&masses, params.holdout, &mut rng);
    let trainval: BTreeMap<String, usize> =
        masses.iter().filter(|(c, _)| !test_cases.contains(*c)).map(|(c, m)| (c.clone(), *m)).collect();
    let fold_seed = derive_seed(seed, &["cross-domain", train_domain]);
    let mut folds = if trainval.len() < 2 {
        flags.push(format!(
            "minimal: domain `{train_domain}` has {} cases; validation is empty and the final checkpoint is used",
            masses.len()
        ));
        make_folds(
            &trainval,
            &FoldOptions {
                k: params.runs,
                val_fraction: 0.0,
                allow_empty_val: true,
            },
            fold_seed,
        )?
    } else {
        make_folds(
            &trainval,
            &FoldOptions {
                k: params.runs,
                val_fraction: params.val_fraction,
                allow_empty_val: params.val_fraction == 0.0,
            },
            fold_seed,
        )?
    };
    attach_subsets(manifest, &mut folds, &[1.0], fold_seed, &mut flags)?;

    let mut ood_tests: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for r in manifest.records.iter().filter(|r| r.domain != train_domain) {
        ood_tests.entry(r.domain.clone()).or_default().insert(r.case_id.clone());
    }
    let total_mass: usize = masses.values().sum();
    Ok(SplitPlan {
        kind: PlanKind::CrossDomain,
        seed,
        dataset: manifest.name.clone(),
        test_mass: test_cases.iter().map(|c| masses[c]).sum(),
        test_cases,
        folds,
        fractions: vec![1.0],
        train_domain: Some(train_domain.to_string()),
        ood_tests,
        test_target: params.holdout * total_mass as f64,
        total_mass,
        flags,
    })
}
