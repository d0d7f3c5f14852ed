use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::BenchConfig;
use super::store::{config_digest, ResultsStore, RunRecord, STORE_SCHEMA_VERSION};
use crate::adapt::{adapt, AdaptationMode, AdaptedModel};
use crate::archive::TensorArchive;
use crate::backbone::{load_weights, BackboneRegistry, VisionTransformer, WeightSource};
use crate::error::{Error, Result};
use crate::ingest::{AnnotationRecord, DatasetManifest, PatchSpec, TileReader};
use crate::metrics::evaluate;
use crate::seed::{derive_seed, sha256_hex};
use crate::splits::{make_cross_domain_plan, make_scaling_plan, verify_no_leakage, PlanKind, SplitPlan};
use crate::train::{checkpoint_archive, save_trace, train, FeatureCache, FoldData};

/// Optional side outputs of a sweep.
#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    /// Directory for per-session checkpoints and LR/loss traces.
    pub artifacts: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedModel {
    pub model: String,
    /// `None` when every mode of the model was skipped.
    pub mode: Option<AdaptationMode>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub session_id: String,
    pub model: String,
    pub mode: AdaptationMode,
    pub reason: String,
}

/// What a sweep did. Failed sessions and skipped models are reported here,
/// never written to the results store.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub new_run_ids: Vec<String>,
    pub sessions_run: usize,
    /// Records already present in the store and therefore not recomputed.
    pub already_complete: usize,
    pub failures: Vec<RunFailure>,
    pub skipped_models: Vec<SkippedModel>,
}

impl SweepReport {
    pub fn new_records(&self) -> usize {
        self.new_run_ids.len()
    }

    /// True when some planned work produced no record.
    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty() || !self.skipped_models.is_empty()
    }

    fn absorb(&mut self, other: SweepReport) {
        self.new_run_ids.extend(other.new_run_ids);
        self.sessions_run += other.sessions_run;
        self.already_complete += other.already_complete;
        self.failures.extend(other.failures);
        self.skipped_models.extend(other.skipped_models);
    }
}

/// A backbone with weights loaded, plus the locator they came from.
pub struct LoadedBackbone {
    pub model: VisionTransformer<f32>,
    pub weights: String,
}

/// Resolves a model name through the registry, honouring the config's
/// weight overrides.
pub fn load_backbone(registry: &BackboneRegistry, cfg: &BenchConfig, name: &str) -> Result<LoadedBackbone> {
    let spec = registry.get(name)?;
    let weights = cfg.weights.get(name).cloned().unwrap_or_else(|| spec.weights_source.clone());
    let model = load_weights(&spec, &WeightSource::parse(&weights)?)?;
    Ok(LoadedBackbone { model, weights })
}

/// Coordinates of one training session inside a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionCoords {
    pub fold_index: usize,
    pub fraction: f64,
}

fn session_seed(cfg: &BenchConfig, plan: &SplitPlan, at: &SessionCoords) -> u64 {
    derive_seed(
        cfg.train.seed,
        &[
            plan.kind.as_str(),
            &plan.dataset,
            plan.train_domain.as_deref().unwrap_or(""),
            &at.fold_index.to_string(),
            &at.fraction.to_string(),
        ],
    )
}

fn session_config(
    bb: &LoadedBackbone,
    mode: AdaptationMode,
    cfg: &BenchConfig,
    plan: &SplitPlan,
    seed: u64,
    select_best: bool,
) -> serde_json::Value {
    let mut train = cfg.train.clone();
    train.seed = seed;
    train.select_best = select_best;
    json!({
        "backbone": bb.model.spec().as_ref(),
        "weights": bb.weights,
        "mode": mode,
        "train": train,
        "lora": if mode == AdaptationMode::Lora { serde_json::to_value(&cfg.lora).expect("serializes") } else { serde_json::Value::Null },
        "sampler": cfg.sampler,
        "threshold": cfg.threshold,
        "plan_seed": plan.seed,
    })
}

fn session_id(model: &str, mode: AdaptationMode, plan: &SplitPlan, at: &SessionCoords, digest: &str) -> String {
    let coords = match &plan.train_domain {
        Some(d) => format!("{d}/run{}", at.fold_index),
        None => format!("fold{}/f{}", at.fold_index, at.fraction),
    };
    format!(
        "{}/{}/{model}/{mode}/{coords}#{}",
        plan.kind.as_str(),
        plan.dataset,
        &digest[..12]
    )
}

fn run_id(session_id: &str, plan: &SplitPlan, test_domain: &str) -> String {
    match plan.kind {
        PlanKind::Scaling => session_id.to_string(),
        PlanKind::CrossDomain => format!("{session_id}/test:{test_domain}"),
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

/// Checkpoint and trace files written for a session under `dir`.
pub fn session_artifacts(dir: &Path, session_id: &str) -> (PathBuf, PathBuf) {
    let stem = sanitize(session_id);
    (dir.join(format!("{stem}.ckpt")), dir.join(format!("{stem}.trace.jsonl")))
}

/// Trains one session of `plan` and appends one record per test set that
/// the store does not already hold. Returns the new run ids.
#[allow(clippy::too_many_arguments)]
pub fn run_session(
    manifest: &DatasetManifest,
    store: &dyn TileReader,
    plan: &SplitPlan,
    at: &SessionCoords,
    model_name: &str,
    backbone: &LoadedBackbone,
    mode: AdaptationMode,
    cfg: &BenchConfig,
    results: &mut ResultsStore,
    cache: Option<&mut FeatureCache>,
    opts: &SweepOptions,
) -> Result<Vec<String>> {
    let fold = plan.fold(at.fold_index)?;
    let subset = fold.subset(at.fraction).ok_or_else(|| {
        Error::invalid("fraction", format!("{} not in fold {}", at.fraction, at.fold_index))
    })?;
    let index = manifest.index();
    let train_records: Vec<&AnnotationRecord> = subset
        .annotation_ids
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::invalid("plan", format!("annotation `{id}` not in manifest")))
        })
        .collect::<Result<_>>()?;
    let context: Vec<&AnnotationRecord> = manifest.records_in_cases(&fold.train_cases).collect();
    let val: Vec<&AnnotationRecord> = manifest.records_in_cases(&fold.val_cases).collect();

    let seed = session_seed(cfg, plan, at);
    let select_best = cfg.train.select_best && !val.is_empty();
    let config = session_config(backbone, mode, cfg, plan, seed, select_best);
    let digest = config_digest(&config);
    let sid = session_id(model_name, mode, plan, at, &digest);

    let tests: Vec<(String, Vec<&AnnotationRecord>, bool, String)> = plan
        .test_sets()
        .into_iter()
        .map(|(domain, cases, in_domain)| {
            let id = run_id(&sid, plan, &domain);
            (domain, manifest.records_in_cases(cases).collect(), in_domain, id)
        })
        .collect();
    if tests.iter().all(|t| results.contains(&t.3)) {
        return Ok(Vec::new());
    }

    let started = Instant::now();
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    train_cfg.select_best = select_best;
    let patch = PatchSpec::for_backbone(backbone.model.spec())?;
    let data = FoldData {
        store,
        train: train_records,
        context,
        val,
        patch: patch.clone(),
        sampler: cfg.sampler,
    };
    let mut model: AdaptedModel<f32> =
        adapt(&backbone.model, mode, Some(&cfg.lora), derive_seed(seed, &["head"]))?;
    let mut local = FeatureCache::new();
    let cache = match cache {
        Some(c) => c,
        None => &mut local,
    };
    let outcome = train(&mut model, &data, &train_cfg, Some(&mut *cache))?;

    if let Some(dir) = &opts.artifacts {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (ckpt_path, trace_path) = session_artifacts(dir, &sid);
        let mut extra = BTreeMap::new();
        extra.insert("session_id".to_string(), sid.clone());
        extra.insert("model".to_string(), model_name.to_string());
        extra.insert("weights".to_string(), backbone.weights.clone());
        extra.insert("base_checksum".to_string(), backbone.model.base_checksum());
        extra.insert("dataset".to_string(), plan.dataset.clone());
        extra.insert("plan_kind".to_string(), plan.kind.as_str().to_string());
        extra.insert("fold_index".to_string(), at.fold_index.to_string());
        extra.insert("fraction".to_string(), at.fraction.to_string());
        if let Some(d) = &plan.train_domain {
            extra.insert("train_domain".to_string(), d.clone());
        }
        extra.insert("threshold".to_string(), cfg.threshold.to_string());
        checkpoint_archive(&mut model, &outcome, &train_cfg, &extra)?.save(ckpt_path, true)?;
        save_trace(&outcome.trace, trace_path)?;
    }

    let mut evals = Vec::with_capacity(tests.len());
    for (domain, records, in_domain, id) in &tests {
        if results.contains(id) {
            continue;
        }
        let eval = evaluate(
            &model,
            store,
            records,
            &patch,
            cfg.threshold,
            cfg.train.eval_batch_size,
            Some(&mut *cache),
        )?;
        evals.push((domain.clone(), *in_domain, id.clone(), eval));
    }
    let wall = started.elapsed().as_secs_f64();
    let mut new_ids = Vec::with_capacity(evals.len());
    for (domain, in_domain, id, eval) in evals {
        let cross = plan.kind == PlanKind::CrossDomain;
        let record = RunRecord {
            schema_version: STORE_SCHEMA_VERSION,
            run_id: id.clone(),
            session_id: sid.clone(),
            model: model_name.to_string(),
            mode,
            dataset: plan.dataset.clone(),
            plan_kind: plan.kind,
            fold_index: at.fold_index,
            fraction: (!cross).then_some(at.fraction),
            train_domain: plan.train_domain.clone(),
            test_domain: cross.then_some(domain),
            in_domain: cross.then_some(in_domain),
            seed,
            eval,
            best_epoch: outcome.best.epoch,
            val_loss: outcome.best.val_loss,
            wall_time_s: wall,
            config: config.clone(),
            config_digest: digest.clone(),
            digest: String::new(),
        };
        results.append(record)?;
        new_ids.push(id);
    }
    Ok(new_ids)
}

/// Runs every session of `plans` for every (model, mode) pair.
#[allow(clippy::too_many_arguments)]
pub fn run_plans(
    manifest: &DatasetManifest,
    store: &dyn TileReader,
    plans: &[SplitPlan],
    models: &[String],
    modes: &[AdaptationMode],
    cfg: &BenchConfig,
    results: &mut ResultsStore,
    opts: &SweepOptions,
) -> Result<SweepReport> {
    cfg.validate()?;
    if models.is_empty() || modes.is_empty() {
        return Err(Error::invalid("models", "at least one model and one mode are required"));
    }
    let registry = cfg.registry()?;
    for name in models {
        registry.get(name)?;
    }
    for plan in plans {
        let leaks = verify_no_leakage(plan, manifest);
        if !leaks.is_clean() {
            return Err(Error::invalid("plan", format!("leakage: {:?}", leaks.violations)));
        }
    }
    let mut report = SweepReport::default();
    for name in models {
        let backbone = match load_backbone(&registry, cfg, name) {
            Ok(b) => b,
            Err(e @ (Error::MissingWeights { .. } | Error::Unsupported(_) | Error::Checksum | Error::Io { .. })) => {
                report.skipped_models.push(SkippedModel {
                    model: name.clone(),
                    mode: None,
                    reason: e.to_string(),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut cache = FeatureCache::new();
        for &mode in modes {
            if let Err(e) = mode.check_supported(backbone.model.spec()) {
                report.skipped_models.push(SkippedModel {
                    model: name.clone(),
                    mode: Some(mode),
                    reason: e.to_string(),
                });
                continue;
            }
            for plan in plans {
                let part = sweep_plan(manifest, store, plan, name, &backbone, mode, cfg, results, &mut cache, opts)?;
                report.absorb(part);
            }
        }
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn sweep_plan(
    manifest: &DatasetManifest,
    store: &dyn TileReader,
    plan: &SplitPlan,
    name: &str,
    backbone: &LoadedBackbone,
    mode: AdaptationMode,
    cfg: &BenchConfig,
    results: &mut ResultsStore,
    cache: &mut FeatureCache,
    opts: &SweepOptions,
) -> Result<SweepReport> {
    let mut report = SweepReport::default();
    let per_session = plan.test_sets().len();
    for s in plan.sessions() {
        let at = SessionCoords {
            fold_index: s.fold_index,
            fraction: s.fraction,
        };
        // Other processes may be appending to the same store.
        results.reload()?;
        let before = results.len();
        match run_session(manifest, store, plan, &at, name, backbone, mode, cfg, results, Some(cache), opts) {
            Ok(ids) if ids.is_empty() => report.already_complete += per_session,
            Ok(ids) => {
                report.sessions_run += 1;
                report.already_complete += per_session - ids.len();
                report.new_run_ids.extend(ids);
            }
            Err(e) => {
                // Records of a half-evaluated session stay valid; keep them.
                let written: Vec<String> = results.records()[before..].iter().map(|r| r.run_id.clone()).collect();
                report.new_run_ids.extend(written);
                let seed = session_seed(cfg, plan, &at);
                let digest = config_digest(&session_config(backbone, mode, cfg, plan, seed, cfg.train.select_best));
                report.failures.push(RunFailure {
                    session_id: session_id(name, mode, plan, &at, &digest),
                    model: name.to_string(),
                    mode,
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(report)
}

/// Dataset-scaling sweep: one plan, every fold × fraction, evaluated on
/// the fixed test set.
#[allow(clippy::too_many_arguments)]
pub fn run_scaling_experiment(
    manifest: &DatasetManifest,
    store: &dyn TileReader,
    models: &[String],
    modes: &[AdaptationMode],
    cfg: &BenchConfig,
    results: &mut ResultsStore,
    opts: &SweepOptions,
) -> Result<SweepReport> {
    let plan = make_scaling_plan(manifest, &cfg.scaling, cfg.seed)?;
    run_plans(manifest, store, &[plan], models, modes, cfg, results, opts)
}

/// Cross-domain sweep: each domain in turn is the training domain; each
/// session is evaluated on its in-domain holdout and on every other domain.
#[allow(clippy::too_many_arguments)]
pub fn run_cross_domain_experiment(
    manifest: &DatasetManifest,
    store: &dyn TileReader,
    models: &[String],
    modes: &[AdaptationMode],
    cfg: &BenchConfig,
    results: &mut ResultsStore,
    opts: &SweepOptions,
) -> Result<SweepReport> {
    let plans = cross_domain_plans(manifest, cfg)?;
    run_plans(manifest, store, &plans, models, modes, cfg, results, opts)
}

pub fn cross_domain_plans(manifest: &DatasetManifest, cfg: &BenchConfig) -> Result<Vec<SplitPlan>> {
    let domains = manifest.domains();
    if domains.len() < 2 {
        return Err(Error::invalid(
            "manifest",
            format!("cross-domain runs need at least 2 domains, found {}", domains.len()),
        ));
    }
    let train_domains: BTreeSet<String> = match &cfg.train_domains {
        Some(list) => {
            for d in list {
                if !domains.contains(d) {
                    return Err(Error::invalid("train_domains", format!("`{d}` not in manifest")));
                }
            }
            list.iter().cloned().collect()
        }
        None => domains,
    };
    train_domains
        .iter()
        .map(|d| make_cross_domain_plan(manifest, d, &cfg.crossdomain, cfg.seed))
        .collect()
}

/// Evaluates a saved checkpoint on every annotation of `test` and appends
/// the record.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    test: &DatasetManifest,
    store: &dyn TileReader,
    cfg: &BenchConfig,
    results: &mut ResultsStore,
) -> Result<RunRecord> {
    let bytes = std::fs::read(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
    let archive = TensorArchive::from_bytes(&bytes)?;
    let meta = &archive.metadata;
    let get = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| Error::invalid("checkpoint", format!("missing `{k}` metadata")))
    };
    let model_name = get("backbone")?;
    let registry = cfg.registry()?;
    let spec = registry.get(&model_name)?;
    let weights = match meta.get("weights") {
        Some(w) => w.clone(),
        None => cfg.weights.get(&model_name).cloned().unwrap_or_else(|| spec.weights_source.clone()),
    };
    let backbone = load_weights::<f32>(&spec, &WeightSource::parse(&weights)?)?;
    if let Some(expected) = meta.get("base_checksum") {
        if expected != &backbone.base_checksum() {
            return Err(Error::invalid("checkpoint", "backbone weights differ from those used in training"));
        }
    }
    let model = AdaptedModel::from_archive(&backbone, &archive)?;
    let threshold = meta.get("threshold").and_then(|t| t.parse().ok()).unwrap_or(cfg.threshold);
    let records: Vec<&AnnotationRecord> = test.records.iter().collect();
    let patch = PatchSpec::for_backbone(backbone.spec())?;
    let started = Instant::now();
    let eval = evaluate(&model, store, &records, &patch, threshold, cfg.train.eval_batch_size, None)?;
    let domains: BTreeSet<&str> = test.records.iter().map(|r| r.domain.as_str()).collect();
    let test_domain = (domains.len() == 1).then(|| domains.iter().next().expect("one").to_string());
    let train_domain = meta.get("train_domain").cloned();
    let ckpt_digest = sha256_hex(&bytes);
    let config = json!({
        "checkpoint_sha256": ckpt_digest,
        "weights": weights,
        "threshold": threshold,
        "test_manifest": test.name,
        "train_config": meta.get("train_config"),
    });
    let plan_kind = match meta.get("plan_kind") {
        Some(k) => k.parse()?,
        None => PlanKind::Scaling,
    };
    let in_domain = match (&train_domain, &test_domain) {
        (Some(a), Some(b)) => Some(a == b),
        _ => None,
    };
    let record = RunRecord {
        schema_version: STORE_SCHEMA_VERSION,
        run_id: format!("eval/{}/{}/{}", test.name, meta.get("session_id").map_or("-", |s| s.as_str()), &ckpt_digest[..12]),
        session_id: meta.get("session_id").cloned().unwrap_or_else(|| format!("checkpoint#{}", &ckpt_digest[..12])),
        model: model_name,
        mode: model.mode(),
        dataset: meta.get("dataset").cloned().unwrap_or_else(|| test.name.clone()),
        plan_kind,
        fold_index: meta.get("fold_index").and_then(|v| v.parse().ok()).unwrap_or(0),
        fraction: meta.get("fraction").and_then(|v| v.parse().ok()),
        train_domain,
        test_domain,
        in_domain,
        seed: meta.get("seed").and_then(|v| v.parse().ok()).unwrap_or(0),
        eval,
        best_epoch: meta.get("epoch").and_then(|v| v.parse().ok()).unwrap_or(0),
        val_loss: meta.get("val_loss").and_then(|v| v.parse().ok()),
        wall_time_s: started.elapsed().as_secs_f64(),
        config_digest: config_digest(&config),
        config,
        digest: String::new(),
    };
    Ok(results.append(record)?.clone())
}
