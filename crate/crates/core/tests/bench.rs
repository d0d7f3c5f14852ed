mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use mitobench::adapt::AdaptationMode;
use mitobench::bench::{
    aggregate, config_digest, cross_domain_matrices, cross_domain_table, emit_report, evaluate_checkpoint,
    fraction_table, run_cross_domain_experiment, run_scaling_experiment, session_artifacts, GroupBy, Metric, ReportFormat, ResultsStore, RunRecord,
    StdKind, SweepOptions, STORE_SCHEMA_VERSION,
};
use mitobench::ingest::{DatasetManifest, RawPatch, TileReader};
use mitobench::metrics::EvalResult;
use mitobench::splits::PlanKind;
use mitobench::Result;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use common::{tiny_config, tiny_dataset};

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn scaling_sweep_design_counts_and_resume() {
    let data = tiny_dataset(&["A"], 8, 1);
    let cfg = tiny_config(&["tiny-a"]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.jsonl");
    let mut store = ResultsStore::open(&path).unwrap();
    let opts = SweepOptions {
        artifacts: Some(dir.path().join("artifacts")),
    };
    let report = run_scaling_experiment(
        &data.manifest,
        &data.store,
        &names(&["tiny-a"]),
        &[AdaptationMode::Lora],
        &cfg,
        &mut store,
        &opts,
    )
    .unwrap();
    assert_eq!(report.new_records(), 20);
    assert_eq!(report.sessions_run, 20);
    assert!(!report.is_partial());
    assert_eq!(store.len(), 20, "{:?}", store.corrupt_lines());

    let ids: BTreeSet<&str> = store.run_ids();
    assert_eq!(ids.len(), 20);
    let per_fraction = store.records().iter().fold(BTreeMap::<String, usize>::new(), |mut m, r| {
        *m.entry(r.fraction.unwrap().to_string()).or_default() += 1;
        m
    });
    assert_eq!(per_fraction.len(), 4);
    assert!(per_fraction.values().all(|&n| n == 5));
    // Every run is scored on the same fixed test set.
    let sizes: BTreeSet<(usize, usize)> = store.records().iter().map(|r| (r.eval.n_pos, r.eval.n_neg)).collect();
    assert_eq!(sizes.len(), 1);
    for r in store.records() {
        assert!(r.verify().is_ok());
        assert_eq!(r.config_digest, config_digest(&r.config));
    }
    let ckpts = std::fs::read_dir(dir.path().join("artifacts")).unwrap().count();
    assert_eq!(ckpts, 40);

    // Re-reading yields the same records and the same aggregation.
    let reread = ResultsStore::open(&path).unwrap();
    assert_eq!(reread.records(), store.records());
    assert!(reread.corrupt_lines().is_empty());
    let keys = [GroupBy::Model, GroupBy::Mode, GroupBy::Fraction];
    assert_eq!(
        aggregate(reread.records(), &keys, StdKind::Population).unwrap(),
        aggregate(store.records(), &keys, StdKind::Population).unwrap()
    );

    // A complete sweep resumes to nothing.
    let again = run_scaling_experiment(
        &data.manifest,
        &data.store,
        &names(&["tiny-a"]),
        &[AdaptationMode::Lora],
        &cfg,
        &mut store,
        &SweepOptions::default(),
    )
    .unwrap();
    assert_eq!(again.new_records(), 0);
    assert_eq!(again.already_complete, 20);

    // Interrupted after seven records: exactly the other thirteen are added,
    // identical to the uninterrupted run.
    let text = std::fs::read_to_string(&path).unwrap();
    let partial: String = text.lines().take(7).map(|l| format!("{l}\n")).collect();
    let path7 = dir.path().join("partial.jsonl");
    std::fs::write(&path7, partial).unwrap();
    let mut store7 = ResultsStore::open(&path7).unwrap();
    assert_eq!(store7.len(), 7);
    let resumed = run_scaling_experiment(
        &data.manifest,
        &data.store,
        &names(&["tiny-a"]),
        &[AdaptationMode::Lora],
        &cfg,
        &mut store7,
        &SweepOptions::default(),
    )
    .unwrap();
    assert_eq!(resumed.new_records(), 13);
    assert_eq!(store7.len(), 20);
    let by_id = |s: &ResultsStore| -> BTreeMap<String, EvalResult> {
        s.records().iter().map(|r| (r.run_id.clone(), r.eval.clone())).collect()
    };
    assert_eq!(by_id(&store7), by_id(&store));
}

#[test]
fn full_fraction_only_gives_five_records() {
    let data = tiny_dataset(&["A"], 6, 2);
    let mut cfg = tiny_config(&["tiny-b"]);
    cfg.scaling.fractions = vec![1.0];
    let mut store = ResultsStore::in_memory();
    let report = run_scaling_experiment(
        &data.manifest,
        &data.store,
        &names(&["tiny-b"]),
        &[AdaptationMode::LinearProbe],
        &cfg,
        &mut store,
        &SweepOptions::default(),
    )
    .unwrap();
    assert_eq!(report.new_records(), 5);
    assert!(store.records().iter().all(|r| r.fraction == Some(1.0)));
    let folds: BTreeSet<usize> = store.records().iter().map(|r| r.fold_index).collect();
    assert_eq!(folds.len(), 5);
}

#[test]
fn cross_domain_five_domains() {
    let data = tiny_dataset(&["A", "B", "C", "D", "E"], 4, 3);
    let cfg = tiny_config(&["tiny-c"]);
    let mut store = ResultsStore::in_memory();
    let report = run_cross_domain_experiment(
        &data.manifest,
        &data.store,
        &names(&["tiny-c"]),
        &[AdaptationMode::LinearProbe],
        &cfg,
        &mut store,
        &SweepOptions::default(),
    )
    .unwrap();
    assert_eq!(report.sessions_run, 25);
    assert_eq!(store.len(), 125);
    let mut sessions: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in store.records() {
        sessions.entry(r.session_id.as_str()).or_default().push(r);
    }
    assert_eq!(sessions.len(), 25);
    for rs in sessions.values() {
        assert_eq!(rs.len(), 5);
        assert_eq!(rs.iter().filter(|r| r.in_domain == Some(true)).count(), 1);
        let tests: BTreeSet<&str> = rs.iter().map(|r| r.test_domain.as_deref().unwrap()).collect();
        assert_eq!(tests.len(), 5);
        let inr = rs.iter().find(|r| r.in_domain == Some(true)).unwrap();
        assert_eq!(inr.test_domain, inr.train_domain);
    }
    let per_domain = store.records().iter().fold(BTreeMap::<&str, BTreeSet<&str>>::new(), |mut m, r| {
        m.entry(r.train_domain.as_deref().unwrap()).or_default().insert(&r.session_id);
        m
    });
    assert_eq!(per_domain.len(), 5);
    assert!(per_domain.values().all(|s| s.len() == 5));

    let table = cross_domain_table(store.records(), StdKind::Population);
    assert_eq!(table.len(), 1);
    assert_eq!(table[0].in_scenarios, 5);
    assert_eq!(table[0].out_scenarios, 20);
    assert_eq!(table[0].columns().len(), 6);
    let mx = cross_domain_matrices(store.records(), Metric::Auroc, StdKind::Population);
    assert_eq!(mx[0].domains.len(), 5);
    assert!(mx[0].cells.iter().flatten().all(|c| c.is_some_and(|s| s.n == 5)));
}

#[test]
fn cross_domain_two_domains() {
    let data = tiny_dataset(&["A", "B"], 4, 4);
    let cfg = tiny_config(&["tiny-d"]);
    let mut store = ResultsStore::in_memory();
    let report = run_cross_domain_experiment(
        &data.manifest,
        &data.store,
        &names(&["tiny-d"]),
        &[AdaptationMode::LinearProbe],
        &cfg,
        &mut store,
        &SweepOptions::default(),
    )
    .unwrap();
    assert_eq!(report.sessions_run, 10);
    assert_eq!(store.len(), 20);
    let sessions: BTreeSet<&str> = store.records().iter().map(|r| r.session_id.as_str()).collect();
    assert_eq!(sessions.len(), 10);

    let one = tiny_dataset(&["A"], 4, 4);
    let err = run_cross_domain_experiment(
        &one.manifest,
        &one.store,
        &names(&["tiny-d"]),
        &[AdaptationMode::LinearProbe],
        &cfg,
        &mut store,
        &SweepOptions::default(),
    )
    .unwrap_err();
    assert!(err.is_validation());
}

#[test]
fn missing_weights_skip_the_model_only() {
    let data = tiny_dataset(&["A"], 6, 5);
    let mut cfg = tiny_config(&["tiny-e", "tiny-f"]);
    cfg.scaling.fractions = vec![1.0];
    cfg.weights.insert("tiny-f".into(), "hf-hub:nobody/none".into());
    let mut store = ResultsStore::in_memory();
    let report = run_scaling_experiment(
        &data.manifest,
        &data.store,
        &names(&["tiny-e", "tiny-f"]),
        &[AdaptationMode::LinearProbe],
        &cfg,
        &mut store,
        &SweepOptions::default(),
    )
    .unwrap();
    assert_eq!(report.new_records(), 5);
    assert_eq!(report.skipped_models.len(), 1);
    assert_eq!(report.skipped_models[0].model, "tiny-f");
    assert!(report.skipped_models[0].reason.contains("external"));
    assert!(report.is_partial());

    let unknown = run_scaling_experiment(
        &data.manifest,
        &data.store,
        &names(&["no-such-model"]),
        &[AdaptationMode::LinearProbe],
        &cfg,
        &mut store,
        &SweepOptions::default(),
    )
    .unwrap_err();
    assert!(unknown.is_validation());
}

/// Delegates to an inner reader but fails one chosen region read.
struct FlakyReader<'a> {
    inner: &'a dyn TileReader,
    calls: AtomicUsize,
    fail_at: usize,
}

impl TileReader for FlakyReader<'_> {
    fn dimensions(&self, image_ref: &str) -> Result<(usize, usize)> {
        self.inner.dimensions(image_ref)
    }

    fn read_region(&self, image_ref: &str, x0: usize, y0: usize, w: usize, h: usize) -> Result<RawPatch> {
        if self.calls.fetch_add(1, Ordering::SeqCst) == self.fail_at {
            return Err(mitobench::Error::State("simulated read failure".into()));
        }
        self.inner.read_region(image_ref, x0, y0, w, h)
    }
}

#[test]
fn failed_session_does_not_abort_sweep() {
    let data = tiny_dataset(&["A"], 6, 6);
    let mut cfg = tiny_config(&["tiny-g"]);
    cfg.scaling.fractions = vec![1.0];
    let flaky = FlakyReader {
        inner: &data.store,
        calls: AtomicUsize::new(0),
        fail_at: 30,
    };
    let mut store = ResultsStore::in_memory();
    let report = run_scaling_experiment(
        &data.manifest,
        &flaky,
        &names(&["tiny-g"]),
        &[AdaptationMode::Lora],
        &cfg,
        &mut store,
        &SweepOptions::default(),
    )
    .unwrap();
    assert_eq!(report.failures.len(), 1);
    assert!(report.failures[0].reason.contains("simulated"));
    assert_eq!(report.new_records(), 4);
    assert!(report.is_partial());
    // The failure is not persisted; a resumed sweep fills the gap.
    assert_eq!(store.len(), 4);
    let resumed = run_scaling_experiment(
        &data.manifest,
        &data.store,
        &names(&["tiny-g"]),
        &[AdaptationMode::Lora],
        &cfg,
        &mut store,
        &SweepOptions::default(),
    )
    .unwrap();
    assert_eq!(resumed.new_records(), 1);
    assert!(resumed.failures.is_empty());
}

fn synthetic_record(
    model: &str,
    mode: AdaptationMode,
    kind: PlanKind,
    fold: usize,
    fraction: Option<f64>,
    domains: Option<(&str, &str)>,
    auroc: f64,
) -> RunRecord {
    let config = serde_json::json!({ "model": model, "fold": fold });
    let run_id = format!(
        "{}/{model}/{mode}/{fold}/{fraction:?}/{domains:?}",
        kind.as_str()
    );
    RunRecord {
        schema_version: STORE_SCHEMA_VERSION,
        session_id: format!("{}/{model}/{mode}/{fold}/{fraction:?}/{:?}", kind.as_str(), domains.map(|d| d.0)),
        run_id,
        model: model.into(),
        mode,
        dataset: "synthetic".into(),
        plan_kind: kind,
        fold_index: fold,
        fraction,
        train_domain: domains.map(|d| d.0.to_string()),
        test_domain: domains.map(|d| d.1.to_string()),
        in_domain: domains.map(|d| d.0 == d.1),
        seed: fold as u64,
        eval: EvalResult {
            n_pos: 10,
            n_neg: 10,
            balanced_accuracy: auroc - 0.1,
            weighted_f1: auroc - 0.05,
            auroc: Some(auroc),
            threshold: 0.5,
            single_class: false,
        },
        best_epoch: 0,
        val_loss: Some(0.5),
        wall_time_s: 1.0,
        config_digest: config_digest(&config),
        config,
        digest: String::new(),
    }
    .seal()
}

fn synthetic_scaling_store(models: &[&str]) -> Vec<RunRecord> {
    let mut out = Vec::new();
    for (mi, m) in models.iter().enumerate() {
        for (fi, f) in [0.001, 0.01, 0.1, 1.0].into_iter().enumerate() {
            for fold in 0..5 {
                let v = 0.6 + 0.08 * fi as f64 + 0.01 * fold as f64 + 0.02 * mi as f64;
                out.push(synthetic_record(m, AdaptationMode::Lora, PlanKind::Scaling, fold, Some(f), None, v));
            }
        }
    }
    out
}

fn synthetic_domain_store(domains: &[&str]) -> Vec<RunRecord> {
    let mut out = Vec::new();
    for (i, a) in domains.iter().enumerate() {
        for run in 0..5 {
            for (j, b) in domains.iter().enumerate() {
                let v = if i == j { 0.9 } else { 0.7 } + 0.01 * run as f64 - 0.005 * j as f64;
                out.push(synthetic_record(
                    "m",
                    AdaptationMode::LinearProbe,
                    PlanKind::CrossDomain,
                    run,
                    None,
                    Some((a, b)),
                    v,
                ));
            }
        }
    }
    out
}

#[test]
fn aggregation_examples_and_order_independence() {
    let mut recs = vec![
        synthetic_record("m", AdaptationMode::Lora, PlanKind::Scaling, 0, Some(1.0), None, 0.8),
        synthetic_record("m", AdaptationMode::Lora, PlanKind::Scaling, 1, Some(1.0), None, 0.9),
        synthetic_record("s", AdaptationMode::Lora, PlanKind::Scaling, 0, Some(1.0), None, 0.7),
    ];
    let agg = aggregate(&recs, &[GroupBy::Model], StdKind::Population).unwrap();
    assert_eq!(agg.rows.len(), 2);
    let m = agg.rows[0].get(Metric::Auroc).unwrap();
    assert!((m.mean - 0.85).abs() < 1e-12 && (m.std - 0.05).abs() < 1e-12);
    let s = agg.rows[1].get(Metric::Auroc).unwrap();
    assert_eq!((s.mean, s.std), (0.7, 0.0));

    recs.extend(synthetic_scaling_store(&["a", "b"]));
    recs.extend(synthetic_domain_store(&["A", "B", "C"]));
    let keys = [GroupBy::PlanKind, GroupBy::Model, GroupBy::Mode, GroupBy::Fraction, GroupBy::InDomain];
    let base = aggregate(&recs, &keys, StdKind::Sample).unwrap();
    let base_t5 = cross_domain_table(&recs, StdKind::Population);
    let base_t3 = fraction_table(&recs, 1.0, StdKind::Population);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        recs.shuffle(&mut rng);
        assert_eq!(aggregate(&recs, &keys, StdKind::Sample).unwrap(), base);
        assert_eq!(cross_domain_table(&recs, StdKind::Population), base_t5);
        assert_eq!(fraction_table(&recs, 1.0, StdKind::Population), base_t3);
    }
    assert!(aggregate(&[], &keys, StdKind::Population).is_err());
}

#[test]
fn table_shapes() {
    let mut recs = synthetic_scaling_store(&["a", "b"]);
    recs.extend(synthetic_domain_store(&["A", "B", "C", "D", "E"]));
    let t = fraction_table(&recs, 1.0, StdKind::Population);
    assert_eq!(t.len(), 2);
    assert!(t.iter().all(|r| r.runs == 5 && r.metrics.len() == 3));
    let t5 = cross_domain_table(&recs, StdKind::Population);
    assert_eq!(t5.len(), 1);
    assert_eq!(t5[0].columns().len(), 6);
    assert!(t5[0].columns().iter().all(|(_, v)| v.is_some()));
    // Macro over scenarios: in-domain AUROC is the mean of the five diagonal
    // scenario means.
    let diag: f64 = (0..5).map(|j| 0.9 + 0.02 - 0.005 * j as f64).sum::<f64>() / 5.0;
    assert!((t5[0].in_domain[&Metric::Auroc].mean - diag).abs() < 1e-12);
}

#[test]
fn report_files_and_plot_contents() {
    let dir = tempfile::tempdir().unwrap();
    let recs = synthetic_scaling_store(&["a", "b"]);
    let out = dir.path().join("scaling");
    let files = emit_report(&recs, ReportFormat::Md, &out, StdKind::Population).unwrap();
    assert!(files.files.iter().all(|f| f.exists()));
    let svg = std::fs::read_to_string(out.join("scaling_curves.svg")).unwrap();
    let panel = svg.split(r#"data-metric="auroc""#).nth(1).unwrap().split("</g>").next().unwrap();
    assert_eq!(panel.matches(r#"class="curve""#).count(), 2);
    assert_eq!(panel.matches(r#"class="point""#).count(), 8);
    let md = std::fs::read_to_string(out.join("report.md")).unwrap();
    assert!(md.contains("| a | lora | 5 |"));
    let table = std::fs::read_to_string(out.join("results_full_data.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);

    let recs = synthetic_domain_store(&["A", "B", "C", "D", "E"]);
    let out = dir.path().join("domain");
    emit_report(&recs, ReportFormat::Csv, &out, StdKind::Population).unwrap();
    assert!(!out.join("report.md").exists());
    let svg = std::fs::read_to_string(out.join("crossdomain_m_probe.svg")).unwrap();
    assert_eq!(svg.matches(r#"class="cell""#).count(), 25);
    let matrix = std::fs::read_to_string(out.join("crossdomain_matrix.csv")).unwrap();
    assert_eq!(matrix.lines().count(), 26);

    let empty = dir.path().join("empty");
    assert!(emit_report(&[], ReportFormat::Md, &empty, StdKind::Population).is_err());
    assert!(!empty.exists());
}

#[test]
fn store_detects_partial_and_tampered_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    let mut store = ResultsStore::open(&path).unwrap();
    for r in synthetic_scaling_store(&["a"]).into_iter().take(4) {
        store.append(r).unwrap();
    }
    let dup = store.records()[0].clone();
    assert!(store.append(dup).is_err());

    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let tampered = lines[1].replace("\"auroc\":0.6", "\"auroc\":0.9");
    assert_ne!(tampered, lines[1]);
    let cut = &lines[3][..lines[3].len() / 2];
    std::fs::write(&path, format!("{}\n{}\n{}\n{}", lines[0], tampered, lines[2], cut)).unwrap();
    let reread = ResultsStore::open(&path).unwrap();
    assert_eq!(reread.len(), 2);
    assert_eq!(reread.corrupt_lines().len(), 2);
    assert_eq!(reread.corrupt_lines()[0].line, 2);
    assert!(reread.corrupt_lines()[1].reason.contains("truncated"));
}

#[test]
fn config_file_round_trip() {
    let cfg = tiny_config(&["tiny-h"]);
    let text = toml::to_string(&cfg).unwrap();
    let back = mitobench::bench::BenchConfig::parse_toml(&text).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn checkpoints_reproduce_session_metrics() {
    let data = tiny_dataset(&["A"], 6, 12);
    let mut cfg = tiny_config(&["tiny-ck"]);
    cfg.scaling.fractions = vec![1.0];
    let dir = tempfile::tempdir().unwrap();
    let artifacts = dir.path().join("artifacts");
    let mut store = ResultsStore::in_memory();
    let modes = [AdaptationMode::LinearProbe, AdaptationMode::Lora, AdaptationMode::FullFinetune];
    let opts = SweepOptions {
        artifacts: Some(artifacts.clone()),
    };
    run_scaling_experiment(&data.manifest, &data.store, &names(&["tiny-ck"]), &modes, &cfg, &mut store, &opts).unwrap();
    assert_eq!(store.len(), 15);

    let plan = mitobench::splits::make_scaling_plan(&data.manifest, &cfg.scaling, cfg.seed).unwrap();
    let mut test = DatasetManifest::new("heldout");
    test.images = data.manifest.images.clone();
    test.records = data.manifest.records.iter().filter(|r| plan.test_cases.contains(&r.case_id)).cloned().collect();

    let sessions: Vec<RunRecord> = store.records().iter().filter(|r| r.fold_index == 1).cloned().collect();
    assert_eq!(sessions.len(), 3);
    for rec in sessions {
        let (ckpt, trace) = session_artifacts(&artifacts, &rec.session_id);
        assert!(trace.exists());
        let evaluated = evaluate_checkpoint(&ckpt, &test, &data.store, &cfg, &mut store).unwrap();
        assert_eq!(evaluated.mode, rec.mode);
        assert_eq!(evaluated.eval, rec.eval, "{}", rec.session_id);
        assert_eq!(evaluated.session_id, rec.session_id);
        assert!(evaluated.run_id.starts_with("eval/heldout/"));
    }
    assert_eq!(store.len(), 18);

    // A checkpoint over different base weights is rejected.
    let (ckpt, _) = session_artifacts(&artifacts, &store.records()[0].session_id);
    cfg.weights.insert("tiny-ck".into(), "seed:99".into());
    let mut archive = mitobench::archive::TensorArchive::load(&ckpt).unwrap();
    archive.metadata.remove("weights");
    let tampered = dir.path().join("tampered.ckpt");
    archive.save(&tampered, true).unwrap();
    let err = evaluate_checkpoint(&tampered, &test, &data.store, &cfg, &mut store).unwrap_err();
    assert!(err.to_string().contains("differ"), "{err}");
}
