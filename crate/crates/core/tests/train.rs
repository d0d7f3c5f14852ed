mod common;

use mitobench::adapt::{adapt, AdaptationMode, LoraConfig};
use mitobench::backbone::{load_weights, WeightSource};
use mitobench::ingest::{AnnotationRecord, AugmentPolicy, PatchSpec};
use mitobench::seed::rng_from;
use mitobench::train::{
    load_trace, save_trace, train, validate, FoldData, SampleKind, SamplerPolicy, TrainConfig,
    TrainingPool,
};

use common::oracles::oracle_lr;
use common::{tiny_dataset, tiny_spec};

#[test]
fn default_config_runs_8000_steps() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.total_steps(), 8000);
    assert_eq!(cfg.steps_per_epoch(), 80);
    assert_eq!(cfg.max_lr, 1e-4);
    let peak = cfg.schedule.peak_step(8000);
    assert_eq!(oracle_lr(peak, 8000, cfg.max_lr, &cfg.schedule), 1e-4);
    assert!((oracle_lr(0, 8000, cfg.max_lr, &cfg.schedule) - 4e-6).abs() < 1e-20);
    assert!((oracle_lr(7999, 8000, cfg.max_lr, &cfg.schedule) - 1e-8).abs() < 1e-22);
}

fn records(ds: &mitobench::ingest::SyntheticDataset) -> Vec<&AnnotationRecord> {
    ds.manifest.records.iter().collect()
}

#[test]
fn sampler_class_fractions_within_three_sigma() {
    let ds = tiny_dataset(&["A"], 4, 7);
    let pool = records(&ds);
    let patch = PatchSpec::for_backbone(&tiny_spec("s")).unwrap();
    let tp = TrainingPool::new(&ds.store, &pool, &pool, patch, AugmentPolicy::default(), SamplerPolicy::default()).unwrap();
    let n = 12_800;
    let mut rng = rng_from(0, &["stats"]);
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let d = tp.draw(&mut rng);
        counts[d.kind as usize] += 1;
    }
    for (count, p) in counts.iter().zip([0.5, 0.25, 0.25]) {
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let frac = *count as f64 / n as f64;
        assert!((frac - p).abs() <= 3.0 * sigma, "{counts:?}");
    }
    assert!((0.5f64 * 0.5 / n as f64).sqrt() * 3.0 < 0.014);
}

#[test]
fn degenerate_policy_and_determinism() {
    let ds = tiny_dataset(&["A"], 3, 8);
    let pool = records(&ds);
    let patch = PatchSpec::for_backbone(&tiny_spec("s")).unwrap();
    let only_pos = SamplerPolicy {
        p_mitotic: 1.0,
        p_hard_negative: 0.0,
        p_random: 0.0,
    };
    let tp = TrainingPool::new(&ds.store, &pool, &pool, patch.clone(), AugmentPolicy::default(), only_pos).unwrap();
    let mut rng = rng_from(1, &[]);
    for _ in 0..10 {
        let b = tp.next_batch(8, &mut rng).unwrap();
        assert!(b.labels.iter().all(|&l| l == 1));
        assert!(b.kinds.iter().all(|&k| k == SampleKind::Mitotic));
    }

    let tp = TrainingPool::new(&ds.store, &pool, &pool, patch, AugmentPolicy::default(), SamplerPolicy::default()).unwrap();
    let (mut r1, mut r2) = (rng_from(5, &[]), rng_from(5, &[]));
    for _ in 0..5 {
        let a = tp.next_batch(6, &mut r1).unwrap();
        let b = tp.next_batch(6, &mut r2).unwrap();
        assert_eq!(a.ids, b.ids);
        assert_eq!(a.images, b.images);
    }
}

fn small_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        epoch_length: 32,
        pseudo_epochs: epochs,
        eval_batch_size: 64,
        max_lr: 1e-4,
        ..Default::default()
    }
}

#[test]
fn lr_trace_follows_schedule_and_base_stays_frozen() {
    let ds = tiny_dataset(&["A"], 4, 9);
    let spec = std::sync::Arc::new(tiny_spec("tr"));
    let vit = load_weights::<f32>(&spec, &WeightSource::Seeded(0)).unwrap();
    let lora = LoraConfig {
        rank: 2,
        alpha: 2.0,
        ..Default::default()
    };
    let mut model = adapt(&vit, AdaptationMode::Lora, Some(&lora), 3).unwrap();
    let before = model.frozen_checksum();
    let cases: Vec<String> = ds.manifest.case_counts().into_keys().collect();
    let (val_case, train_cases) = cases.split_last().unwrap();
    let train_recs: Vec<&AnnotationRecord> =
        ds.manifest.records.iter().filter(|r| train_cases.contains(&r.case_id)).collect();
    let val: Vec<&AnnotationRecord> = ds.manifest.records.iter().filter(|r| &r.case_id == val_case).collect();
    let data = FoldData {
        store: &ds.store,
        train: train_recs.clone(),
        context: train_recs,
        val,
        patch: PatchSpec::for_backbone(&spec).unwrap(),
        sampler: SamplerPolicy::default(),
    };
    let cfg = small_cfg(5);
    let out = train(&mut model, &data, &cfg, None).unwrap();
    assert_eq!(out.trace.len(), 20);
    for (i, r) in out.trace.iter().enumerate() {
        assert_eq!(r.step, i);
        assert_eq!(r.lr, oracle_lr(i, 20, 1e-4, &cfg.schedule), "step {i}");
    }
    let peak = out.trace.iter().map(|r| r.lr).fold(0.0, f64::max);
    assert_eq!(peak, 1e-4);
    assert_eq!(model.frozen_checksum(), before);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.jsonl");
    save_trace(&out.trace, &path).unwrap();
    assert_eq!(load_trace(&path).unwrap(), out.trace);
}

#[test]
fn same_seed_same_trace_and_validation_improves() {
    let ds = tiny_dataset(&["A"], 5, 10);
    let spec = std::sync::Arc::new(tiny_spec("tr2"));
    let vit = load_weights::<f32>(&spec, &WeightSource::Seeded(1)).unwrap();
    let lora = LoraConfig {
        rank: 2,
        alpha: 2.0,
        ..Default::default()
    };
    let cases: Vec<String> = ds.manifest.case_counts().into_keys().collect();
    let train_recs: Vec<&AnnotationRecord> = ds.manifest.records.iter().filter(|r| r.case_id != cases[0]).collect();
    let val: Vec<&AnnotationRecord> = ds.manifest.records.iter().filter(|r| r.case_id == cases[0]).collect();
    let data = FoldData {
        store: &ds.store,
        train: train_recs.clone(),
        context: train_recs,
        val,
        patch: PatchSpec::for_backbone(&spec).unwrap(),
        sampler: SamplerPolicy::default(),
    };
    let mut cfg = small_cfg(6);
    cfg.max_lr = 3e-3;
    cfg.seed = 4;
    let run = || {
        let mut model = adapt(&vit, AdaptationMode::Lora, Some(&lora), 3).unwrap();
        let initial = validate(&model, &data, &cfg, None).unwrap().unwrap().0;
        let out = train(&mut model, &data, &cfg, None).unwrap();
        (initial, out)
    };
    let (initial, a) = run();
    let (_, b) = run();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.best.epoch, b.best.epoch);
    let best = a.best.val_loss.unwrap();
    assert!(best < initial, "best {best} vs initial {initial}");
    let min_epoch = a.epochs.iter().filter_map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(best, min_epoch);
}

#[test]
fn selection_needs_validation() {
    let ds = tiny_dataset(&["A"], 3, 11);
    let spec = std::sync::Arc::new(tiny_spec("tr3"));
    let vit = load_weights::<f32>(&spec, &WeightSource::Seeded(1)).unwrap();
    let recs = records(&ds);
    let data = FoldData {
        store: &ds.store,
        train: recs.clone(),
        context: recs,
        val: Vec::new(),
        patch: PatchSpec::for_backbone(&spec).unwrap(),
        sampler: SamplerPolicy::default(),
    };
    let mut model = adapt(&vit, AdaptationMode::FullFinetune, None, 0).unwrap();
    let cfg = small_cfg(2);
    assert!(train(&mut model, &data, &cfg, None).unwrap_err().is_validation());
    let cfg = TrainConfig {
        select_best: false,
        ..cfg
    };
    let before = model.trainable_snapshot();
    let out = train(&mut model, &data, &cfg, None).unwrap();
    assert_eq!(out.best.epoch, 1);
    assert!(out.best.val_loss.is_none());
    // Full fine-tuning moves the backbone itself.
    let after = model.trainable_snapshot();
    assert!(before.keys().any(|k| k.starts_with("blocks.0.") && before[k] != after[k]));
}
