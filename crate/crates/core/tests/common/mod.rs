#![allow(dead_code)]

pub mod oracles;

use mitobench::backbone::BackboneSpec;
use mitobench::bench::BenchConfig;
use mitobench::ingest::{
    generate_synthetic, AnnotationRecord, DatasetManifest, ImageInfo, Label, SyntheticConfig, SyntheticDataset,
};

/// A one-block transformer on 32 px inputs, small enough for sweep tests.
pub fn tiny_spec(name: &str) -> BackboneSpec {
    let mut spec = BackboneSpec::toy(name, 1, 16, 2, 32, 4);
    spec.input_size = 32;
    spec
}

pub fn tiny_dataset(domains: &[&str], cases_per_domain: usize, seed: u64) -> SyntheticDataset {
    generate_synthetic(&SyntheticConfig {
        name: "tiny".into(),
        seed,
        domains: domains.iter().map(|d| d.to_string()).collect(),
        cases_per_domain,
        image_size: 192,
        figures_per_image: 3,
        hard_negatives_per_image: 3,
        blob_radius: 8.0,
        min_spacing: 36.0,
        ..Default::default()
    })
    .expect("valid synthetic config")
}

/// Sweep config with a few optimizer steps per session.
pub fn tiny_config(models: &[&str]) -> BenchConfig {
    let mut cfg = BenchConfig::default();
    for m in models {
        cfg.backbones.push(tiny_spec(m));
    }
    cfg.train.batch_size = 4;
    cfg.train.epoch_length = 8;
    cfg.train.pseudo_epochs = 2;
    cfg.train.max_lr = 1e-3;
    cfg.train.eval_batch_size = 64;
    cfg.train.random_bank = 8;
    cfg.lora.rank = 2;
    cfg.lora.alpha = 2.0;
    cfg
}

/// Manifest with one image per case and the given (mitotic, hard negative)
/// counts per case; all cases in one domain unless `domains` says otherwise.
pub fn point_manifest(cases: &[(usize, usize)], domains: usize) -> DatasetManifest {
    let mut m = DatasetManifest::new("prop");
    for (i, &(pos, neg)) in cases.iter().enumerate() {
        let case = format!("case{i:03}");
        let image = format!("{case}.png");
        m.images.insert(image.clone(), ImageInfo { width: 2000, height: 2000 });
        for k in 0..pos + neg {
            m.records.push(AnnotationRecord {
                annotation_id: format!("{case}-{k}"),
                case_id: case.clone(),
                domain: format!("D{}", i % domains),
                image_ref: image.clone(),
                x: 100.0 + (k % 10) as f64 * 150.0,
                y: 100.0 + (k / 10 % 10) as f64 * 150.0,
                label: if k < pos { Label::MitoticFigure } else { Label::HardNegative },
            });
        }
    }
    m.validate().unwrap();
    m
}
