use std::sync::Arc;

use mitobench::adapt::{adapt, inject_lora, linear_probe, AdaptationMode, AdaptedModel, LoraConfig, LoraTarget};
use mitobench::archive::{Tensor, TensorArchive};
use mitobench::backbone::{
    from_archive, load_weights, pool_token_tensor, to_archive, BackboneRegistry, BackboneSpec, EmbeddingRule,
    NameMapping, VisionTransformer, WeightSource,
};
use mitobench::train::{head_loss_grad, LossConvention};
use mitobench::Error;
use ndarray::{Array3, Array4, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_spec(name: &str, depth: usize, width: usize, heads: usize, mlp: usize, input: usize) -> Arc<BackboneSpec> {
    let mut spec = BackboneSpec::toy(name, depth, width, heads, mlp, 4);
    spec.input_size = input;
    Arc::new(spec)
}

fn images<T: mitobench::Real>(rng: &mut ChaCha8Rng, n: usize, side: usize) -> Array4<T> {
    Array4::from_shape_fn((n, 3, side, side), |_| T::lit(rng.random_range(-1.0..1.0)))
}

fn max_abs_diff(a: &ndarray::Array2<f32>, b: &ndarray::Array2<f32>) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn token_shapes_finiteness_and_determinism() {
    let spec = small_spec("t", 2, 32, 4, 64, 32);
    let vit = VisionTransformer::<f32>::seeded(spec.clone(), 0).unwrap();
    let x = Array4::<f32>::zeros((3, 3, 32, 32));
    let tokens = vit.forward_tokens(x.view()).unwrap();
    assert_eq!(tokens.shape(), &[3, 5, 32]);
    assert!(tokens.iter().all(|v| v.is_finite()));
    let emb = vit.embed(x.view()).unwrap();
    assert_eq!(emb.row(0), emb.row(2));

    let mean_spec = Arc::new((*spec).clone().with_rule(EmbeddingRule::ClassPlusMeanPatch));
    let vit2 = VisionTransformer::<f32>::seeded(mean_spec, 0).unwrap();
    assert_eq!(vit2.embed(x.view()).unwrap().shape(), &[3, 64]);
}

#[test]
fn pooling_on_constant_tokens() {
    // Tokens: class, one register, four patches.
    let (c0, c1, reg) = (0.25f64, -2.0f64, 9.0f64);
    let tokens = Array3::from_shape_fn((2, 6, 4), |(_, t, _)| match t {
        0 => c0,
        1 => reg,
        _ => c1,
    });
    let both = pool_token_tensor(&tokens, 1, EmbeddingRule::ClassPlusMeanPatch);
    assert_eq!(both.shape(), &[2, 8]);
    for row in both.rows() {
        assert!(row.iter().take(4).all(|&v| v == c0));
        assert!(row.iter().skip(4).all(|&v| v == c1));
    }
    let cls = pool_token_tensor(&tokens, 1, EmbeddingRule::ClassToken);
    assert!(cls.iter().all(|&v| v == c0));
}

#[test]
fn weights_round_trip_and_structural_errors() {
    let spec = small_spec("rt", 2, 16, 2, 32, 16);
    let a = load_weights::<f32>(&spec, &WeightSource::Seeded(7)).unwrap();
    let b = load_weights::<f32>(&spec, &WeightSource::Seeded(7)).unwrap();
    assert_eq!(a.base_checksum(), b.base_checksum());
    assert_ne!(
        a.base_checksum(),
        load_weights::<f32>(&spec, &WeightSource::Seeded(8)).unwrap().base_checksum()
    );

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    to_archive(&a).save(&path, true).unwrap();
    let loaded = load_weights::<f32>(&spec, &WeightSource::parse(path.to_str().unwrap()).unwrap()).unwrap();
    let mut x = Vec::new();
    a.visit_params(&mut |n, _, v| x.push((n.to_string(), v.to_owned())));
    let mut y = Vec::new();
    loaded.visit_params(&mut |n, _, v| y.push((n.to_string(), v.to_owned())));
    assert_eq!(x, y);

    let deeper = small_spec("rt", 3, 16, 2, 32, 16);
    match from_archive::<f32>(&deeper, &to_archive(&a)) {
        Err(Error::MissingTensor(name)) => assert!(name.starts_with("blocks.2."), "{name}"),
        other => panic!("expected missing tensor, got {other:?}"),
    }
    let ext = load_weights::<f32>(&spec, &WeightSource::parse("hf-hub:someone/model").unwrap());
    assert!(matches!(ext, Err(Error::MissingWeights { .. })));
}

#[test]
fn timm_names_with_fused_qkv_load_identically() {
    let native = small_spec("tm", 2, 16, 2, 32, 16);
    let src = load_weights::<f32>(&native, &WeightSource::Seeded(3)).unwrap();
    let arch = to_archive(&src);
    let mut timm = TensorArchive::default();
    for (name, t) in &arch.tensors {
        let renamed = name
            .replace("patch_embed.", "patch_embed.proj.")
            .replace(".attn.o.", ".attn.proj.")
            .replace(".gamma", ".weight")
            .replace(".beta", ".bias");
        if name.contains(".attn.q.") || name.contains(".attn.k.") || name.contains(".attn.v.") {
            continue;
        }
        timm.insert(renamed, t.clone());
    }
    for block in 0..2 {
        for leaf in ["weight", "bias"] {
            let mut data = Vec::new();
            let mut shape = Vec::new();
            for part in ["q", "k", "v"] {
                let t = &arch.tensors[&format!("blocks.{block}.attn.{part}.{leaf}")];
                data.extend_from_slice(&t.data);
                shape = t.shape.clone();
            }
            shape[0] *= 3;
            timm.insert(format!("blocks.{block}.attn.qkv.{leaf}"), Tensor::new(shape, data).unwrap());
        }
    }
    timm.insert("head.weight", Tensor::new(vec![10, 16], vec![0.0; 160]).unwrap());
    let mut spec = (*native).clone();
    spec.name_mapping = NameMapping::Timm;
    let loaded = from_archive::<f32>(&Arc::new(spec), &timm).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = images::<f32>(&mut rng, 2, 16);
    assert_eq!(loaded.embed(x.view()).unwrap(), src.embed(x.view()).unwrap());
}

#[test]
fn zero_init_adapters_are_identity() {
    let reg = BackboneRegistry::with_builtins();
    let spec = reg.get("toy-vit").unwrap();
    let vit = load_weights::<f32>(&spec, &WeightSource::Seeded(0)).unwrap();
    let model = inject_lora(&vit, &LoraConfig::default()).unwrap();
    let probe = linear_probe(&vit, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..4 {
        let x = images::<f32>(&mut rng, 5, 224);
        let a = model.features(x.view()).unwrap();
        let b = probe.features(x.view()).unwrap();
        assert!(max_abs_diff(&a, &b) <= 1e-6);
    }
}

#[test]
fn parameter_accounting() {
    let spec = small_spec("pa", 2, 32, 4, 64, 32);
    let vit = VisionTransformer::<f32>::seeded(spec, 0).unwrap();
    let cfg = LoraConfig {
        rank: 2,
        ..Default::default()
    };
    let model = inject_lora(&vit, &cfg).unwrap();
    let adapters: usize = model
        .trainable_parameters()
        .iter()
        .filter(|(n, _)| n.contains("lora_"))
        .map(|(_, c)| c)
        .sum();
    assert_eq!(adapters, 1792);
    assert_eq!(adapters, 2 * (4 * (2 * 2 * 32) + 2 * (2 * (32 + 64))));
    assert_eq!(model.trainable_count(), 1792 + 2 * 32 + 2);

    let too_big = LoraConfig {
        rank: 33,
        ..Default::default()
    };
    assert!(inject_lora(&vit, &too_big).is_err());
}

#[test]
fn merge_matches_adapter_path() {
    let spec = small_spec("mg", 2, 16, 2, 32, 32);
    let vit = VisionTransformer::<f32>::seeded(spec, 5).unwrap();
    let mut zero = inject_lora(&vit, &LoraConfig { rank: 4, ..Default::default() }).unwrap();
    let merged = zero.merge_lora().unwrap();
    let (mut base, mut after) = (Vec::new(), Vec::new());
    vit.visit_params(&mut |_, _, v| base.extend(v.iter().copied()));
    merged.visit_params(&mut |_, _, v| after.extend(v.iter().copied()));
    assert_eq!(base.len(), after.len());
    assert!(base.iter().zip(&after).all(|(a, b)| (a - b).abs() <= 1e-7));
    assert!(matches!(zero.merge_lora(), Err(Error::State(_))));

    let mut model = inject_lora(&vit, &LoraConfig { rank: 4, ..Default::default() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    model.visit_trainable_mut(&mut |name, mut v| {
        if name.contains("lora_") {
            v.mapv_inplace(|_| rng.random_range(-0.2..0.2));
        }
    });
    let x = images::<f32>(&mut rng, 8, 32);
    let adapter_path = model.logits(x.view()).unwrap();
    model.merge_lora().unwrap();
    assert!(model.is_merged());
    let merged_path = model.logits(x.view()).unwrap();
    let num: f32 = (&adapter_path - &merged_path).mapv(|v| v * v).sum().sqrt();
    let den: f32 = adapter_path.mapv(|v| v * v).sum().sqrt();
    assert!(num / den <= 1e-5, "relative difference {}", num / den);
}

fn loss_of(model: &AdaptedModel<f64>, x: &Array4<f64>, labels: &[u8]) -> f64 {
    let logits = model.logits(x.view()).unwrap();
    head_loss_grad(logits.view(), labels, LossConvention::TwoLogitSoftmax).unwrap().0
}

fn perturb(model: &mut AdaptedModel<f64>, name: &str, idx: usize, delta: f64) {
    model.visit_trainable_mut(&mut |n, mut v| {
        if n == name {
            let slot = v.iter_mut().nth(idx).unwrap();
            *slot += delta;
        }
    });
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let spec = small_spec("gc", 1, 8, 2, 16, 16);
    let vit = VisionTransformer::<f64>::seeded(spec, 2).unwrap();
    let cfg = LoraConfig {
        rank: 2,
        alpha: 3.0,
        dropout_p: 0.0,
        targets: LoraTarget::ALL.to_vec(),
        ..Default::default()
    };
    let mut model = adapt(&vit, AdaptationMode::Lora, Some(&cfg), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    model.visit_trainable_mut(&mut |name, mut v| {
        if name.contains("lora_b") {
            v.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
    });
    let x = images::<f64>(&mut rng, 3, 16);
    let labels = [1u8, 0, 1];
    let (logits, cache) = model.forward_train(x.view(), None).unwrap();
    let (_, dlogits) = head_loss_grad(logits.view(), &labels, LossConvention::TwoLogitSoftmax).unwrap();
    let grads = model.backward(&cache, dlogits.view());

    let names: Vec<String> = grads
        .keys()
        .filter(|n| n.contains("lora_") || n.as_str() == "head.weight")
        .cloned()
        .collect();
    assert_eq!(names.len(), 13);
    let eps = 1e-5;
    for name in names {
        let analytic: &ArrayD<f64> = &grads[&name];
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            perturb(&mut model, &name, i, eps);
            let up = loss_of(&model, &x, &labels);
            perturb(&mut model, &name, i, -2.0 * eps);
            let down = loss_of(&model, &x, &labels);
            perturb(&mut model, &name, i, eps);
            numeric.push((up - down) / (2.0 * eps));
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
        assert!(scale > 0.0, "{name} has a zero gradient");
        assert!(diff / scale <= 1e-4, "{name}: relative error {}", diff / scale);
    }
}

#[test]
fn adapter_checkpoint_round_trip() {
    let spec = small_spec("ck", 1, 16, 2, 32, 16);
    let vit = VisionTransformer::<f32>::seeded(spec, 9).unwrap();
    let mut model = adapt(&vit, AdaptationMode::Lora, Some(&LoraConfig { rank: 2, ..Default::default() }), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    model.visit_trainable_mut(&mut |_, mut v| v.mapv_inplace(|_| rng.random_range(-0.3..0.3)));
    let archive = model.to_archive(&Default::default()).unwrap();
    let back = AdaptedModel::from_archive(&vit, &archive).unwrap();
    let x = images::<f32>(&mut rng, 2, 16);
    assert_eq!(model.logits(x.view()).unwrap(), back.logits(x.view()).unwrap());
    assert_eq!(back.frozen_checksum(), model.frozen_checksum());
}
