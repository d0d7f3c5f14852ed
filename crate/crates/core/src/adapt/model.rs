use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayD, ArrayView2, ArrayView4, ArrayViewMutD, IxDyn};
use serde::{Deserialize, Serialize};

use super::lora::{LoraConfig, LoraLayer};
use super::probe::ProbeHead;
use crate::archive::{Tensor, TensorArchive};
use crate::backbone::{Architecture, BackboneSpec, ForwardCache, GradMask, Grads, ParamGroup, VisionTransformer};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::seed::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptationMode {
    #[serde(rename = "probe")]
    LinearProbe,
    Lora,
    #[serde(rename = "full")]
    FullFinetune,
}

impl AdaptationMode {
    pub const ALL: [AdaptationMode; 3] = [
        AdaptationMode::LinearProbe,
        AdaptationMode::Lora,
        AdaptationMode::FullFinetune,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AdaptationMode::LinearProbe => "probe",
            AdaptationMode::Lora => "lora",
            AdaptationMode::FullFinetune => "full",
        }
    }

    /// Rejects modes the backbone architecture cannot host.
    pub fn check_supported(self, spec: &BackboneSpec) -> Result<()> {
        match (self, spec.architecture) {
            (AdaptationMode::Lora, Architecture::Convolutional) => Err(Error::Unsupported(format!(
                "LoRA needs attention and MLP projections; `{}` is convolutional",
                spec.name
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for AdaptationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdaptationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "probe" | "linear_probe" | "linprob" => Ok(AdaptationMode::LinearProbe),
            "lora" => Ok(AdaptationMode::Lora),
            "full" | "full_finetune" | "end-to-end" => Ok(AdaptationMode::FullFinetune),
            other => Err(Error::invalid("mode", format!("unknown mode `{other}`"))),
        }
    }
}

/// A backbone plus classification head, with the trainable set fixed by
/// the adaptation mode.
#[derive(Debug, Clone)]
pub struct AdaptedModel<T: Real> {
    backbone: VisionTransformer<T>,
    mode: AdaptationMode,
    pub head: ProbeHead<T>,
    lora: Option<LoraConfig>,
    merged: bool,
}

/// Training-forward state for [`AdaptedModel::backward`].
pub struct TrainCache<T: Real> {
    features: Array2<T>,
    backbone: Option<ForwardCache<T>>,
}

impl<T: Real> TrainCache<T> {
    pub fn features(&self) -> &Array2<T> {
        &self.features
    }
}

fn head_for<T: Real>(backbone: &VisionTransformer<T>, seed: u64) -> ProbeHead<T> {
    let mut rng = seed::rng_from(seed, &["head-init", &backbone.spec().name]);
    ProbeHead::seeded(&mut rng, backbone.spec().feature_dim, true)
}

/// Wraps every targeted projection of every block with a fresh adapter
/// (`A` seeded uniform, `B = 0`). Base weights are copied bit-identically.
pub fn inject_lora<T: Real>(backbone: &VisionTransformer<T>, config: &LoraConfig) -> Result<AdaptedModel<T>> {
    let spec = backbone.spec().clone();
    AdaptationMode::Lora.check_supported(&spec)?;
    config.validate(spec.width, spec.mlp_dim)?;
    if backbone.has_adapters() {
        return Err(Error::State("backbone already carries adapters".into()));
    }
    let mut adapted = backbone.clone();
    let mut rng = seed::rng_from(config.seed, &["lora-init", &spec.name]);
    let gamma = config.gamma();
    for block in adapted.blocks.iter_mut() {
        for &target in &config.targets {
            let proj = block.projection_mut(target.path()).expect("known projection");
            if proj.adapter.is_some() {
                continue;
            }
            proj.adapter = Some(LoraLayer::new(
                &mut rng,
                proj.out_dim(),
                proj.in_dim(),
                config.rank,
                gamma,
                config.dropout_p,
            ));
        }
    }
    Ok(AdaptedModel {
        head: head_for(&adapted, config.seed),
        backbone: adapted,
        mode: AdaptationMode::Lora,
        lora: Some(config.clone()),
        merged: false,
    })
}

/// Frozen backbone with a trainable head.
pub fn linear_probe<T: Real>(backbone: &VisionTransformer<T>, head_seed: u64) -> AdaptedModel<T> {
    AdaptedModel {
        head: head_for(backbone, head_seed),
        backbone: backbone.clone(),
        mode: AdaptationMode::LinearProbe,
        lora: None,
        merged: false,
    }
}

/// Every backbone weight and the head are trainable.
pub fn full_finetune<T: Real>(backbone: &VisionTransformer<T>, head_seed: u64) -> AdaptedModel<T> {
    AdaptedModel {
        head: head_for(backbone, head_seed),
        backbone: backbone.clone(),
        mode: AdaptationMode::FullFinetune,
        lora: None,
        merged: false,
    }
}

/// Builds a model in any mode. `lora` is required for [`AdaptationMode::Lora`].
pub fn adapt<T: Real>(
    backbone: &VisionTransformer<T>,
    mode: AdaptationMode,
    lora: Option<&LoraConfig>,
    head_seed: u64,
) -> Result<AdaptedModel<T>> {
    mode.check_supported(backbone.spec())?;
    match mode {
        AdaptationMode::LinearProbe => Ok(linear_probe(backbone, head_seed)),
        AdaptationMode::FullFinetune => Ok(full_finetune(backbone, head_seed)),
        AdaptationMode::Lora => {
            let default = LoraConfig::default();
            let mut cfg = lora.unwrap_or(&default).clone();
            cfg.seed = seed::derive_seed(cfg.seed, &["lora", &head_seed.to_string()]);
            let mut m = inject_lora(backbone, &cfg)?;
            m.head = head_for(backbone, head_seed);
            Ok(m)
        }
    }
}

impl<T: Real> AdaptedModel<T> {
    pub fn mode(&self) -> AdaptationMode {
        self.mode
    }

    pub fn backbone(&self) -> &VisionTransformer<T> {
        &self.backbone
    }

    pub fn lora_config(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn grad_mask(&self) -> GradMask {
        match self.mode {
            AdaptationMode::LinearProbe => GradMask { base: false, adapters: false },
            AdaptationMode::Lora => GradMask { base: false, adapters: !self.merged },
            AdaptationMode::FullFinetune => GradMask { base: true, adapters: false },
        }
    }

    fn is_trainable(&self, group: ParamGroup) -> bool {
        let mask = self.grad_mask();
        match group {
            ParamGroup::Base => mask.base,
            ParamGroup::Adapter => mask.adapters,
        }
    }

    /// Adapters by block path, e.g. `blocks.0.attn.q`.
    pub fn adapters(&self) -> BTreeMap<String, &LoraLayer<T>> {
        let mut out = BTreeMap::new();
        for (i, block) in self.backbone.blocks.iter().enumerate() {
            for suffix in crate::backbone::vit::PROJECTIONS {
                if let Some(a) = block.projection(suffix).and_then(|p| p.adapter.as_ref()) {
                    out.insert(format!("blocks.{i}.{suffix}"), a);
                }
            }
        }
        out
    }

    /// Every trainable tensor with its element count, in structural order.
    pub fn trainable_parameters(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.backbone.visit_params(&mut |name, group, view| {
            if self.is_trainable(group) {
                out.push((name.to_string(), view.len()));
            }
        });
        out.push(("head.weight".into(), self.head.weight.len()));
        if let Some(b) = &self.head.bias {
            out.push(("head.bias".into(), b.len()));
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_parameters().iter().map(|(_, n)| n).sum()
    }

    /// Checksum over every tensor the mode keeps frozen.
    pub fn frozen_checksum(&self) -> String {
        let mut bytes = Vec::new();
        self.backbone.visit_params(&mut |name, group, view| {
            if !self.is_trainable(group) {
                bytes.extend_from_slice(name.as_bytes());
                for v in view.iter() {
                    bytes.extend_from_slice(&v.as_f64().to_le_bytes());
                }
            }
        });
        seed::sha256_hex(&bytes)
    }

    /// Inference-mode embeddings.
    pub fn features(&self, images: ArrayView4<T>) -> Result<Array2<T>> {
        self.backbone.embed(images)
    }

    pub fn logits(&self, images: ArrayView4<T>) -> Result<Array2<T>> {
        self.head.predict_batch(self.features(images)?.view())
    }

    /// Positive-class softmax probability per image.
    pub fn positive_probability(&self, images: ArrayView4<T>) -> Result<Vec<f64>> {
        Ok(positive_probabilities(self.logits(images)?.view()))
    }

    /// Training forward. In probe mode the backbone runs without a cache.
    pub fn forward_train(&self, images: ArrayView4<T>, train_rng: Option<&mut Rng>) -> Result<(Array2<T>, TrainCache<T>)> {
        let mask = self.grad_mask();
        let (features, backbone) = if mask.any() {
            let (f, c) = self.backbone.embed_train(images, train_rng, mask)?;
            (f, Some(c))
        } else {
            (self.backbone.embed(images)?, None)
        };
        let logits = self.head.predict_batch(features.view())?;
        Ok((logits, TrainCache { features, backbone }))
    }

    /// Gradients of every trainable tensor given `dL/dlogits`.
    pub fn backward(&self, cache: &TrainCache<T>, dlogits: ArrayView2<T>) -> Grads<T> {
        let mut grads = Grads::new();
        let dz = self.head.backward(cache.features.view(), dlogits, &mut grads);
        if let Some(bc) = &cache.backbone {
            grads.extend(self.backbone.backward(bc, dz.view(), self.grad_mask()));
        }
        grads
    }

    /// Head-only forward over precomputed features.
    pub fn head_logits(&self, features: ArrayView2<T>) -> Result<Array2<T>> {
        self.head.predict_batch(features)
    }

    pub fn head_backward(&self, features: ArrayView2<T>, dlogits: ArrayView2<T>) -> Grads<T> {
        let mut grads = Grads::new();
        self.head.backward(features, dlogits, &mut grads);
        grads
    }

    /// Visits every trainable tensor mutably.
    pub fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<T>)) {
        let mask = self.grad_mask();
        self.backbone.visit_params_mut(&mut |name, group, view| {
            let trainable = match group {
                ParamGroup::Base => mask.base,
                ParamGroup::Adapter => mask.adapters,
            };
            if trainable {
                f(name, view);
            }
        });
        f("head.weight", self.head.weight.view_mut().into_dyn());
        if let Some(b) = self.head.bias.as_mut() {
            f("head.bias", b.view_mut().into_dyn());
        }
    }

    pub fn trainable_snapshot(&mut self) -> BTreeMap<String, ArrayD<T>> {
        let mut out = BTreeMap::new();
        self.visit_trainable_mut(&mut |name, view| {
            out.insert(name.to_string(), view.to_owned());
        });
        out
    }

    pub fn restore(&mut self, snapshot: &BTreeMap<String, ArrayD<T>>) -> Result<()> {
        let mut err = None;
        let mut seen = 0;
        self.visit_trainable_mut(&mut |name, mut view| match snapshot.get(name) {
            Some(v) if v.shape() == view.shape() => {
                view.assign(v);
                seen += 1;
            }
            Some(v) => {
                err.get_or_insert(Error::shape(name.to_string(), view.shape(), v.shape()));
            }
            None => {
                err.get_or_insert(Error::MissingTensor(name.to_string()));
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != snapshot.len() {
            return Err(Error::State("snapshot holds tensors that are not trainable in this mode".into()));
        }
        Ok(())
    }

    /// Folds `gamma * B A` into each adapted weight and returns the plain
    /// backbone. The model stays usable; a second merge is an error.
    pub fn merge_lora(&mut self) -> Result<VisionTransformer<T>> {
        if self.mode != AdaptationMode::Lora {
            return Err(Error::State(format!("merge requires a LoRA model, got {}", self.mode)));
        }
        if self.merged {
            return Err(Error::State("adapters already merged".into()));
        }
        self.backbone.fold_adapters();
        self.merged = true;
        Ok(self.backbone.clone())
    }

    /// Trainable tensors plus metadata; for LoRA this is the adapter
    /// checkpoint (factors, per-layer gamma, config, head).
    pub fn to_archive(&mut self, extra: &BTreeMap<String, String>) -> Result<TensorArchive> {
        let mut archive = TensorArchive::default();
        archive.metadata = extra.clone();
        archive.metadata.insert("backbone".into(), self.backbone.spec().name.clone());
        archive.metadata.insert("mode".into(), self.mode.as_str().into());
        if let Some(cfg) = &self.lora {
            archive.metadata.insert("lora_config".into(), serde_json::to_string(cfg)?);
        }
        for (name, value) in self.trainable_snapshot() {
            let data = value.iter().map(|v| v.as_f32()).collect();
            archive.insert(name, Tensor::new(value.shape().to_vec(), data)?);
        }
        for (path, layer) in self.adapters() {
            archive.insert(format!("{path}.gamma"), Tensor::new(vec![1], vec![layer.gamma.as_f32()])?);
        }
        Ok(archive)
    }

    /// Rebuilds a model over `backbone` from [`Self::to_archive`] output.
    pub fn from_archive(backbone: &VisionTransformer<T>, archive: &TensorArchive) -> Result<Self> {
        let mode: AdaptationMode = archive
            .metadata
            .get("mode")
            .ok_or_else(|| Error::invalid("checkpoint", "missing `mode` metadata"))?
            .parse()?;
        if let Some(name) = archive.metadata.get("backbone") {
            if name != &backbone.spec().name {
                return Err(Error::invalid(
                    "checkpoint",
                    format!("made for backbone `{name}`, not `{}`", backbone.spec().name),
                ));
            }
        }
        let mut model = match mode {
            AdaptationMode::Lora => {
                let cfg: LoraConfig = serde_json::from_str(
                    archive
                        .metadata
                        .get("lora_config")
                        .ok_or_else(|| Error::invalid("checkpoint", "missing `lora_config`"))?,
                )?;
                inject_lora(backbone, &cfg)?
            }
            AdaptationMode::LinearProbe => linear_probe(backbone, 0),
            AdaptationMode::FullFinetune => full_finetune(backbone, 0),
        };
        let has_bias = archive.tensors.contains_key("head.bias");
        if !has_bias {
            model.head.bias = None;
        }
        let mut snapshot = BTreeMap::new();
        for (name, t) in &archive.tensors {
            let adapter_scale = name.ends_with(".gamma") && (name.contains(".attn.") || name.contains(".mlp."));
            if adapter_scale {
                continue;
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), t.data.iter().map(|&v| T::of_f32(v)).collect())
                .map_err(|e| Error::invalid(name.clone(), e.to_string()))?;
            snapshot.insert(name.clone(), arr);
        }
        model.restore(&snapshot)?;
        // per-layer scales
        for (i, block) in model.backbone.blocks.iter_mut().enumerate() {
            for suffix in crate::backbone::vit::PROJECTIONS {
                let proj = block.projection_mut(suffix).expect("known projection");
                if let Some(adapter) = proj.adapter.as_mut() {
                    if let Some(g) = archive.tensors.get(&format!("blocks.{i}.{suffix}.gamma")) {
                        adapter.gamma = T::of_f32(g.data[0]);
                    }
                }
            }
        }
        Ok(model)
    }
}

/// Softmax probability of class 1 for each row of two-logit output.
pub fn positive_probabilities<T: Real>(logits: ArrayView2<T>) -> Vec<f64> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            let diff = (r[1] - r[0]).as_f64();
            if diff >= 0.0 {
                1.0 / (1.0 + (-diff).exp())
            } else {
                let e = diff.exp();
                e / (1.0 + e)
            }
        })
        .collect()
}
