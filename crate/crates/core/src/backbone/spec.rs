use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a fixed-length embedding is built from the output token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EmbeddingRule {
    ClassToken,
    /// Class token concatenated with the mean of the spatial patch tokens.
    /// Register tokens, when present, are excluded from the mean.
    ClassPlusMeanPatch,
}

impl EmbeddingRule {
    pub fn feature_dim(self, width: usize) -> usize {
        match self {
            EmbeddingRule::ClassToken => width,
            EmbeddingRule::ClassPlusMeanPatch => 2 * width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    VisionTransformer,
    /// Pooled convolutional feature extractor. Registry metadata only: the
    /// pooled vector plays the role of the class token and no token tensor
    /// is exposed.
    Convolutional,
}

/// Checkpoint naming convention a weight file follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NameMapping {
    /// This crate's own tensor names.
    #[default]
    Native,
    /// timm-style ViT names with a fused `qkv` projection.
    Timm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub architecture: Architecture,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Number of spatial patch tokens; must be a perfect square.
    pub patch_grid: usize,
    #[serde(default)]
    pub register_tokens: usize,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    pub feature_dim: usize,
    pub embedding_rule: EmbeddingRule,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
    pub weights_source: String,
    #[serde(default)]
    pub name_mapping: NameMapping,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
}

fn default_input_size() -> usize {
    224
}

fn default_ln_eps() -> f64 {
    1e-6
}

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

impl BackboneSpec {
    /// Side length of the square patch grid.
    pub fn grid_side(&self) -> usize {
        (self.patch_grid as f64).sqrt().round() as usize
    }

    /// Pixel side length of one patch.
    pub fn patch_size(&self) -> usize {
        self.input_size / self.grid_side().max(1)
    }

    /// Tokens per image: class, registers, then patches.
    pub fn seq_len(&self) -> usize {
        1 + self.register_tokens + self.patch_grid
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::invalid("name", "must be nonempty"));
        }
        if self.width == 0 {
            return Err(Error::invalid("width", "must be positive"));
        }
        for (c, (&m, &s)) in self.norm_mean.iter().zip(&self.norm_std).enumerate() {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::invalid("norm_mean", format!("channel {c} = {m} outside [0, 1]")));
            }
            if !(s > 0.0 && s <= 1.0) {
                return Err(Error::invalid("norm_std", format!("channel {c} = {s} must be in (0, 1]")));
            }
        }
        let expected = self.embedding_rule.feature_dim(self.width);
        if self.feature_dim != expected {
            return Err(Error::invalid(
                "feature_dim",
                format!(
                    "{} inconsistent with {:?} over width {} (expected {expected})",
                    self.feature_dim, self.embedding_rule, self.width
                ),
            ));
        }
        if self.input_size == 0 {
            return Err(Error::invalid("input_size", "must be positive"));
        }
        match self.architecture {
            Architecture::Convolutional => {
                if self.embedding_rule != EmbeddingRule::ClassToken {
                    return Err(Error::invalid(
                        "embedding_rule",
                        "convolutional backbones expose only a pooled vector (CLASS_TOKEN)",
                    ));
                }
            }
            Architecture::VisionTransformer => {
                if self.heads == 0 || self.width % self.heads != 0 {
                    return Err(Error::invalid(
                        "heads",
                        format!("width {} not divisible by heads {}", self.width, self.heads),
                    ));
                }
                if self.depth == 0 {
                    return Err(Error::invalid("depth", "must be positive"));
                }
                if self.mlp_dim == 0 {
                    return Err(Error::invalid("mlp_dim", "must be positive"));
                }
                let side = self.grid_side();
                if self.patch_grid == 0 || side * side != self.patch_grid {
                    return Err(Error::invalid(
                        "patch_grid",
                        format!("{} is not a positive perfect square", self.patch_grid),
                    ));
                }
                if self.input_size % side != 0 {
                    return Err(Error::invalid(
                        "input_size",
                        format!("{} not divisible by grid side {side}", self.input_size),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Seeded toy transformer used for tests and desk-scale runs.
    pub fn toy(name: &str, depth: usize, width: usize, heads: usize, mlp_dim: usize, patch_grid: usize) -> Self {
        BackboneSpec {
            name: name.into(),
            architecture: Architecture::VisionTransformer,
            depth,
            width,
            heads,
            mlp_dim,
            patch_grid,
            register_tokens: 0,
            input_size: 224,
            feature_dim: width,
            embedding_rule: EmbeddingRule::ClassToken,
            norm_mean: [0.5; 3],
            norm_std: [0.5; 3],
            weights_source: "seed:0".into(),
            name_mapping: NameMapping::Native,
            layer_norm_eps: 1e-6,
        }
    }

    pub fn with_rule(mut self, rule: EmbeddingRule) -> Self {
        self.embedding_rule = rule;
        self.feature_dim = rule.feature_dim(self.width);
        self
    }

    #[allow(clippy::too_many_arguments)]
    fn vit(
        name: &str,
        depth: usize,
        width: usize,
        heads: usize,
        mlp_dim: usize,
        patch_grid: usize,
        register_tokens: usize,
        rule: EmbeddingRule,
        mean: [f64; 3],
        std: [f64; 3],
        source: &str,
    ) -> Self {
        BackboneSpec {
            name: name.into(),
            architecture: Architecture::VisionTransformer,
            depth,
            width,
            heads,
            mlp_dim,
            patch_grid,
            register_tokens,
            input_size: 224,
            feature_dim: rule.feature_dim(width),
            embedding_rule: rule,
            norm_mean: mean,
            norm_std: std,
            weights_source: source.into(),
            name_mapping: NameMapping::Timm,
            layer_norm_eps: 1e-6,
        }
    }
}

pub type BackboneHandle = Arc<BackboneSpec>;

/// Named collection of backbone descriptions. Entries are immutable once
/// registered.
#[derive(Debug, Clone, Default)]
pub struct BackboneRegistry {
    entries: BTreeMap<String, BackboneHandle>,
}

impl BackboneRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry preloaded with the pathology foundation models, the ImageNet
    /// baselines and the toy family.
    pub fn with_builtins() -> Self {
        let mut reg = Self::new();
        for spec in builtin_specs() {
            reg.register(spec).expect("builtin specs are valid");
        }
        reg
    }

    pub fn register(&mut self, spec: BackboneSpec) -> Result<BackboneHandle> {
        spec.validate()?;
        if self.entries.contains_key(&spec.name) {
            return Err(Error::DuplicateBackbone(spec.name));
        }
        let handle = Arc::new(spec);
        self.entries.insert(handle.name.clone(), Arc::clone(&handle));
        Ok(handle)
    }

    pub fn get(&self, name: &str) -> Result<BackboneHandle> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownBackbone(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &BackboneHandle> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn builtin_specs() -> Vec<BackboneSpec> {
    use EmbeddingRule::*;
    let hoptimus_mean = [0.707223, 0.578729, 0.703617];
    let hoptimus_std = [0.211883, 0.230117, 0.177517];
    vec![
        BackboneSpec::vit("phikon", 12, 768, 12, 3072, 196, 0, ClassToken, IMAGENET_MEAN, IMAGENET_STD, "hf-hub:owkin/phikon"),
        BackboneSpec::vit("uni", 24, 1024, 16, 4096, 196, 0, ClassToken, IMAGENET_MEAN, IMAGENET_STD, "hf-hub:MahmoodLab/UNI"),
        BackboneSpec::vit("virchow", 32, 1280, 16, 5120, 256, 0, ClassPlusMeanPatch, IMAGENET_MEAN, IMAGENET_STD, "hf-hub:paige-ai/Virchow"),
        BackboneSpec::vit("virchow2", 32, 1280, 16, 5120, 256, 4, ClassPlusMeanPatch, IMAGENET_MEAN, IMAGENET_STD, "hf-hub:paige-ai/Virchow2"),
        BackboneSpec::vit("h-optimus-0", 40, 1536, 24, 6144, 256, 4, ClassToken, hoptimus_mean, hoptimus_std, "hf-hub:bioptimus/H-optimus-0"),
        BackboneSpec::vit("prov-gigapath", 40, 1536, 24, 6144, 256, 0, ClassToken, IMAGENET_MEAN, IMAGENET_STD, "hf-hub:prov-gigapath/prov-gigapath"),
        BackboneSpec::vit("vit-b-imagenet", 12, 768, 12, 3072, 196, 0, ClassToken, IMAGENET_MEAN, IMAGENET_STD, "timm:vit_base_patch16_224"),
        BackboneSpec::vit("vit-h-imagenet", 32, 1280, 16, 5120, 256, 0, ClassToken, IMAGENET_MEAN, IMAGENET_STD, "timm:vit_huge_patch14_224"),
        BackboneSpec {
            name: "resnet50-imagenet".into(),
            architecture: Architecture::Convolutional,
            depth: 50,
            width: 2048,
            heads: 0,
            mlp_dim: 0,
            patch_grid: 0,
            register_tokens: 0,
            input_size: 224,
            feature_dim: 2048,
            embedding_rule: ClassToken,
            norm_mean: IMAGENET_MEAN,
            norm_std: IMAGENET_STD,
            weights_source: "torchvision:resnet50".into(),
            name_mapping: NameMapping::Native,
            layer_norm_eps: 1e-6,
        },
        BackboneSpec::toy("toy-vit", 2, 32, 4, 64, 16),
        BackboneSpec::toy("toy-vit-mean", 2, 32, 4, 64, 16).with_rule(ClassPlusMeanPatch),
        BackboneSpec {
            register_tokens: 2,
            ..BackboneSpec::toy("toy-vit-reg", 2, 32, 4, 64, 16).with_rule(ClassPlusMeanPatch)
        },
        BackboneSpec::toy("toy-vit-deep", 4, 64, 4, 128, 4),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_feature_dims_follow_rule() {
        let reg = BackboneRegistry::with_builtins();
        for spec in reg.iter() {
            assert_eq!(spec.feature_dim, spec.embedding_rule.feature_dim(spec.width), "{}", spec.name);
        }
        let virchow = reg.get("virchow").unwrap();
        assert_eq!((virchow.width, virchow.feature_dim), (1280, 2560));
        let phikon = reg.get("phikon").unwrap();
        assert_eq!((phikon.width, phikon.feature_dim), (768, 768));
        // published patch-feature widths
        for (name, w) in [("phikon", 768), ("uni", 1024), ("virchow", 1280), ("virchow2", 1280), ("h-optimus-0", 1536), ("prov-gigapath", 1536)] {
            assert_eq!(reg.get(name).unwrap().width, w);
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let spec = BackboneSpec::toy("bad", 2, 30, 4, 64, 16);
        let err = BackboneRegistry::new().register(spec).unwrap_err();
        assert!(matches!(err, Error::Invalid { ref field, .. } if field == "heads"), "{err}");
    }

    #[test]
    fn rejects_duplicates_and_bad_norms() {
        let mut reg = BackboneRegistry::new();
        reg.register(BackboneSpec::toy("a", 1, 8, 2, 16, 4)).unwrap();
        assert!(matches!(
            reg.register(BackboneSpec::toy("a", 1, 8, 2, 16, 4)),
            Err(Error::DuplicateBackbone(_))
        ));
        let mut bad = BackboneSpec::toy("b", 1, 8, 2, 16, 4);
        bad.norm_std[1] = 0.0;
        assert!(matches!(reg.register(bad), Err(Error::Invalid { ref field, .. }) if field == "norm_std"));
        let mut bad = BackboneSpec::toy("c", 1, 8, 2, 16, 4);
        bad.feature_dim = 16;
        assert!(reg.register(bad).is_err());
        assert!(matches!(reg.get("zzz"), Err(Error::UnknownBackbone(_))));
    }
}
