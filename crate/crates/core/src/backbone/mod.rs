//! Vision-transformer feature extractors: registry, execution and weights.

pub mod layers;
pub mod spec;
pub mod vit;
pub mod weights;

pub use layers::{GradMask, Grads, LayerNorm, Linear};
pub use spec::{Architecture, BackboneHandle, BackboneRegistry, BackboneSpec, EmbeddingRule, NameMapping};
pub use vit::{pool_token_tensor, Block, ForwardCache, ParamGroup, VisionTransformer};
pub use weights::{from_archive, load_weights, to_archive, WeightSource};
