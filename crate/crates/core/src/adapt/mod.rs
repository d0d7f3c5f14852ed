//! Adaptation strategies over a registered backbone: linear probe, LoRA and
//! full fine-tuning.

pub mod lora;
pub mod model;
pub mod probe;

pub use lora::{lora_forward, LoraConfig, LoraLayer, LoraTarget};
pub use model::{adapt, full_finetune, inject_lora, linear_probe, positive_probabilities, AdaptationMode, AdaptedModel, TrainCache};
pub use probe::{fit_probe, probe_predict, ProbeFitConfig, ProbeHead, NUM_CLASSES};
