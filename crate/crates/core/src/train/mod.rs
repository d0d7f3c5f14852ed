//! Training executor: loss, schedule, optimizer, balanced sampler and the
//! pseudo-epoch loop with retrospective checkpoint selection.

pub mod cache;
pub mod loss;
pub mod optim;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use cache::{predict_logits, FeatureCache};
pub use loss::{bce_loss, bce_loss_grad, head_loss_grad, LossConvention};
pub use optim::{Adam, AdamConfig};
pub use sampler::{eval_tensors, Batch, SampleKind, SamplerPolicy, TrainingPool};
pub use schedule::{one_cycle_lr, OneCyclePolicy};
pub use trainer::{
    checkpoint_archive, load_trace, save_trace, train, validate, write_trace, Checkpoint, EpochRecord, FoldData,
    ProbeSolver, TrainConfig, TrainOutcome,
};

use serde::{Deserialize, Serialize};

/// One optimizer step as recorded in the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}
