use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use super::cache::{predict_logits, FeatureCache};
use super::loss::{head_loss_grad, LossConvention};
use super::optim::{Adam, AdamConfig};
use super::sampler::{Draw, DrawSource, SampleKind, SamplerPolicy, TrainingPool};
use super::schedule::{one_cycle_lr, OneCyclePolicy};
use super::TraceRecord;
use crate::adapt::{fit_probe, positive_probabilities, AdaptationMode, AdaptedModel, ProbeFitConfig};
use crate::archive::{Tensor, TensorArchive};
use crate::backbone::Grads;
use crate::error::{Error, Result};
use crate::ingest::{normalize, AnnotationRecord, AugmentPolicy, PatchSpec, TileReader};
use crate::metrics::{evaluate_scores, EvalResult};
use crate::real::Real;
use crate::seed::{rng_from, sha256_hex};

/// How a linear probe is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSolver {
    /// Closed-loop logistic regression on unaugmented annotation features.
    #[default]
    Lbfgs,
    /// The shared sampler/Adam/one-cycle recipe over cached features.
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub pseudo_epochs: usize,
    pub epoch_length: usize,
    pub optimizer: AdamConfig,
    pub max_lr: f64,
    pub schedule: OneCyclePolicy,
    pub loss: LossConvention,
    pub seed: u64,
    /// Global gradient-norm bound; off when `None`.
    pub grad_clip: Option<f64>,
    /// Keep the checkpoint with minimal validation loss (otherwise the last).
    pub select_best: bool,
    pub eval_batch_size: usize,
    pub augment: AugmentPolicy,
    pub probe_solver: ProbeSolver,
    pub probe_fit: ProbeFitConfig,
    /// Random patches whose features are cached for gradient probe training.
    pub random_bank: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            pseudo_epochs: 100,
            epoch_length: 1280,
            optimizer: AdamConfig::default(),
            max_lr: 1e-4,
            schedule: OneCyclePolicy::default(),
            loss: LossConvention::TwoLogitSoftmax,
            seed: 0,
            grad_clip: None,
            select_best: true,
            eval_batch_size: 32,
            augment: AugmentPolicy::default(),
            probe_solver: ProbeSolver::Lbfgs,
            probe_fit: ProbeFitConfig::default(),
            random_bank: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if self.epoch_length == 0 || self.epoch_length % self.batch_size != 0 {
            return Err(Error::invalid(
                "epoch_length",
                format!("{} is not a positive multiple of batch_size {}", self.epoch_length, self.batch_size),
            ));
        }
        if self.pseudo_epochs == 0 {
            return Err(Error::invalid("pseudo_epochs", "must be positive"));
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(Error::invalid("max_lr", "must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::invalid("grad_clip", "must be positive when set"));
            }
        }
        if self.eval_batch_size == 0 {
            return Err(Error::invalid("eval_batch_size", "must be positive"));
        }
        self.schedule.validate()?;
        self.augment.validate()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.epoch_length / self.batch_size
    }

    pub fn total_steps(&self) -> usize {
        self.pseudo_epochs * self.steps_per_epoch()
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Training and validation inputs of one session.
pub struct FoldData<'a> {
    pub store: &'a dyn TileReader,
    /// Training annotations (the fraction subset).
    pub train: Vec<&'a AnnotationRecord>,
    /// Every annotation of the training cases, for random-patch exclusion.
    pub context: Vec<&'a AnnotationRecord>,
    pub val: Vec<&'a AnnotationRecord>,
    pub patch: PatchSpec,
    pub sampler: SamplerPolicy,
}

/// Trainable state at one pseudo-epoch boundary.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Real> {
    pub epoch: usize,
    pub step: usize,
    /// `None` only when training ran without a validation set.
    pub val_loss: Option<f64>,
    pub metrics: Option<EvalResult>,
    pub snapshot: BTreeMap<String, ArrayD<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Real> {
    pub best: Checkpoint<T>,
    pub trace: Vec<TraceRecord>,
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
}

impl<T: Real> TrainOutcome<T> {
    pub fn trace_digest(&self) -> String {
        let mut buf = Vec::new();
        write_trace(&self.trace, &mut buf).expect("in-memory write");
        sha256_hex(&buf)
    }
}

pub fn write_trace(trace: &[TraceRecord], mut w: impl Write) -> Result<()> {
    for r in trace {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io("<trace>", e))?;
    }
    Ok(())
}

pub fn save_trace(trace: &[TraceRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_trace(trace, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Mean validation loss and metrics over the full validation set, without
/// augmentation.
pub fn validate<T: Real>(
    model: &AdaptedModel<T>,
    data: &FoldData,
    cfg: &TrainConfig,
    cache: Option<&mut FeatureCache>,
) -> Result<Option<(f64, EvalResult)>> {
    if data.val.is_empty() {
        return Ok(None);
    }
    let logits = predict_logits(model, data.store, &data.val, &data.patch, cfg.eval_batch_size, cache)?;
    let labels: Vec<u8> = data.val.iter().map(|r| r.label.as_u8()).collect();
    let (loss, _) = head_loss_grad(logits.view(), &labels, cfg.loss)?;
    let flags: Vec<bool> = labels.iter().map(|l| *l == 1).collect();
    let metrics = evaluate_scores(&flags, &positive_probabilities(logits.view()), 0.5)?;
    Ok(Some((loss, metrics)))
}

fn clip<T: Real>(grads: &mut Grads<T>, bound: f64) {
    let norm = grads.values().flat_map(|g| g.iter()).map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm > bound {
        let s = T::lit(bound / norm);
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
}

/// Runs one training session and leaves `model` at the selected checkpoint.
///
/// LoRA and full fine-tuning, and probes with [`ProbeSolver::Gradient`],
/// run `pseudo_epochs × epoch_length / batch_size` Adam steps under the
/// one-cycle schedule. Probes with [`ProbeSolver::Lbfgs`] are fitted in one
/// shot on the training annotations and recorded as epoch 0.
pub fn train<T: Real>(
    model: &mut AdaptedModel<T>,
    data: &FoldData,
    cfg: &TrainConfig,
    cache: Option<&mut FeatureCache>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.val.is_empty() && cfg.select_best {
        return Err(Error::invalid(
            "validation",
            "best-checkpoint selection needs a validation set; disable select_best to keep the final state",
        ));
    }
    let probe = model.mode() == AdaptationMode::LinearProbe;
    if probe && cfg.probe_solver == ProbeSolver::Lbfgs {
        return fit_probe_session(model, data, cfg, cache);
    }
    let mut local_cache = FeatureCache::new();
    let mut cache = match cache {
        Some(c) => Some(c),
        None if probe => Some(&mut local_cache),
        None => None,
    };

    let pool = TrainingPool::new(
        data.store,
        &data.train,
        &data.context,
        data.patch.clone(),
        cfg.augment.clone(),
        data.sampler,
    )?;
    let mut sampler_rng = rng_from(cfg.seed, &["sampler"]);
    let mut dropout_rng = rng_from(cfg.seed, &["dropout"]);
    let mut adam = Adam::<T>::new(cfg.optimizer);

    // Probe gradient mode: features of every training annotation and of a
    // fixed bank of random patches, computed once.
    let probe_features = if probe {
        let c = cache.as_deref_mut().expect("set above");
        let feats = c.features(model, data.store, &data.train, &data.patch, cfg.eval_batch_size)?;
        let index: BTreeMap<&str, usize> =
            data.train.iter().enumerate().map(|(i, r)| (r.annotation_id.as_str(), i)).collect();
        let bank = random_bank(model, &pool, cfg)?;
        Some((feats, index, bank))
    } else {
        None
    };

    let total = cfg.total_steps();
    let spe = cfg.steps_per_epoch();
    let mut trace = Vec::with_capacity(total);
    let mut epochs = Vec::with_capacity(cfg.pseudo_epochs);
    let mut best: Option<Checkpoint<T>> = None;
    for epoch in 0..cfg.pseudo_epochs {
        let mut epoch_loss = 0.0;
        for s in 0..spe {
            let step = epoch * spe + s;
            let lr = one_cycle_lr(step, total, cfg.max_lr, &cfg.schedule)?;
            let (loss, mut grads) = match &probe_features {
                Some((feats, index, bank)) => {
                    let mut rows = Array2::<T>::zeros((cfg.batch_size, feats.ncols()));
                    let mut labels = Vec::with_capacity(cfg.batch_size);
                    for i in 0..cfg.batch_size {
                        let d = pool.draw(&mut sampler_rng);
                        let row = match d.source {
                            DrawSource::Record(r) => feats.row(index[r.annotation_id.as_str()]),
                            DrawSource::Image(_) => {
                                bank.row((d.seed % bank.nrows().max(1) as u64) as usize)
                            }
                        };
                        rows.row_mut(i).assign(&row);
                        labels.push(d.kind.label());
                    }
                    let logits = model.head_logits(rows.view())?;
                    let (loss, dlogits) = head_loss_grad(logits.view(), &labels, cfg.loss)?;
                    (loss, model.head_backward(rows.view(), dlogits.view()))
                }
                None => {
                    let batch = pool.next_batch(cfg.batch_size, &mut sampler_rng)?;
                    let images = batch.images.mapv(T::of_f32);
                    let (logits, tc) = model.forward_train(images.view(), Some(&mut dropout_rng))?;
                    let (loss, dlogits) = head_loss_grad(logits.view(), &batch.labels, cfg.loss)?;
                    if !loss.is_finite() {
                        trace.push(TraceRecord { step, lr, loss });
                        return Err(Error::NonFiniteLoss { step, trace });
                    }
                    (loss, model.backward(&tc, dlogits.view()))
                }
            };
            if !loss.is_finite() {
                trace.push(TraceRecord { step, lr, loss });
                return Err(Error::NonFiniteLoss { step, trace });
            }
            if let Some(bound) = cfg.grad_clip {
                clip(&mut grads, bound);
            }
            adam.step(model, &grads, lr);
            trace.push(TraceRecord { step, lr, loss });
            epoch_loss += loss;
        }
        let val = validate(model, data, cfg, cache.as_deref_mut())?;
        let val_loss = val.as_ref().map(|(l, _)| *l);
        if let Some(l) = val_loss {
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: (epoch + 1) * spe - 1,
                    trace,
                });
            }
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / spe as f64,
            val_loss,
        });
        let better = match (&best, val_loss) {
            (None, _) => true,
            (Some(_), _) if !cfg.select_best => true,
            (Some(b), Some(l)) => l < b.val_loss.unwrap_or(f64::INFINITY),
            (Some(_), None) => true,
        };
        if better {
            best = Some(Checkpoint {
                epoch,
                step: (epoch + 1) * spe,
                val_loss,
                metrics: val.map(|(_, m)| m),
                snapshot: model.trainable_snapshot(),
            });
        }
    }
    let best = best.expect("at least one epoch");
    model.restore(&best.snapshot)?;
    Ok(TrainOutcome {
        best,
        trace,
        epochs,
        steps: total,
    })
}

fn random_bank<T: Real>(model: &AdaptedModel<T>, pool: &TrainingPool, cfg: &TrainConfig) -> Result<Array2<T>> {
    let n = model.backbone().spec().feature_dim;
    if pool.policy().p_random == 0.0 || cfg.random_bank == 0 {
        return Ok(Array2::zeros((1, n)));
    }
    let mut rng = rng_from(cfg.seed, &["random-bank"]);
    let mut draws: Vec<Draw> = Vec::with_capacity(cfg.random_bank);
    while draws.len() < cfg.random_bank {
        let d = pool.draw(&mut rng);
        if d.kind == SampleKind::Random {
            draws.push(d);
        }
    }
    let mut out = Array2::zeros((draws.len(), n));
    let mut offset = 0;
    for chunk in draws.chunks(cfg.eval_batch_size) {
        let s = pool.patch_spec().size;
        let mut x = ndarray::Array4::<f32>::zeros((chunk.len(), 3, s, s));
        for (i, d) in chunk.iter().enumerate() {
            let (raw, _) = pool.materialize_raw(d, false)?;
            x.index_axis_mut(Axis(0), i).assign(&normalize(&raw, pool.patch_spec())?);
        }
        let f = model.features(x.mapv(T::of_f32).view())?;
        out.slice_axis_mut(Axis(0), (offset..offset + chunk.len()).into()).assign(&f);
        offset += chunk.len();
    }
    Ok(out)
}

fn fit_probe_session<T: Real>(
    model: &mut AdaptedModel<T>,
    data: &FoldData,
    cfg: &TrainConfig,
    cache: Option<&mut FeatureCache>,
) -> Result<TrainOutcome<T>> {
    let mut local = FeatureCache::new();
    let cache = cache.unwrap_or(&mut local);
    let feats = cache.features(model, data.store, &data.train, &data.patch, cfg.eval_batch_size)?;
    let labels: Vec<bool> = data.train.iter().map(|r| r.label.is_positive()).collect();
    model.head = fit_probe(feats.view(), &labels, &cfg.probe_fit)?;
    let val = validate(model, data, cfg, Some(cache))?;
    let best = Checkpoint {
        epoch: 0,
        step: 0,
        val_loss: val.as_ref().map(|(l, _)| *l),
        metrics: val.map(|(_, m)| m),
        snapshot: model.trainable_snapshot(),
    };
    Ok(TrainOutcome {
        epochs: vec![EpochRecord {
            epoch: 0,
            train_loss: f64::NAN,
            val_loss: best.val_loss,
        }],
        best,
        trace: Vec::new(),
        steps: 0,
    })
}

/// Writes a checkpoint file: trainable tensors plus config, seed, epoch,
/// validation loss and trace digest as metadata.
pub fn checkpoint_archive<T: Real>(
    model: &mut AdaptedModel<T>,
    outcome: &TrainOutcome<T>,
    cfg: &TrainConfig,
    extra: &BTreeMap<String, String>,
) -> Result<TensorArchive> {
    let mut meta = extra.clone();
    meta.insert("train_config".into(), serde_json::to_string(cfg)?);
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("epoch".into(), outcome.best.epoch.to_string());
    meta.insert(
        "val_loss".into(),
        outcome.best.val_loss.map_or_else(|| "null".to_string(), |v| format!("{v:e}")),
    );
    meta.insert("trace_sha256".into(), outcome.trace_digest());
    meta.insert("frozen_checksum".into(), model.frozen_checksum());
    let mut archive = model.to_archive(&meta)?;
    // The snapshot is authoritative even if the model moved on afterwards.
    for (name, v) in &outcome.best.snapshot {
        archive.insert(name.clone(), Tensor::new(v.shape().to_vec(), v.iter().map(|x| x.as_f32()).collect())?);
    }
    Ok(archive)
}
