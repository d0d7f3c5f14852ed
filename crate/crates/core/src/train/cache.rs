use std::collections::HashMap;

use ndarray::{Array2, Axis};

use crate::adapt::{AdaptationMode, AdaptedModel};
use crate::error::{Error, Result};
use crate::ingest::{AnnotationRecord, PatchSpec, TileReader};
use crate::real::Real;

use super::sampler::eval_tensors;

/// Embeddings of unaugmented annotation patches for one frozen backbone.
///
/// The key combines backbone name, weight checksum and patch spec; asking
/// for features under a different key clears the cache first.
#[derive(Debug, Clone, Default)]
pub struct FeatureCache {
    key: String,
    rows: HashMap<String, Vec<f32>>,
    hits: usize,
    misses: usize,
}

impl FeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn key_for<T: Real>(model: &AdaptedModel<T>, patch: &PatchSpec) -> String {
        format!(
            "{}|{}|{}",
            model.backbone().spec().name,
            model.backbone().base_checksum(),
            patch.cache_key()
        )
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn hits(&self) -> usize {
        self.hits
    }

    pub fn misses(&self) -> usize {
        self.misses
    }

    fn ensure_key(&mut self, key: String) {
        if self.key != key {
            self.rows.clear();
            self.key = key;
        }
    }

    /// Features for `records` in order, computing only the missing rows.
    /// Only valid for frozen backbones, so any mode other than linear
    /// probing is rejected.
    pub fn features<T: Real>(
        &mut self,
        model: &AdaptedModel<T>,
        store: &dyn TileReader,
        records: &[&AnnotationRecord],
        patch: &PatchSpec,
        batch_size: usize,
    ) -> Result<Array2<T>> {
        if model.mode() != AdaptationMode::LinearProbe {
            return Err(Error::State("feature caching requires a frozen backbone (probe mode)".into()));
        }
        self.ensure_key(Self::key_for(model, patch));
        let missing: Vec<&AnnotationRecord> =
            records.iter().copied().filter(|r| !self.rows.contains_key(&r.annotation_id)).collect();
        self.hits += records.len() - missing.len();
        self.misses += missing.len();
        for chunk in missing.chunks(batch_size.max(1)) {
            let x = eval_tensors(store, chunk, patch)?.mapv(T::of_f32);
            let f = model.features(x.view())?;
            for (r, row) in chunk.iter().zip(f.rows()) {
                self.rows.insert(r.annotation_id.clone(), row.iter().map(|v| v.as_f32()).collect());
            }
        }
        let n = model.backbone().spec().feature_dim;
        let mut out = Array2::zeros((records.len(), n));
        for (i, r) in records.iter().enumerate() {
            let row = &self.rows[&r.annotation_id];
            for (j, v) in row.iter().enumerate() {
                out[[i, j]] = T::of_f32(*v);
            }
        }
        Ok(out)
    }

    /// Inserts externally computed rows (for example random-patch features).
    pub fn insert_row(&mut self, id: String, row: Vec<f32>) {
        self.rows.insert(id, row);
    }
}

/// Two-logit outputs for annotated records, computed in chunks without
/// augmentation. Probe-mode models use `cache` when given.
pub fn predict_logits<T: Real>(
    model: &AdaptedModel<T>,
    store: &dyn TileReader,
    records: &[&AnnotationRecord],
    patch: &PatchSpec,
    batch_size: usize,
    cache: Option<&mut FeatureCache>,
) -> Result<Array2<T>> {
    if let (AdaptationMode::LinearProbe, Some(cache)) = (model.mode(), cache) {
        let f = cache.features(model, store, records, patch, batch_size)?;
        return model.head_logits(f.view());
    }
    let mut out = Array2::zeros((records.len(), 2));
    let mut offset = 0;
    for chunk in records.chunks(batch_size.max(1)) {
        let x = eval_tensors(store, chunk, patch)?.mapv(T::of_f32);
        let logits = model.logits(x.view())?;
        out.slice_axis_mut(Axis(0), (offset..offset + chunk.len()).into()).assign(&logits);
        offset += chunk.len();
    }
    Ok(out)
}
