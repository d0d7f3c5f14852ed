use std::collections::BTreeMap;

use ndarray::{Array4, Axis};
use rand::{Rng as _, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{augment, extract_patch, normalize, sample_random_patch, AnnotationRecord, AugmentPolicy, Label, PatchSpec, TileReader};
use crate::seed::{rng_from, Rng};

/// Probabilities of the three patch sources.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerPolicy {
    pub p_mitotic: f64,
    pub p_hard_negative: f64,
    pub p_random: f64,
}

impl Default for SamplerPolicy {
    fn default() -> Self {
        SamplerPolicy {
            p_mitotic: 0.5,
            p_hard_negative: 0.25,
            p_random: 0.25,
        }
    }
}

impl SamplerPolicy {
    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_mitotic, self.p_hard_negative, self.p_random];
        if ps.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::invalid("sampler", "probabilities must be nonnegative"));
        }
        let sum: f64 = ps.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("sampler", format!("probabilities sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Policy used when the hard-negative pool is empty: its mass moves to
    /// random patches.
    pub fn without_hard_negatives(&self) -> Self {
        SamplerPolicy {
            p_mitotic: self.p_mitotic,
            p_hard_negative: 0.0,
            p_random: self.p_random + self.p_hard_negative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Mitotic,
    HardNegative,
    Random,
}

impl SampleKind {
    pub fn label(self) -> u8 {
        u8::from(self == SampleKind::Mitotic)
    }
}

/// Source of training patches for one fold and fraction.
pub struct TrainingPool<'a> {
    store: &'a dyn TileReader,
    positives: Vec<&'a AnnotationRecord>,
    negatives: Vec<&'a AnnotationRecord>,
    images: Vec<&'a str>,
    /// Every known annotation per image, used to keep random patches away
    /// from mitotic figures.
    by_image: BTreeMap<&'a str, Vec<&'a AnnotationRecord>>,
    patch: PatchSpec,
    augment: AugmentPolicy,
    policy: SamplerPolicy,
}

impl<'a> TrainingPool<'a> {
    /// `pool` holds the training annotations; `context` holds every record
    /// whose image may supply random patches (typically the training cases).
    pub fn new(
        store: &'a dyn TileReader,
        pool: &[&'a AnnotationRecord],
        context: &[&'a AnnotationRecord],
        patch: PatchSpec,
        augment: AugmentPolicy,
        policy: SamplerPolicy,
    ) -> Result<Self> {
        policy.validate()?;
        augment.validate()?;
        patch.validate()?;
        let positives: Vec<_> = pool.iter().copied().filter(|r| r.label == Label::MitoticFigure).collect();
        let negatives: Vec<_> = pool.iter().copied().filter(|r| r.label == Label::HardNegative).collect();
        if positives.is_empty() && policy.p_mitotic > 0.0 {
            return Err(Error::Empty("mitotic-figure pool".into()));
        }
        let policy = if negatives.is_empty() { policy.without_hard_negatives() } else { policy };
        let mut by_image: BTreeMap<&str, Vec<&AnnotationRecord>> = BTreeMap::new();
        for r in context.iter().chain(pool.iter()) {
            let list = by_image.entry(r.image_ref.as_str()).or_default();
            if !list.iter().any(|x| x.annotation_id == r.annotation_id) {
                list.push(r);
            }
        }
        let mut images: Vec<&str> = pool.iter().map(|r| r.image_ref.as_str()).collect();
        images.sort_unstable();
        images.dedup();
        if images.is_empty() && policy.p_random > 0.0 {
            return Err(Error::Empty("image pool for random patches".into()));
        }
        Ok(TrainingPool {
            store,
            positives,
            negatives,
            images,
            by_image,
            patch,
            augment,
            policy,
        })
    }

    /// Effective policy after reallocating empty pools.
    pub fn policy(&self) -> SamplerPolicy {
        self.policy
    }

    pub fn patch_spec(&self) -> &PatchSpec {
        &self.patch
    }

    pub fn draw_kind(&self, rng: &mut Rng) -> SampleKind {
        let u: f64 = rng.random();
        if u < self.policy.p_mitotic {
            SampleKind::Mitotic
        } else if u < self.policy.p_mitotic + self.policy.p_hard_negative {
            SampleKind::HardNegative
        } else {
            SampleKind::Random
        }
    }

    /// Picks the record (or, for random patches, the image) of one draw
    /// without touching pixels.
    pub fn draw(&self, rng: &mut Rng) -> Draw<'a> {
        let kind = self.draw_kind(rng);
        let source = match kind {
            SampleKind::Mitotic => DrawSource::Record(self.positives[rng.random_range(0..self.positives.len())]),
            SampleKind::HardNegative => DrawSource::Record(self.negatives[rng.random_range(0..self.negatives.len())]),
            SampleKind::Random => DrawSource::Image(self.images[rng.random_range(0..self.images.len())]),
        };
        Draw {
            kind,
            source,
            seed: rng.next_u64(),
        }
    }

    /// Raw (unnormalized) pixels for a draw, augmented when `train` is set.
    pub fn materialize_raw(&self, draw: &Draw<'a>, train: bool) -> Result<(crate::ingest::RawPatch, AnnotationRecord)> {
        let mut rng = rng_from(draw.seed, &["sample"]);
        let (raw, record) = match draw.source {
            DrawSource::Record(r) => (extract_patch(self.store, r, &self.patch)?.pixels, r.clone()),
            DrawSource::Image(image) => {
                let context = self.by_image.get(image).map(Vec::as_slice).unwrap_or(&[]);
                let rp = sample_random_patch(self.store, image, context, &self.patch, &mut rng)?;
                (rp.pixels, rp.record)
            }
        };
        let raw = if train { augment(&raw, &mut rng, &self.augment)? } else { raw };
        Ok((raw, record))
    }

    /// Normalized tensor (3×S×S) for a draw.
    pub fn materialize(&self, draw: &Draw<'a>, train: bool) -> Result<ndarray::Array3<f32>> {
        let (raw, _) = self.materialize_raw(draw, train)?;
        normalize(&raw, &self.patch)
    }

    /// Draws and materializes `batch_size` augmented training samples.
    pub fn next_batch(&self, batch_size: usize, rng: &mut Rng) -> Result<Batch> {
        let draws: Vec<Draw> = (0..batch_size).map(|_| self.draw(rng)).collect();
        self.assemble(&draws, true)
    }

    pub fn assemble(&self, draws: &[Draw<'a>], train: bool) -> Result<Batch> {
        let s = self.patch.size;
        let mut images = Array4::<f32>::zeros((draws.len(), 3, s, s));
        let mut labels = Vec::with_capacity(draws.len());
        let mut kinds = Vec::with_capacity(draws.len());
        let mut ids = Vec::with_capacity(draws.len());
        for (i, d) in draws.iter().enumerate() {
            let (raw, record) = self.materialize_raw(d, train)?;
            images.index_axis_mut(Axis(0), i).assign(&normalize(&raw, &self.patch)?);
            labels.push(d.kind.label());
            kinds.push(d.kind);
            ids.push(record.annotation_id);
        }
        Ok(Batch {
            images,
            labels,
            kinds,
            ids,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum DrawSource<'a> {
    Record(&'a AnnotationRecord),
    Image(&'a str),
}

/// One sampled slot: what to load and the seed for its randomness.
#[derive(Debug, Clone, Copy)]
pub struct Draw<'a> {
    pub kind: SampleKind,
    pub source: DrawSource<'a>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// B×3×S×S normalized patches.
    pub images: Array4<f32>,
    pub labels: Vec<u8>,
    pub kinds: Vec<SampleKind>,
    pub ids: Vec<String>,
}

/// Normalized, unaugmented tensors for annotated records (evaluation path).
pub fn eval_tensors(store: &dyn TileReader, records: &[&AnnotationRecord], patch: &PatchSpec) -> Result<Array4<f32>> {
    let s = patch.size;
    let mut out = Array4::<f32>::zeros((records.len(), 3, s, s));
    for (i, r) in records.iter().enumerate() {
        let p = extract_patch(store, r, patch)?;
        out.index_axis_mut(Axis(0), i).assign(&normalize(&p.pixels, patch)?);
    }
    Ok(out)
}
