use ndarray::Array3;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::manifest::{AnnotationRecord, Label};
use super::reader::{RawPatch, TileReader};
use crate::backbone::BackboneSpec;
use crate::error::{Error, Result};
use crate::seed::Rng;

/// Minimum distance between a random patch center and any mitotic figure.
pub const RANDOM_PATCH_EXCLUSION_PX: f64 = 25.0;
/// Rejection-sampling attempts before falling back to the best candidate.
pub const RANDOM_PATCH_MAX_TRIES: usize = 100;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BorderPolicy {
    #[default]
    ShiftWindow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub size: usize,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
    #[serde(default)]
    pub border_policy: BorderPolicy,
}

impl PatchSpec {
    pub fn new(size: usize, norm_mean: [f64; 3], norm_std: [f64; 3]) -> Result<Self> {
        let spec = PatchSpec {
            size,
            norm_mean,
            norm_std,
            border_policy: BorderPolicy::ShiftWindow,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Patch geometry and normalization taken from a backbone.
    pub fn for_backbone(spec: &BackboneSpec) -> Result<Self> {
        Self::new(spec.input_size, spec.norm_mean, spec.norm_std)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 2 != 0 {
            return Err(Error::invalid("size", format!("must be even and positive, got {}", self.size)));
        }
        if self.norm_std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("norm_std", "every channel must be strictly positive"));
        }
        if self.norm_mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("norm_mean", "must be finite"));
        }
        Ok(())
    }

    /// Stable string used when caching features computed from these patches.
    pub fn cache_key(&self) -> String {
        format!("{}|{:?}|{:?}|{:?}", self.size, self.norm_mean, self.norm_std, self.border_policy)
    }
}

/// Top-left corner of the window of side `size` centered on `center`,
/// shifted by the smallest amount that keeps it inside `[0, extent)`.
pub fn window_origin_1d(center: f64, extent: usize, size: usize) -> Result<usize> {
    if extent < size {
        return Err(Error::OutOfRange(format!("image extent {extent} smaller than patch size {size}")));
    }
    let ideal = center.floor() as i64 - (size / 2) as i64;
    Ok(ideal.clamp(0, (extent - size) as i64) as usize)
}

/// Window placement for an annotation in an image of `(width, height)`.
pub fn window_origin(x: f64, y: f64, dims: (usize, usize), size: usize) -> Result<(usize, usize)> {
    if dims.0 < size || dims.1 < size {
        return Err(Error::OutOfRange(format!(
            "image of {}x{} is smaller than the {size}x{size} patch",
            dims.0, dims.1
        )));
    }
    Ok((window_origin_1d(x, dims.0, size)?, window_origin_1d(y, dims.1, size)?))
}

#[derive(Debug, Clone)]
pub struct ExtractedPatch {
    pub pixels: RawPatch,
    pub origin: (usize, usize),
    /// Annotation position relative to the window origin.
    pub offset: (f64, f64),
}

pub fn extract_patch(store: &dyn TileReader, record: &AnnotationRecord, spec: &PatchSpec) -> Result<ExtractedPatch> {
    let dims = store.dimensions(&record.image_ref)?;
    if !(record.x >= 0.0 && record.y >= 0.0 && record.x < dims.0 as f64 && record.y < dims.1 as f64) {
        return Err(Error::OutOfRange(format!(
            "annotation `{}` at ({}, {}) outside {}x{}",
            record.annotation_id, record.x, record.y, dims.0, dims.1
        )));
    }
    let origin = window_origin(record.x, record.y, dims, spec.size)?;
    let pixels = store.read_region(&record.image_ref, origin.0, origin.1, spec.size, spec.size)?;
    Ok(ExtractedPatch {
        pixels,
        origin,
        offset: (record.x - origin.0 as f64, record.y - origin.1 as f64),
    })
}

#[derive(Debug, Clone)]
pub struct RandomPatch {
    pub pixels: RawPatch,
    pub origin: (usize, usize),
    /// Synthetic negative anchored at the window center; training use only.
    pub record: AnnotationRecord,
    /// True when no candidate met the exclusion radius and the best one was used.
    pub relaxed: bool,
    pub tries: usize,
}

/// Draws a uniformly placed window away from the mitotic figures listed in
/// `records` (which should all belong to `image_ref`).
pub fn sample_random_patch(
    store: &dyn TileReader,
    image_ref: &str,
    records: &[&AnnotationRecord],
    spec: &PatchSpec,
    rng: &mut Rng,
) -> Result<RandomPatch> {
    let (w, h) = store.dimensions(image_ref)?;
    if w < spec.size || h < spec.size {
        return Err(Error::OutOfRange(format!(
            "image `{image_ref}` of {w}x{h} is smaller than the {0}x{0} patch",
            spec.size
        )));
    }
    let half = (spec.size / 2) as f64;
    let figures: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.label == Label::MitoticFigure && r.image_ref == image_ref)
        .map(|r| (r.x, r.y))
        .collect();
    let clearance = |x0: usize, y0: usize| -> f64 {
        let (cx, cy) = (x0 as f64 + half, y0 as f64 + half);
        figures
            .iter()
            .map(|(fx, fy)| ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };

    let mut best = (0usize, 0usize, f64::NEG_INFINITY);
    let mut chosen = None;
    let mut tries = 0;
    while tries < RANDOM_PATCH_MAX_TRIES {
        tries += 1;
        let x0 = rng.random_range(0..=w - spec.size);
        let y0 = rng.random_range(0..=h - spec.size);
        let c = clearance(x0, y0);
        if c >= RANDOM_PATCH_EXCLUSION_PX {
            chosen = Some((x0, y0));
            break;
        }
        if c > best.2 {
            best = (x0, y0, c);
        }
    }
    let relaxed = chosen.is_none();
    let (x0, y0) = chosen.unwrap_or((best.0, best.1));
    let pixels = store.read_region(image_ref, x0, y0, spec.size, spec.size)?;
    let template = records.iter().find(|r| r.image_ref == image_ref);
    let record = AnnotationRecord {
        annotation_id: format!("random:{image_ref}:{x0}:{y0}"),
        case_id: template.map_or_else(|| image_ref.to_string(), |r| r.case_id.clone()),
        domain: template.map_or_else(String::new, |r| r.domain.clone()),
        image_ref: image_ref.to_string(),
        x: x0 as f64 + half,
        y: y0 as f64 + half,
        label: Label::HardNegative,
    };
    Ok(RandomPatch {
        pixels,
        origin: (x0, y0),
        record,
        relaxed,
        tries,
    })
}

/// Maps raw H×W×3 pixels to a 3×H×W tensor with `(p/255 − mean_c)/std_c`.
pub fn normalize(raw: &RawPatch, spec: &PatchSpec) -> Result<Array3<f32>> {
    if raw.shape()[2] != 3 {
        return Err(Error::shape("raw patch channels", "3", raw.shape()[2].to_string()));
    }
    let (h, w, _) = raw.dim();
    Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        ((f64::from(raw[[y, x, c]]) / 255.0 - spec.norm_mean[c]) / spec.norm_std[c]) as f32
    }))
}

/// Inverse of [`normalize`].
pub fn denormalize(t: &Array3<f32>, spec: &PatchSpec) -> Result<RawPatch> {
    if t.shape()[0] != 3 {
        return Err(Error::shape("tensor channels", "3", t.shape()[0].to_string()));
    }
    let (_, h, w) = t.dim();
    Ok(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        ((f64::from(t[[c, y, x]]) * spec.norm_std[c] + spec.norm_mean[c]) * 255.0) as f32
    }))
}
