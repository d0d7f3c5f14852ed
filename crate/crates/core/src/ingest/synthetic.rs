use std::collections::BTreeMap;

use ndarray::Array3;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::manifest::{AnnotationRecord, DatasetManifest, ImageInfo, Label};
use super::reader::{RawPatch, TileReader};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from};

/// Parameters of a procedurally rendered toy dataset.
///
/// Every image is a noisy flat background with round "nuclei". Mitotic
/// figures are tinted toward red and hard negatives toward blue by the same
/// amount, while the background has equal red and blue means. The label of
/// a centered patch is therefore the sign of `mean(R) − mean(B)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub name: String,
    pub seed: u64,
    pub domains: Vec<String>,
    pub cases_per_domain: usize,
    pub image_size: usize,
    pub figures_per_image: usize,
    pub hard_negatives_per_image: usize,
    pub blob_radius: f64,
    pub tint: f64,
    pub tint_jitter: f64,
    pub noise: f64,
    pub min_spacing: f64,
    /// Per-domain shift of the green channel and overall brightness.
    pub domain_shift: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            name: "synthetic".into(),
            seed: 0,
            domains: vec!["A".into()],
            cases_per_domain: 6,
            image_size: 1024,
            figures_per_image: 4,
            hard_negatives_per_image: 4,
            blob_radius: 36.0,
            tint: 45.0,
            tint_jitter: 15.0,
            noise: 12.0,
            min_spacing: 240.0,
            domain_shift: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Blob {
    x: f64,
    y: f64,
    radius: f64,
    color: [f32; 3],
}

#[derive(Debug, Clone)]
struct SynthImage {
    width: usize,
    height: usize,
    background: [f32; 3],
    noise_seed: u64,
    noise: f32,
    blobs: Vec<Blob>,
}

/// Tile reader that renders pixels on demand.
#[derive(Debug, Clone, Default)]
pub struct SyntheticStore {
    images: BTreeMap<String, SynthImage>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SynthImage {
    fn pixel(&self, x: usize, y: usize, blobs: &[&Blob]) -> [f32; 3] {
        let mut px = self.background;
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        for b in blobs {
            let d = ((fx - b.x).powi(2) + (fy - b.y).powi(2)).sqrt();
            // Soft two-pixel edge.
            let w = ((b.radius - d) / 2.0 + 0.5).clamp(0.0, 1.0) as f32;
            if w > 0.0 {
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - w) + b.color[c] * w;
                }
            }
        }
        let h = splitmix(self.noise_seed ^ ((y as u64) << 32 | x as u64));
        for (c, v) in px.iter_mut().enumerate() {
            let bits = (h >> (c * 16)) & 0xFFFF;
            let u = bits as f32 / 65535.0 * 2.0 - 1.0;
            *v = (*v + u * self.noise).clamp(0.0, 255.0);
        }
        px
    }
}

impl SyntheticStore {
    pub fn render(&self, image_ref: &str) -> Result<Array3<u8>> {
        let (w, h) = self.dimensions(image_ref)?;
        Ok(self.read_region(image_ref, 0, 0, w, h)?.mapv(|v| v.round() as u8))
    }

    /// Renders every image to a PNG file named after its image ref.
    pub fn save_png(&self, dir: &std::path::Path) -> Result<()> {
        for name in self.images.keys() {
            let mut one = super::reader::MemoryImageStore::new();
            one.insert(name.clone(), self.render(name)?)?;
            one.save_png(dir)?;
        }
        Ok(())
    }
}

impl TileReader for SyntheticStore {
    fn dimensions(&self, image_ref: &str) -> Result<(usize, usize)> {
        let img = self
            .images
            .get(image_ref)
            .ok_or_else(|| Error::invalid("image_ref", format!("`{image_ref}` not in synthetic store")))?;
        Ok((img.width, img.height))
    }

    fn read_region(&self, image_ref: &str, x0: usize, y0: usize, w: usize, h: usize) -> Result<RawPatch> {
        let img = self
            .images
            .get(image_ref)
            .ok_or_else(|| Error::invalid("image_ref", format!("`{image_ref}` not in synthetic store")))?;
        if x0 + w > img.width || y0 + h > img.height {
            return Err(Error::OutOfRange(format!(
                "region ({x0}, {y0}, {w}, {h}) exceeds `{image_ref}` of size {}x{}",
                img.width, img.height
            )));
        }
        let near: Vec<&Blob> = img
            .blobs
            .iter()
            .filter(|b| {
                b.x + b.radius + 2.0 >= x0 as f64
                    && b.x - b.radius - 2.0 <= (x0 + w) as f64
                    && b.y + b.radius + 2.0 >= y0 as f64
                    && b.y - b.radius - 2.0 <= (y0 + h) as f64
            })
            .collect();
        let mut out = Array3::<f32>::zeros((h, w, 3));
        for dy in 0..h {
            for dx in 0..w {
                let px = img.pixel(x0 + dx, y0 + dy, &near);
                for c in 0..3 {
                    out[[dy, dx, c]] = px[c];
                }
            }
        }
        Ok(out)
    }
}

/// Manifest plus matching image store.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub store: SyntheticStore,
}

/// The linear decision statistic behind the synthetic labels.
pub fn red_blue_contrast(patch: &RawPatch) -> f64 {
    let n = (patch.shape()[0] * patch.shape()[1]) as f64;
    let mut acc = 0.0;
    for px in patch.lanes(ndarray::Axis(2)) {
        acc += f64::from(px[0]) - f64::from(px[2]);
    }
    acc / n
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    if cfg.domains.is_empty() || cfg.cases_per_domain == 0 {
        return Err(Error::invalid("synthetic", "need at least one domain and one case"));
    }
    if cfg.figures_per_image == 0 {
        return Err(Error::invalid("figures_per_image", "must be positive"));
    }
    if !(cfg.blob_radius > 0.0) || cfg.image_size < 2 * cfg.blob_radius as usize + 2 {
        return Err(Error::invalid("blob_radius", "must be positive and fit in the image"));
    }
    let mut manifest = DatasetManifest::new(cfg.name.clone());
    let mut store = SyntheticStore::default();
    let size = cfg.image_size;
    let margin = cfg.blob_radius + 2.0;
    for (di, domain) in cfg.domains.iter().enumerate() {
        let shift = cfg.domain_shift * di as f64;
        let bright = (-(shift / 2.0)).max(-60.0);
        let background = [
            (185.0 + bright) as f32,
            (150.0 + shift - bright).clamp(60.0, 230.0) as f32,
            (185.0 + bright) as f32,
        ];
        for case in 0..cfg.cases_per_domain {
            let case_id = format!("{domain}-case{case:02}");
            let image_ref = format!("{case_id}.png");
            let mut rng = rng_from(cfg.seed, &["synthetic", &case_id]);
            let n_blobs = cfg.figures_per_image + cfg.hard_negatives_per_image;
            let mut blobs: Vec<Blob> = Vec::with_capacity(n_blobs);
            let mut records = Vec::new();
            for k in 0..n_blobs {
                let label = if k < cfg.figures_per_image {
                    Label::MitoticFigure
                } else {
                    Label::HardNegative
                };
                let mut placed = None;
                let mut best = (0.0, 0.0, f64::NEG_INFINITY);
                for _ in 0..200 {
                    let x = rng.random_range(margin..size as f64 - margin);
                    let y = rng.random_range(margin..size as f64 - margin);
                    let gap = blobs
                        .iter()
                        .map(|b| ((b.x - x).powi(2) + (b.y - y).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min);
                    if gap >= cfg.min_spacing {
                        placed = Some((x, y));
                        break;
                    }
                    if gap > best.2 {
                        best = (x, y, gap);
                    }
                }
                let (x, y) = placed.unwrap_or((best.0, best.1));
                let sign = if label.is_positive() { 1.0 } else { -1.0 };
                let t = (cfg.tint + cfg.tint_jitter * rng.random_range(-1.0..=1.0)).max(1.0) * sign;
                let nucleus = 110.0 + bright + rng.random_range(-10.0..=10.0);
                let color = [
                    (nucleus + t).clamp(0.0, 255.0) as f32,
                    (nucleus - 30.0 + shift / 2.0).clamp(0.0, 255.0) as f32,
                    (nucleus - t).clamp(0.0, 255.0) as f32,
                ];
                blobs.push(Blob {
                    x,
                    y,
                    radius: cfg.blob_radius * rng.random_range(0.85..=1.15),
                    color,
                });
                records.push(AnnotationRecord {
                    annotation_id: format!("{case_id}-{k:03}"),
                    case_id: case_id.clone(),
                    domain: domain.clone(),
                    image_ref: image_ref.clone(),
                    x: x.floor(),
                    y: y.floor(),
                    label,
                });
            }
            store.images.insert(
                image_ref.clone(),
                SynthImage {
                    width: size,
                    height: size,
                    background,
                    noise_seed: derive_seed(cfg.seed, &["noise", &case_id]),
                    noise: cfg.noise as f32,
                    blobs,
                },
            );
            manifest.images.insert(image_ref, ImageInfo { width: size, height: size });
            manifest.records.extend(records);
        }
    }
    manifest.validate()?;
    Ok(SyntheticDataset { manifest, store })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::patch::{extract_patch, PatchSpec};

    #[test]
    fn labels_follow_red_blue_contrast() {
        let cfg = SyntheticConfig {
            domains: vec!["A".into(), "B".into()],
            cases_per_domain: 2,
            ..Default::default()
        };
        let ds = generate(&cfg).unwrap();
        assert_eq!(ds.manifest.records.len(), 2 * 2 * 8);
        let spec = PatchSpec::new(224, [0.5; 3], [0.5; 3]).unwrap();
        for r in &ds.manifest.records {
            let p = extract_patch(&ds.store, r, &spec).unwrap();
            let s = red_blue_contrast(&p.pixels);
            assert_eq!(s > 0.0, r.label.is_positive(), "{} score {s}", r.annotation_id);
        }
    }

    #[test]
    fn deterministic_rendering() {
        let cfg = SyntheticConfig {
            cases_per_domain: 1,
            image_size: 300,
            figures_per_image: 1,
            hard_negatives_per_image: 1,
            min_spacing: 50.0,
            ..Default::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.manifest, b.manifest);
        let r = &a.manifest.records[0].image_ref;
        assert_eq!(a.store.render(r).unwrap(), b.store.render(r).unwrap());
        let region = a.store.read_region(r, 10, 20, 5, 7).unwrap();
        let full = a.store.render(r).unwrap();
        assert_eq!(region[[3, 2, 1]].round() as u8, full[[23, 12, 1]]);
    }
}
