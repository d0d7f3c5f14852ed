//! Loading and saving backbone parameters.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};

use super::spec::{BackboneHandle, NameMapping};
use super::vit::{ParamGroup, VisionTransformer};
use crate::archive::{Tensor, TensorArchive};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::seed;

/// Where a backbone's parameters come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WeightSource {
    /// Deterministic random initialization.
    Seeded(u64),
    /// Tensor archive on disk, optionally pinned to a SHA-256 of the file.
    Archive { path: PathBuf, sha256: Option<String> },
    /// A locator this crate cannot resolve by itself (hub ids etc.).
    External(String),
}

impl WeightSource {
    /// Parses `seed:<n>`, `file:<path>[#sha256=<hex>]`, or a bare path to
    /// an existing file. Anything else is treated as external.
    pub fn parse(locator: &str) -> Result<Self> {
        if let Some(rest) = locator.strip_prefix("seed:") {
            let seed = rest
                .trim()
                .parse()
                .map_err(|e| Error::invalid("weights_source", format!("bad seed `{rest}`: {e}")))?;
            return Ok(WeightSource::Seeded(seed));
        }
        let (file, explicit) = match locator.strip_prefix("file:") {
            Some(rest) => (rest, true),
            None => (locator, false),
        };
        let (path, sha256) = match file.split_once("#sha256=") {
            Some((p, h)) => (p, Some(h.to_ascii_lowercase())),
            None => (file, None),
        };
        if explicit || Path::new(path).is_file() {
            return Ok(WeightSource::Archive {
                path: PathBuf::from(path),
                sha256,
            });
        }
        Ok(WeightSource::External(locator.to_string()))
    }
}

/// Builds an executable backbone in inference mode. Base weights are frozen
/// unless an adaptation mode says otherwise.
pub fn load_weights<T: Real>(spec: &BackboneHandle, source: &WeightSource) -> Result<VisionTransformer<T>> {
    match source {
        WeightSource::Seeded(seed) => VisionTransformer::seeded(spec.clone(), *seed),
        WeightSource::Archive { path, sha256 } => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            if let Some(expected) = sha256 {
                if &seed::sha256_hex(&bytes) != expected {
                    return Err(Error::Checksum);
                }
            }
            let archive = TensorArchive::from_bytes(&bytes)?;
            from_archive(spec, &archive)
        }
        WeightSource::External(locator) => Err(Error::MissingWeights {
            model: spec.name.clone(),
            reason: format!(
                "`{locator}` is an external checkpoint; convert it to a tensor archive and set weights_source to `file:<path>`"
            ),
        }),
    }
}

/// Serializes base parameters (and adapters, if any) under native names.
pub fn to_archive<T: Real>(model: &VisionTransformer<T>) -> TensorArchive {
    let mut archive = TensorArchive::default();
    archive.metadata.insert("backbone".into(), model.spec().name.clone());
    model.visit_params(&mut |name, _, view| {
        let data = view.iter().map(|v| v.as_f32()).collect();
        archive.insert(name, Tensor::new(view.shape().to_vec(), data).expect("consistent shape"));
    });
    archive
}

fn squeeze(shape: &[usize]) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    while s.len() > 1 && s[0] == 1 {
        s.remove(0);
    }
    s
}

fn compatible(source: &[usize], target: &[usize]) -> bool {
    if source.iter().product::<usize>() != target.iter().product::<usize>() {
        return false;
    }
    if squeeze(source) == target {
        return true;
    }
    // conv-style patch embedding (d, 3, p, p) against (d, 3 p p)
    target.len() == 2 && source.len() > 2 && source[0] == target[0]
}

fn to_array<T: Real>(t: &Tensor, shape: &[usize]) -> ArrayD<T> {
    ArrayD::from_shape_vec(IxDyn(shape), t.data.iter().map(|&v| T::of_f32(v)).collect()).expect("checked shape")
}

/// Rewrites a timm-style state dict into native names.
fn map_timm(archive: &TensorArchive, width: usize) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for (name, t) in &archive.tensors {
        let mapped = |n: &str| -> String {
            n.replace(".attn.proj.", ".attn.o.")
                .replace("norm1.weight", "norm1.gamma")
                .replace("norm1.bias", "norm1.beta")
                .replace("norm2.weight", "norm2.gamma")
                .replace("norm2.bias", "norm2.beta")
        };
        if name.starts_with("head.") || name.starts_with("fc_norm.") {
            continue;
        }
        match name.as_str() {
            "patch_embed.proj.weight" => {
                out.insert("patch_embed.weight".into(), t.clone());
            }
            "patch_embed.proj.bias" => {
                out.insert("patch_embed.bias".into(), t.clone());
            }
            "cls_token" | "pos_embed" => {
                out.insert(name.clone(), t.clone());
            }
            "reg_token" => {
                out.insert("register_tokens".into(), t.clone());
            }
            "norm.weight" => {
                out.insert("norm.gamma".into(), t.clone());
            }
            "norm.bias" => {
                out.insert("norm.beta".into(), t.clone());
            }
            n if n.starts_with("blocks.") && n.contains(".attn.qkv.") => {
                let prefix = &n[..n.find(".attn.qkv.").expect("checked")];
                let leaf = if n.ends_with("weight") { "weight" } else { "bias" };
                if t.shape.first() != Some(&(3 * width)) {
                    return Err(Error::shape(n.to_string(), [3 * width], &t.shape));
                }
                let chunk = t.len() / 3;
                let rest: Vec<usize> = t.shape[1..].to_vec();
                for (i, part) in ["q", "k", "v"].iter().enumerate() {
                    let mut shape = vec![width];
                    shape.extend_from_slice(&rest);
                    let data = t.data[i * chunk..(i + 1) * chunk].to_vec();
                    out.insert(format!("{prefix}.attn.{part}.{leaf}"), Tensor::new(shape, data)?);
                }
            }
            n if n.starts_with("blocks.")
                && (n.contains(".norm1.") || n.contains(".norm2.") || n.contains(".attn.proj.") || n.contains(".mlp.fc")) =>
            {
                out.insert(mapped(n), t.clone());
            }
            other => {
                return Err(Error::Unsupported(format!("checkpoint tensor `{other}` has no mapping")));
            }
        }
    }
    Ok(out)
}

/// Fills a backbone from an archive, validating every tensor against the
/// spec geometry. The first absent tensor, in structural order, is reported.
pub fn from_archive<T: Real>(spec: &BackboneHandle, archive: &TensorArchive) -> Result<VisionTransformer<T>> {
    let tensors = match spec.name_mapping {
        NameMapping::Native => archive.tensors.clone(),
        NameMapping::Timm => map_timm(archive, spec.width)?,
    };
    let mut model = VisionTransformer::<T>::seeded(spec.clone(), 0)?;
    let mut expected = Vec::new();
    model.visit_params(&mut |name, group, view| {
        if group == ParamGroup::Base {
            expected.push((name.to_string(), view.shape().to_vec()));
        }
    });
    for (name, shape) in &expected {
        let t = tensors.get(name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
        if !compatible(&t.shape, shape) {
            return Err(Error::shape(name.clone(), shape, &t.shape));
        }
        model.assign_param(name, to_array::<T>(t, shape).view())?;
    }
    let known: std::collections::BTreeSet<&str> = expected.iter().map(|(n, _)| n.as_str()).collect();
    if let Some(extra) = tensors.keys().find(|k| !known.contains(k.as_str())) {
        return Err(Error::Shape {
            what: "weight archive".into(),
            expected: format!("tensors of a depth-{} backbone", spec.depth),
            actual: format!("unexpected tensor `{extra}`"),
        });
    }
    Ok(model)
}
