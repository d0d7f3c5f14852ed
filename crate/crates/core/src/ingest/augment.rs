use ndarray::{Array3, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::reader::RawPatch;
use crate::error::{Error, Result};
use crate::seed::Rng;

/// Transform probabilities and magnitudes for training-time augmentation.
///
/// Transforms run in a fixed order: color jitter, blur, flips, quarter
/// turns, free rotation. Each step draws from the rng only when its
/// probability is positive, so a zero-probability policy consumes no
/// randomness and returns the input unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub rot90_p: f64,
    pub free_rotation_p: f64,
    pub free_rotation_max_deg: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            jitter_p: 1.0,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
            blur_p: 0.5,
            blur_sigma: (0.1, 2.0),
            hflip_p: 0.5,
            vflip_p: 0.5,
            rot90_p: 1.0,
            free_rotation_p: 0.0,
            free_rotation_max_deg: 180.0,
        }
    }
}

impl AugmentPolicy {
    /// Policy with every probability at zero.
    pub fn identity() -> Self {
        AugmentPolicy {
            jitter_p: 0.0,
            blur_p: 0.0,
            hflip_p: 0.0,
            vflip_p: 0.0,
            rot90_p: 0.0,
            free_rotation_p: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("jitter_p", self.jitter_p),
            ("blur_p", self.blur_p),
            ("hflip_p", self.hflip_p),
            ("vflip_p", self.vflip_p),
            ("rot90_p", self.rot90_p),
            ("free_rotation_p", self.free_rotation_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(name, format!("probability {p} outside [0, 1]")));
            }
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(name, format!("{v} outside [0, 1]")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::invalid("hue", format!("{} outside [0, 0.5]", self.hue)));
        }
        let (lo, hi) = self.blur_sigma;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid("blur_sigma", format!("bad range ({lo}, {hi})")));
        }
        Ok(())
    }
}

fn hit(rng: &mut Rng, p: f64) -> bool {
    p > 0.0 && rng.random::<f64>() < p
}

fn factor(rng: &mut Rng, magnitude: f64) -> f32 {
    if magnitude > 0.0 {
        rng.random_range(1.0 - magnitude..=1.0 + magnitude) as f32
    } else {
        1.0
    }
}

fn clamp(p: &mut RawPatch) {
    p.mapv_inplace(|v| v.clamp(0.0, 255.0));
}

fn gray(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn adjust_brightness(p: &mut RawPatch, f: f32) {
    p.mapv_inplace(|v| v * f);
    clamp(p);
}

pub fn adjust_contrast(p: &mut RawPatch, f: f32) {
    let n = (p.shape()[0] * p.shape()[1]) as f32;
    let mean = p
        .lanes(Axis(2))
        .into_iter()
        .map(|px| gray(px[0], px[1], px[2]))
        .sum::<f32>()
        / n;
    p.mapv_inplace(|v| (v - mean) * f + mean);
    clamp(p);
}

pub fn adjust_saturation(p: &mut RawPatch, f: f32) {
    for mut px in p.lanes_mut(Axis(2)) {
        let g = gray(px[0], px[1], px[2]);
        for c in 0..3 {
            px[c] = (px[c] - g) * f + g;
        }
    }
    clamp(p);
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Rotates hue by `shift` turns (so 0.05 is 18 degrees).
pub fn adjust_hue(p: &mut RawPatch, shift: f32) {
    for mut px in p.lanes_mut(Axis(2)) {
        let (h, s, v) = rgb_to_hsv(px[0] / 255.0, px[1] / 255.0, px[2] / 255.0);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        px[0] = r * 255.0;
        px[1] = g * 255.0;
        px[2] = b * 255.0;
    }
    clamp(p);
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflected borders, radius ⌈3σ⌉.
pub fn gaussian_blur(p: &RawPatch, sigma: f64) -> RawPatch {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w, ch) = p.dim();
    let src = p.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let taps = |n: usize| -> Vec<usize> {
        (0..n as isize)
            .flat_map(|i| (-radius..=radius).map(move |j| (i, j)))
            .map(|(i, j)| reflect(i + j, n))
            .collect()
    };
    let k = kernel.len();
    let xs = taps(w);
    let ys = taps(h);
    let mut tmp = vec![0f32; h * w * ch];
    for y in 0..h {
        let row = &src[y * w * ch..(y + 1) * w * ch];
        let out = &mut tmp[y * w * ch..(y + 1) * w * ch];
        for x in 0..w {
            let idx = &xs[x * k..(x + 1) * k];
            let mut acc = [0f32; 3];
            for (kk, &sx) in kernel.iter().zip(idx) {
                for c in 0..ch.min(3) {
                    acc[c] += kk * row[sx * ch + c];
                }
            }
            out[x * ch..x * ch + ch.min(3)].copy_from_slice(&acc[..ch.min(3)]);
        }
    }
    let mut out = vec![0f32; h * w * ch];
    let stride = w * ch;
    for y in 0..h {
        let idx = &ys[y * k..(y + 1) * k];
        let dst = &mut out[y * stride..(y + 1) * stride];
        for (kk, &sy) in kernel.iter().zip(idx) {
            let srow = &tmp[sy * stride..(sy + 1) * stride];
            for (d, v) in dst.iter_mut().zip(srow) {
                *d += kk * v;
            }
        }
    }
    let mut out = Array3::from_shape_vec((h, w, ch), out).expect("shape matches");
    clamp(&mut out);
    out
}

pub fn hflip(p: &RawPatch) -> RawPatch {
    p.slice(ndarray::s![.., ..;-1, ..]).to_owned()
}

pub fn vflip(p: &RawPatch) -> RawPatch {
    p.slice(ndarray::s![..;-1, .., ..]).to_owned()
}

/// Counter-clockwise rotation by `k` quarter turns. Non-square patches
/// accept only even `k`, which keeps the shape.
pub fn rot90(p: &RawPatch, k: usize) -> Result<RawPatch> {
    let (h, w, _) = p.dim();
    let k = k % 4;
    if k % 2 == 1 && h != w {
        return Err(Error::shape("patch for quarter turn", "square", format!("{h}x{w}")));
    }
    Ok(match k {
        0 => p.clone(),
        1 => Array3::from_shape_fn((w, h, 3), |(i, j, c)| p[[j, w - 1 - i, c]]),
        2 => Array3::from_shape_fn((h, w, 3), |(i, j, c)| p[[h - 1 - i, w - 1 - j, c]]),
        _ => Array3::from_shape_fn((w, h, 3), |(i, j, c)| p[[h - 1 - j, i, c]]),
    })
}

/// Bilinear rotation about the patch center with reflected borders.
pub fn rotate(p: &RawPatch, degrees: f64) -> RawPatch {
    let (h, w, ch) = p.dim();
    let (s, c) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let sample = |yy: isize, xx: isize, k: usize| p[[reflect(yy, h), reflect(xx, w), k]];
    let mut out = Array3::<f32>::zeros((h, w, ch));
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for k in 0..ch {
                let top = sample(y0, x0, k) * (1.0 - fx) + sample(y0, x0 + 1, k) * fx;
                let bottom = sample(y0 + 1, x0, k) * (1.0 - fx) + sample(y0 + 1, x0 + 1, k) * fx;
                out[[y, x, k]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    clamp(&mut out);
    out
}

/// Applies `policy` to a raw patch. Same seed, same output.
pub fn augment(raw: &RawPatch, rng: &mut Rng, policy: &AugmentPolicy) -> Result<RawPatch> {
    if raw.shape()[2] != 3 {
        return Err(Error::shape("raw patch channels", "3", raw.shape()[2].to_string()));
    }
    let mut p = raw.clone();
    if hit(rng, policy.jitter_p) {
        let b = factor(rng, policy.brightness);
        let c = factor(rng, policy.contrast);
        let s = factor(rng, policy.saturation);
        let hshift = if policy.hue > 0.0 {
            rng.random_range(-policy.hue..=policy.hue) as f32
        } else {
            0.0
        };
        if b != 1.0 {
            adjust_brightness(&mut p, b);
        }
        if c != 1.0 {
            adjust_contrast(&mut p, c);
        }
        if s != 1.0 {
            adjust_saturation(&mut p, s);
        }
        if hshift != 0.0 {
            adjust_hue(&mut p, hshift);
        }
    }
    if hit(rng, policy.blur_p) {
        let sigma = rng.random_range(policy.blur_sigma.0..=policy.blur_sigma.1);
        p = gaussian_blur(&p, sigma);
    }
    if hit(rng, policy.hflip_p) {
        p = hflip(&p);
    }
    if hit(rng, policy.vflip_p) {
        p = vflip(&p);
    }
    if hit(rng, policy.rot90_p) {
        let (h, w, _) = p.dim();
        let k = if h == w { rng.random_range(0..4) } else { 2 * rng.random_range(0..2) };
        p = rot90(&p, k)?;
    }
    if hit(rng, policy.free_rotation_p) {
        let m = policy.free_rotation_max_deg;
        p = rotate(&p, rng.random_range(-m..=m));
    }
    Ok(p)
}
