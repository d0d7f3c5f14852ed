//! Building blocks of the transformer with explicit forward caches and
//! hand-written backward passes.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayD, ArrayView2, Axis, Zip};
use rand::Rng as _;

use crate::adapt::LoraLayer;
use crate::real::Real;
use crate::seed::Rng;

/// Gradients keyed by parameter path.
pub type Grads<T> = BTreeMap<String, ArrayD<T>>;

/// Which parameter groups receive gradients in a backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradMask {
    pub base: bool,
    pub adapters: bool,
}

impl GradMask {
    pub fn any(&self) -> bool {
        self.base || self.adapters
    }
}

pub(crate) fn uniform_matrix<T: Real>(rng: &mut Rng, rows: usize, cols: usize, bound: f64) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || T::lit(rng.random_range(-bound..=bound)))
}

pub(crate) fn uniform_vector<T: Real>(rng: &mut Rng, len: usize, bound: f64) -> Array1<T> {
    Array1::from_shape_simple_fn(len, || T::lit(rng.random_range(-bound..=bound)))
}

fn add_row_broadcast<T: Real>(y: &mut Array2<T>, bias: &Array1<T>) {
    for mut row in y.rows_mut() {
        row += bias;
    }
}

/// Affine map `y = x W^T + b`, optionally wrapped by a low-rank adapter:
/// `y = x W^T + b + gamma * (drop(x) A^T) B^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T: Real> {
    /// `out x in`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub adapter: Option<LoraLayer<T>>,
}

#[derive(Debug, Clone)]
pub(crate) struct LinearCache<T: Real> {
    /// Inverted-dropout multipliers applied to the adapter input.
    mask: Option<Array2<T>>,
    /// Adapter down-projection `drop(x) A^T`.
    down: Option<Array2<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(weight: Array2<T>, bias: Array1<T>) -> Self {
        Linear {
            weight,
            bias,
            adapter: None,
        }
    }

    pub(crate) fn seeded(rng: &mut Rng, out_dim: usize, in_dim: usize) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Linear::new(
            uniform_matrix(rng, out_dim, in_dim, bound),
            uniform_vector(rng, out_dim, bound),
        )
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Forward over row-vectors. `train_rng` enables adapter dropout.
    pub(crate) fn forward(&self, x: ArrayView2<T>, train_rng: Option<&mut Rng>) -> (Array2<T>, LinearCache<T>) {
        let mut y = x.dot(&self.weight.t());
        add_row_broadcast(&mut y, &self.bias);
        let mut cache = LinearCache { mask: None, down: None };
        if let Some(adapter) = &self.adapter {
            let p = adapter.dropout_p;
            let mask = match train_rng {
                Some(rng) if p > 0.0 => {
                    let keep = T::lit(1.0 / (1.0 - p));
                    Some(Array2::from_shape_simple_fn(x.raw_dim(), || {
                        if rng.random::<f64>() < p {
                            T::zero()
                        } else {
                            keep
                        }
                    }))
                }
                _ => None,
            };
            let down = match &mask {
                Some(m) => (&x * m).dot(&adapter.a.t()),
                None => x.dot(&adapter.a.t()),
            };
            let up = down.dot(&adapter.b.t());
            y.scaled_add(adapter.gamma, &up);
            cache.mask = mask;
            cache.down = Some(down);
        }
        (y, cache)
    }

    /// Accumulates parameter gradients under `prefix` and returns `dL/dx`
    /// when `need_dx`.
    pub(crate) fn backward(
        &self,
        x: ArrayView2<T>,
        cache: &LinearCache<T>,
        dy: ArrayView2<T>,
        mask: GradMask,
        need_dx: bool,
        prefix: &str,
        grads: &mut Grads<T>,
    ) -> Option<Array2<T>> {
        if mask.base {
            grads.insert(format!("{prefix}.weight"), dy.t().dot(&x).into_dyn());
            grads.insert(format!("{prefix}.bias"), dy.sum_axis(Axis(0)).into_dyn());
        }
        let mut dx = need_dx.then(|| dy.dot(&self.weight));
        if let Some(adapter) = &self.adapter {
            let through_b = dy.dot(&adapter.b); // N x r
            if mask.adapters {
                let down = cache.down.as_ref().expect("adapter forward cache");
                let dropped = match &cache.mask {
                    Some(m) => &x * m,
                    None => x.to_owned(),
                };
                let db = dy.t().dot(down) * adapter.gamma;
                let da = through_b.t().dot(&dropped) * adapter.gamma;
                grads.insert(format!("{prefix}.lora_a"), da.into_dyn());
                grads.insert(format!("{prefix}.lora_b"), db.into_dyn());
            }
            if let Some(dx) = dx.as_mut() {
                let mut branch = through_b.dot(&adapter.a) * adapter.gamma;
                if let Some(m) = &cache.mask {
                    branch *= m;
                }
                *dx += &branch;
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T: Real> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub eps: T,
}

#[derive(Debug, Clone)]
pub(crate) struct NormCache<T: Real> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(width: usize, eps: f64) -> Self {
        LayerNorm {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            eps: T::lit(eps),
        }
    }

    pub(crate) fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, NormCache<T>) {
        let n = T::from_usize(x.ncols()).expect("width");
        let mut xhat = x.to_owned();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / n;
            *r = T::one() / (var + self.eps).sqrt();
            let rs = *r;
            row.mapv_inplace(|v| v * rs);
        }
        let mut y = &xhat * &self.gamma;
        add_row_broadcast(&mut y, &self.beta);
        (y, NormCache { xhat, rstd })
    }

    pub(crate) fn backward(
        &self,
        cache: &NormCache<T>,
        dy: ArrayView2<T>,
        need_params: bool,
        prefix: &str,
        grads: &mut Grads<T>,
    ) -> Array2<T> {
        if need_params {
            grads.insert(format!("{prefix}.gamma"), (&dy * &cache.xhat).sum_axis(Axis(0)).into_dyn());
            grads.insert(format!("{prefix}.beta"), dy.sum_axis(Axis(0)).into_dyn());
        }
        let n = T::from_usize(dy.ncols()).expect("width");
        let dxhat = &dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        Zip::from(dx.rows_mut())
            .and(dxhat.rows())
            .and(cache.xhat.rows())
            .and(&cache.rstd)
            .for_each(|mut out, g, xh, &rs| {
                let mean_g = g.sum() / n;
                let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
                Zip::from(&mut out).and(g).and(xh).for_each(|o, &gi, &xi| {
                    *o = rs * (gi - mean_g - xi * mean_gx);
                });
            });
        dx
    }
}

fn std_normal_pdf<T: Real>(x: T) -> T {
    (-(x * x) * T::lit(0.5)).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt())
}

fn std_normal_cdf<T: Real>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Exact (erf-based) GELU.
pub(crate) fn gelu<T: Real>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| v * std_normal_cdf(v))
}

pub(crate) fn gelu_backward<T: Real>(x: &Array2<T>, dy: ArrayView2<T>) -> Array2<T> {
    let mut out = x.mapv(|v| std_normal_cdf(v) + v * std_normal_pdf(v));
    out *= &dy;
    out
}

/// Multi-head softmax attention over `batch` sequences of `seq` tokens laid
/// out as consecutive row blocks. Returns the attention output and the
/// per-(sequence, head) probability matrices.
pub(crate) fn attention<T: Real>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    batch: usize,
    seq: usize,
    heads: usize,
) -> (Array2<T>, Vec<Array2<T>>) {
    let width = q.ncols();
    let hd = width / heads;
    let scale = T::one() / T::from_usize(hd).expect("head dim").sqrt();
    let mut out = Array2::zeros(q.raw_dim());
    let mut probs = Vec::with_capacity(batch * heads);
    for b in 0..batch {
        let rows = b * seq..(b + 1) * seq;
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let qh = q.slice(s![rows.clone(), cols.clone()]);
            let kh = k.slice(s![rows.clone(), cols.clone()]);
            let vh = v.slice(s![rows.clone(), cols.clone()]);
            let mut scores = qh.dot(&kh.t()) * scale;
            for mut row in scores.rows_mut() {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                row.mapv_inplace(|z| (z - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|z| z / sum);
            }
            out.slice_mut(s![rows.clone(), cols]).assign(&scores.dot(&vh));
            probs.push(scores);
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Real>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    probs: &[Array2<T>],
    dout: ArrayView2<T>,
    batch: usize,
    seq: usize,
    heads: usize,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let width = q.ncols();
    let hd = width / heads;
    let scale = T::one() / T::from_usize(hd).expect("head dim").sqrt();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    for b in 0..batch {
        let rows = b * seq..(b + 1) * seq;
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let p = &probs[b * heads + h];
            let qh = q.slice(s![rows.clone(), cols.clone()]);
            let kh = k.slice(s![rows.clone(), cols.clone()]);
            let vh = v.slice(s![rows.clone(), cols.clone()]);
            let doh = dout.slice(s![rows.clone(), cols.clone()]);
            let dp = doh.dot(&vh.t());
            dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&doh));
            let mut ds = dp;
            Zip::from(ds.rows_mut()).and(p.rows()).for_each(|mut dsr, pr| {
                let dot = dsr.iter().zip(pr).map(|(&a, &b)| a * b).sum::<T>();
                Zip::from(&mut dsr).and(pr).for_each(|d, &pi| *d = pi * (*d - dot));
            });
            ds *= scale;
            dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kh));
            dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qh));
        }
    }
    (dq, dk, dv)
}
