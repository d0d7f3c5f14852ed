//! Linear classification head `y = W z` and its convex fit.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::Grads;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::seed::Rng;

pub const NUM_CLASSES: usize = 2;

/// Two-logit linear head. Index 0 is the hard negative, index 1 the
/// mitotic figure.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHead<T: Real> {
    /// `2 x n`.
    pub weight: Array2<T>,
    pub bias: Option<Array1<T>>,
}

impl<T: Real> ProbeHead<T> {
    pub fn new(weight: Array2<T>, bias: Option<Array1<T>>) -> Result<Self> {
        if weight.nrows() != NUM_CLASSES {
            return Err(Error::shape("probe head rows", NUM_CLASSES, weight.nrows()));
        }
        if let Some(b) = &bias {
            if b.len() != NUM_CLASSES {
                return Err(Error::shape("probe head bias", NUM_CLASSES, b.len()));
            }
        }
        Ok(ProbeHead { weight, bias })
    }

    pub fn zeros(n: usize, with_bias: bool) -> Self {
        ProbeHead {
            weight: Array2::zeros((NUM_CLASSES, n)),
            bias: with_bias.then(|| Array1::zeros(NUM_CLASSES)),
        }
    }

    pub(crate) fn seeded(rng: &mut Rng, n: usize, with_bias: bool) -> Self {
        let bound = 1.0 / (n as f64).sqrt();
        ProbeHead {
            weight: crate::backbone::layers::uniform_matrix(rng, NUM_CLASSES, n, bound),
            bias: with_bias.then(|| Array1::zeros(NUM_CLASSES)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    /// Logits for a single feature vector.
    pub fn predict(&self, z: ArrayView1<T>) -> Result<Array1<T>> {
        if z.len() != self.input_dim() {
            return Err(Error::shape("probe input", self.input_dim(), z.len()));
        }
        let mut y = self.weight.dot(&z);
        if let Some(b) = &self.bias {
            y += b;
        }
        Ok(y)
    }

    /// Logits for a `B x n` feature matrix.
    pub fn predict_batch(&self, z: ArrayView2<T>) -> Result<Array2<T>> {
        if z.ncols() != self.input_dim() {
            return Err(Error::shape("probe input", self.input_dim(), z.ncols()));
        }
        let mut y = z.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            for mut row in y.rows_mut() {
                row += b;
            }
        }
        Ok(y)
    }

    /// Accumulates `head.*` gradients and returns `dL/dz`.
    pub(crate) fn backward(&self, z: ArrayView2<T>, dlogits: ArrayView2<T>, grads: &mut Grads<T>) -> Array2<T> {
        grads.insert("head.weight".into(), dlogits.t().dot(&z).into_dyn());
        if self.bias.is_some() {
            grads.insert("head.bias".into(), dlogits.sum_axis(Axis(0)).into_dyn());
        }
        dlogits.dot(&self.weight)
    }
}

/// `y = W z` for a single feature vector.
pub fn probe_predict<T: Real>(head: &ProbeHead<T>, z: ArrayView1<T>) -> Result<Array1<T>> {
    head.predict(z)
}

/// Settings for the logistic-regression probe fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeFitConfig {
    /// L2 penalty `l2 / 2 * |W|^2` on the two-logit weight matrix.
    pub l2: f64,
    /// Append a constant feature (an unpenalized bias).
    pub fit_bias: bool,
    pub max_iter: usize,
    /// Stop when the max-norm of the gradient falls below this.
    pub tol: f64,
    pub history: usize,
}

impl Default for ProbeFitConfig {
    fn default() -> Self {
        ProbeFitConfig {
            l2: 1e-4,
            fit_bias: true,
            max_iter: 1000,
            tol: 1e-10,
            history: 10,
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary logistic objective over the logit difference `w = W_1 - W_0`.
/// With the symmetric optimum `W_1 = -W_0 = w / 2` the two-logit penalty
/// becomes `l2 / 4 * |w|^2`.
struct Objective<'a> {
    x: ArrayView2<'a, f64>,
    y: Vec<f64>,
    l2: f64,
    fit_bias: bool,
}

impl Objective<'_> {
    fn dim(&self) -> usize {
        self.x.ncols() + usize::from(self.fit_bias)
    }

    fn eval(&self, w: &Array1<f64>) -> (f64, Array1<f64>) {
        let n = self.x.ncols();
        let wv = w.slice(ndarray::s![..n]);
        let b = if self.fit_bias { w[n] } else { 0.0 };
        let s = self.x.dot(&wv) + b;
        let m = self.x.nrows() as f64;
        let mut loss = 0.0;
        let mut r = Array1::zeros(self.x.nrows());
        for (i, (&si, &yi)) in s.iter().zip(&self.y).enumerate() {
            // yi in {-1, +1}
            loss += softplus(-yi * si);
            r[i] = -yi * sigmoid(-yi * si) / m;
        }
        loss /= m;
        let mut g = Array1::zeros(self.dim());
        let gw = self.x.t().dot(&r);
        g.slice_mut(ndarray::s![..n]).assign(&gw);
        if self.fit_bias {
            g[n] = r.sum();
        }
        let reg = 0.25 * self.l2;
        loss += reg * wv.dot(&wv);
        g.slice_mut(ndarray::s![..n]).scaled_add(2.0 * reg, &wv);
        (loss, g)
    }
}

fn max_abs(v: &Array1<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Limited-memory BFGS with Armijo backtracking.
fn lbfgs(obj: &Objective, cfg: &ProbeFitConfig) -> Array1<f64> {
    let mut w = Array1::zeros(obj.dim());
    let (mut f, mut g) = obj.eval(&w);
    let mut s_hist: Vec<Array1<f64>> = Vec::new();
    let mut y_hist: Vec<Array1<f64>> = Vec::new();
    for _ in 0..cfg.max_iter {
        if max_abs(&g) < cfg.tol {
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let rho = 1.0 / y.dot(s);
            let a = rho * s.dot(&q);
            q.scaled_add(-a, y);
            alphas.push((rho, a));
        }
        let scale = match (s_hist.last(), y_hist.last()) {
            (Some(s), Some(y)) => s.dot(y) / y.dot(y),
            _ => 1.0 / max_abs(&g).max(1.0),
        };
        q *= scale;
        for ((s, y), (rho, a)) in s_hist.iter().zip(&y_hist).zip(alphas.into_iter().rev()) {
            let b = rho * y.dot(&q);
            q.scaled_add(a - b, s);
        }
        let mut dir = -q;
        let mut slope = g.dot(&dir);
        if slope >= 0.0 {
            dir = -g.clone();
            slope = g.dot(&dir);
            s_hist.clear();
            y_hist.clear();
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &w + &(&dir * step);
            let (fc, gc) = obj.eval(&cand);
            if fc <= f + 1e-4 * step * slope {
                accepted = Some((cand, fc, gc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, fc, gc)) = accepted else { break };
        let s = &cand - &w;
        let y = &gc - &g;
        if s.dot(&y) > 1e-12 * s.dot(&s).max(f64::MIN_POSITIVE) {
            s_hist.push(s);
            y_hist.push(y);
            if s_hist.len() > cfg.history {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        let done = (f - fc).abs() <= f64::EPSILON * f.abs().max(1.0) && max_abs(&gc) < cfg.tol.sqrt();
        w = cand;
        f = fc;
        g = gc;
        if done {
            break;
        }
    }
    w
}

/// Fits a two-logit head by regularized logistic regression.
/// `labels[i]` is true for the positive (mitotic) class.
pub fn fit_probe<T: Real>(features: ArrayView2<T>, labels: &[bool], cfg: &ProbeFitConfig) -> Result<ProbeHead<T>> {
    if features.nrows() != labels.len() {
        return Err(Error::shape("probe labels", features.nrows(), labels.len()));
    }
    if labels.len() < 2 {
        return Err(Error::Empty("probe training set needs at least two rows".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::SingleClass);
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("probe features".into()));
    }
    if !(cfg.l2 >= 0.0) {
        return Err(Error::invalid("l2", "must be nonnegative"));
    }
    let x = features.mapv(|v| v.as_f64());
    let obj = Objective {
        x: x.view(),
        y: labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect(),
        l2: cfg.l2,
        fit_bias: cfg.fit_bias,
    };
    let w = lbfgs(&obj, cfg);
    let n = features.ncols();
    let mut weight = Array2::zeros((NUM_CLASSES, n));
    for j in 0..n {
        weight[[0, j]] = T::lit(-0.5 * w[j]);
        weight[[1, j]] = T::lit(0.5 * w[j]);
    }
    let bias = cfg
        .fit_bias
        .then(|| Array1::from(vec![T::lit(-0.5 * w[n]), T::lit(0.5 * w[n])]));
    ProbeHead::new(weight, bias)
}
