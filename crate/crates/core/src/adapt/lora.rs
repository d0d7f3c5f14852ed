use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::backbone::Linear;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::seed::Rng;

/// Projection inside a transformer block that may carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LoraTarget {
    QProj,
    KProj,
    VProj,
    OProj,
    MlpFc1,
    MlpFc2,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 6] = [
        LoraTarget::QProj,
        LoraTarget::KProj,
        LoraTarget::VProj,
        LoraTarget::OProj,
        LoraTarget::MlpFc1,
        LoraTarget::MlpFc2,
    ];

    /// Path of the projection relative to its block.
    pub fn path(self) -> &'static str {
        match self {
            LoraTarget::QProj => "attn.q",
            LoraTarget::KProj => "attn.k",
            LoraTarget::VProj => "attn.v",
            LoraTarget::OProj => "attn.o",
            LoraTarget::MlpFc1 => "mlp.fc1",
            LoraTarget::MlpFc2 => "mlp.fc2",
        }
    }

    pub fn is_attention(self) -> bool {
        !matches!(self, LoraTarget::MlpFc1 | LoraTarget::MlpFc2)
    }

    /// `(out, in)` of the targeted weight for a given block geometry.
    pub fn weight_shape(self, width: usize, mlp_dim: usize) -> (usize, usize) {
        match self {
            LoraTarget::MlpFc1 => (mlp_dim, width),
            LoraTarget::MlpFc2 => (width, mlp_dim),
            _ => (width, width),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub targets: Vec<LoraTarget>,
    pub seed: u64,
    /// Overrides the adapter scale; otherwise `alpha / rank`.
    pub gamma: Option<f64>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 16,
            alpha: 16.0,
            dropout_p: 0.1,
            targets: LoraTarget::ALL.to_vec(),
            seed: 0,
            gamma: None,
        }
    }
}

impl LoraConfig {
    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or(self.alpha / self.rank as f64)
    }

    pub fn validate(&self, width: usize, mlp_dim: usize) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::invalid("rank", "must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid("dropout_p", "must lie in [0, 1)"));
        }
        if self.targets.is_empty() {
            return Err(Error::invalid("targets", "must be nonempty"));
        }
        if let Some(g) = self.gamma {
            if !g.is_finite() {
                return Err(Error::invalid("gamma", "must be finite"));
            }
        }
        for &t in &self.targets {
            let (m, n) = t.weight_shape(width, mlp_dim);
            if self.rank > m.min(n) {
                return Err(Error::invalid(
                    "rank",
                    format!("{} exceeds min dimension of {:?} weight {m}x{n}", self.rank, t),
                ));
            }
        }
        Ok(())
    }

    /// Closed-form trainable adapter count: `depth * sum_t r (in_t + out_t)`.
    pub fn adapter_param_count(&self, depth: usize, width: usize, mlp_dim: usize) -> usize {
        let mut targets = self.targets.clone();
        targets.sort();
        targets.dedup();
        depth
            * targets
                .iter()
                .map(|t| {
                    let (m, n) = t.weight_shape(width, mlp_dim);
                    self.rank * (m + n)
                })
                .sum::<usize>()
    }
}

/// Low-rank factors `A` (`r x in`) and `B` (`out x r`) with scale `gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer<T: Real> {
    pub a: Array2<T>,
    pub b: Array2<T>,
    pub gamma: T,
    pub dropout_p: f64,
}

impl<T: Real> LoraLayer<T> {
    /// `A` uniform in `±1/sqrt(in)`, `B` zero.
    pub fn new(rng: &mut Rng, out_dim: usize, in_dim: usize, rank: usize, gamma: f64, dropout_p: f64) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        LoraLayer {
            a: crate::backbone::layers::uniform_matrix(rng, rank, in_dim, bound),
            b: Array2::zeros((out_dim, rank)),
            gamma: T::lit(gamma),
            dropout_p,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    /// `gamma * B A`.
    pub fn delta(&self) -> Array2<T> {
        self.b.dot(&self.a) * self.gamma
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// `h = W x + b + gamma * B A drop(x)` over row vectors. Dropout is active
/// only when `train_rng` is given.
pub fn lora_forward<T: Real>(layer: &Linear<T>, x: ArrayView2<T>, train_rng: Option<&mut Rng>) -> Result<Array2<T>> {
    if x.ncols() != layer.in_dim() {
        return Err(Error::shape("lora input", layer.in_dim(), x.ncols()));
    }
    Ok(layer.forward(x, train_rng).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    fn wrapped(w: Array2<f64>, a: Array2<f64>, b: Array2<f64>, gamma: f64) -> Linear<f64> {
        let out = w.nrows();
        let mut l = Linear::new(w, Array1::zeros(out));
        l.adapter = Some(LoraLayer { a, b, gamma, dropout_p: 0.0 });
        l
    }

    #[test]
    fn hand_computed_example() {
        let l = wrapped(Array2::eye(2), Array2::eye(2), array![[1.0, 0.0], [0.0, 0.0]], 1.0);
        let h = lora_forward(&l, array![[3.0, 5.0]].view(), None).unwrap();
        assert_eq!(h, array![[6.0, 5.0]]);
    }

    #[test]
    fn zero_b_and_zero_gamma_are_identity() {
        let mut rng = crate::seed::rng_from(1, &[]);
        let w = array![[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]];
        let x = array![[1.0, 2.0, 3.0], [-1.0, 0.5, 4.0]];
        let base = w.dot(&x.t()).t().to_owned();
        let mut l = Linear::new(w.clone(), Array1::zeros(2));
        l.adapter = Some(LoraLayer::new(&mut rng, 2, 3, 2, 1.0, 0.0));
        assert_eq!(lora_forward(&l, x.view(), None).unwrap(), base);

        let l = wrapped(w, array![[1.0, 2.0, 3.0]], array![[4.0], [5.0]], 0.0);
        assert_eq!(lora_forward(&l, x.view(), None).unwrap(), base);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let l = wrapped(Array2::eye(2), Array2::eye(2), Array2::zeros((2, 2)), 1.0);
        assert!(lora_forward(&l, array![[1.0, 2.0, 3.0]].view(), None).is_err());
    }

    #[test]
    fn dropout_only_touches_adapter_branch() {
        let mut rng = crate::seed::rng_from(3, &[]);
        let mut l = wrapped(Array2::eye(4), Array2::eye(4), Array2::zeros((4, 4)), 1.0);
        l.adapter.as_mut().unwrap().dropout_p = 0.5;
        let x = array![[1.0, 2.0, 3.0, 4.0]];
        // B = 0: the frozen path is untouched by dropout.
        assert_eq!(lora_forward(&l, x.view(), Some(&mut rng)).unwrap(), x);
    }

    #[test]
    fn config_validation() {
        let mut c = LoraConfig::default();
        assert_eq!(c.gamma(), 1.0);
        c.validate(32, 64).unwrap();
        assert!(c.validate(8, 64).is_err());
        c.rank = 2;
        c.validate(32, 64).unwrap();
        c.rank = 33;
        assert!(c.validate(32, 64).is_err());
        c.rank = 2;
        c.targets.clear();
        assert!(c.validate(32, 64).is_err());
    }
}
