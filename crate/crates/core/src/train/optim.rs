use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::adapt::AdaptedModel;
use crate::backbone::Grads;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moments keyed by parameter path.
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    cfg: AdamConfig,
    step: i32,
    moments: BTreeMap<String, (ArrayD<T>, ArrayD<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update to every trainable tensor that has a gradient.
    pub fn step(&mut self, model: &mut AdaptedModel<T>, grads: &Grads<T>, lr: f64) {
        self.step += 1;
        let b1 = T::lit(self.cfg.beta1);
        let b2 = T::lit(self.cfg.beta2);
        let eps = T::lit(self.cfg.eps);
        let c1 = T::one() - T::lit(self.cfg.beta1.powi(self.step));
        let c2 = T::one() - T::lit(self.cfg.beta2.powi(self.step));
        let lr = T::lit(lr);
        let moments = &mut self.moments;
        model.visit_trainable_mut(&mut |name, mut param| {
            let Some(g) = grads.get(name) else { return };
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (ArrayD::zeros(g.raw_dim()), ArrayD::zeros(g.raw_dim())));
            Zip::from(&mut param).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        });
    }
}
