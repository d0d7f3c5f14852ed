//! Independent reference implementations of metric and schedule formulas.

use std::f64::consts::PI;

use mitobench::train::OneCyclePolicy;

pub fn bits(v: u32, n: usize) -> Vec<bool> {
    (0..n).map(|i| v >> i & 1 == 1).collect()
}

/// Exact non-negative rational, kept in lowest terms.
#[derive(Clone, Copy, Debug)]
pub struct Frac(pub u128, pub u128);

pub fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 { a } else { gcd(b, a % b) }
}

impl Frac {
    pub fn new(n: u128, d: u128) -> Self {
        let g = gcd(n, d).max(1);
        Frac(n / g, d / g)
    }
    pub fn add(self, o: Frac) -> Frac {
        Frac::new(self.0 * o.1 + o.0 * self.1, self.1 * o.1)
    }
    pub fn mul(self, o: Frac) -> Frac {
        Frac::new(self.0 * o.0, self.1 * o.1)
    }
    pub fn div(self, o: Frac) -> Frac {
        Frac::new(self.0 * o.1, self.1 * o.0)
    }
    pub fn value(self) -> f64 {
        self.0 as f64 / self.1 as f64
    }
}

pub fn count(labels: &[bool], preds: &[bool], f: impl Fn(bool, bool) -> bool) -> u128 {
    labels.iter().zip(preds).filter(|(&l, &p)| f(l, p)).count() as u128
}

pub fn oracle_ba(labels: &[bool], preds: &[bool]) -> f64 {
    let sens = Frac::new(count(labels, preds, |l, p| l && p), count(labels, preds, |l, _| l));
    let spec = Frac::new(count(labels, preds, |l, p| !l && !p), count(labels, preds, |l, _| !l));
    sens.add(spec).mul(Frac(1, 2)).value()
}

/// F1 of `class` from precision and recall; 0 when the class is never
/// predicted correctly.
pub fn oracle_f1_class(labels: &[bool], preds: &[bool], class: bool) -> Frac {
    let hits = count(labels, preds, |l, p| l == class && p == class);
    if hits == 0 {
        return Frac(0, 1);
    }
    let precision = Frac::new(hits, count(labels, preds, |_, p| p == class));
    let recall = Frac::new(hits, count(labels, preds, |l, _| l == class));
    Frac(2, 1).mul(precision).mul(recall).div(precision.add(recall))
}

pub fn oracle_wf1(labels: &[bool], preds: &[bool]) -> f64 {
    let n = labels.len() as u128;
    let pos = count(labels, preds, |l, _| l);
    let weighted = Frac(pos, 1)
        .mul(oracle_f1_class(labels, preds, true))
        .add(Frac(n - pos, 1).mul(oracle_f1_class(labels, preds, false)));
    weighted.div(Frac(n, 1)).value()
}

/// Counts every positive-negative pair.
pub fn oracle_auroc(labels: &[bool], scores: &[f64]) -> f64 {
    let (mut twice_wins, mut pairs) = (0u64, 0u64);
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if labels[i] && !labels[j] {
                pairs += 1;
                twice_wins += if scores[i] > scores[j] {
                    2
                } else if scores[i] == scores[j] {
                    1
                } else {
                    0
                };
            }
        }
    }
    twice_wins as f64 / (2 * pairs) as f64
}

pub fn single_class(labels: &[bool]) -> bool {
    labels.iter().all(|&l| l) || labels.iter().all(|&l| !l)
}

/// Cosine warmup to the peak at `floor(pct * total)`, cosine anneal to the
/// final value at the last step.
pub fn oracle_lr(step: usize, total: usize, max_lr: f64, p: &OneCyclePolicy) -> f64 {
    let peak = ((p.pct_start * total as f64).floor() as usize).min(total - 1);
    let (lo, hi, end) = (max_lr / p.div_factor, max_lr, max_lr / p.final_div);
    let anneal = |a: f64, b: f64, pct: f64| b + (a - b) / 2.0 * (1.0 + (PI * pct).cos());
    if step < peak {
        if step == 0 {
            return lo;
        }
        anneal(lo, hi, step as f64 / peak as f64)
    } else if step == peak {
        hi
    } else if step == total - 1 {
        end
    } else {
        anneal(hi, end, (step - peak) as f64 / (total - 1 - peak) as f64)
    }
}
