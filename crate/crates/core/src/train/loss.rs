use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// How head output is read as a binary prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossConvention {
    /// Two logits, softmax cross-entropy.
    #[default]
    TwoLogitSoftmax,
    /// One logit `z1 - z0`, sigmoid binary cross-entropy.
    SingleLogitSigmoid,
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

fn check_labels(n: usize, labels: &[u8]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape("labels", n, labels.len()));
    }
    if n == 0 {
        return Err(Error::Empty("loss batch".into()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid("label", format!("{bad} outside {{0, 1}}")));
    }
    Ok(())
}

/// Mean negative log-likelihood of the true class and its gradient with
/// respect to the logits. Two columns are read as softmax logits, one column
/// as a sigmoid logit. Evaluated in log-space.
pub fn bce_loss_grad<T: Real>(logits: ArrayView2<T>, labels: &[u8]) -> Result<(f64, Array2<T>)> {
    check_labels(logits.nrows(), labels)?;
    let n = labels.len() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    match logits.ncols() {
        2 => {
            for (i, (row, &y)) in logits.rows().into_iter().zip(labels).enumerate() {
                let z0 = row[0].as_f64();
                let z1 = row[1].as_f64();
                let m = z0.max(z1);
                let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
                total += lse - if y == 1 { z1 } else { z0 };
                let p1 = sigmoid(z1 - z0);
                let g1 = (p1 - f64::from(y)) / n;
                grad[[i, 0]] = T::lit(-g1);
                grad[[i, 1]] = T::lit(g1);
            }
        }
        1 => {
            for (i, (&s, &y)) in logits.column(0).iter().zip(labels).enumerate() {
                let s = s.as_f64();
                total += if y == 1 { softplus(-s) } else { softplus(s) };
                grad[[i, 0]] = T::lit((sigmoid(s) - f64::from(y)) / n);
            }
        }
        c => return Err(Error::shape("logit columns", "1 or 2", c)),
    }
    Ok((total / n, grad))
}

pub fn bce_loss<T: Real>(logits: ArrayView2<T>, labels: &[u8]) -> Result<f64> {
    bce_loss_grad(logits, labels).map(|(l, _)| l)
}

/// Loss and two-logit gradient under a head convention.
pub fn head_loss_grad<T: Real>(
    logits: ArrayView2<T>,
    labels: &[u8],
    convention: LossConvention,
) -> Result<(f64, Array2<T>)> {
    match convention {
        LossConvention::TwoLogitSoftmax => bce_loss_grad(logits, labels),
        LossConvention::SingleLogitSigmoid => {
            if logits.ncols() != 2 {
                return Err(Error::shape("logit columns", 2, logits.ncols()));
            }
            let single = Array2::from_shape_fn((logits.nrows(), 1), |(i, _)| logits[[i, 1]] - logits[[i, 0]]);
            let (loss, ds) = bce_loss_grad(single.view(), labels)?;
            let grad = Array2::from_shape_fn(logits.raw_dim(), |(i, j)| if j == 1 { ds[[i, 0]] } else { -ds[[i, 0]] });
            Ok((loss, grad))
        }
    }
}
