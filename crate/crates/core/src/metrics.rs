//! Binary classification metrics: balanced accuracy, support-weighted F1
//! and AUROC. The positive class is the mitotic figure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metric triple for one evaluation, plus the counts and threshold used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub n_pos: usize,
    pub n_neg: usize,
    pub balanced_accuracy: f64,
    pub weighted_f1: f64,
    /// `None` when the evaluated set holds a single class.
    pub auroc: Option<f64>,
    pub threshold: f64,
    #[serde(default)]
    pub single_class: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Confusion {
    tp: usize,
    fp: usize,
    tn: usize,
    fn_: usize,
}

impl Confusion {
    fn from_pairs(labels: &[bool], predictions: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&label, &pred) in labels.iter().zip(predictions) {
            match (label, pred) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        c
    }

    fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    fn negatives(&self) -> usize {
        self.tn + self.fp
    }
}

fn check_lengths(labels: usize, other: usize) -> Result<()> {
    if labels != other {
        return Err(Error::shape("metric inputs", labels, other));
    }
    if labels == 0 {
        return Err(Error::Empty("metric inputs".into()));
    }
    Ok(())
}

fn require_both_classes(labels: &[bool]) -> Result<()> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::SingleClass);
    }
    Ok(())
}

/// Mean of the per-class recalls over classes present in `labels`,
/// evaluated as one integer ratio so the result is correctly rounded.
fn balanced_accuracy_present(c: &Confusion) -> f64 {
    let (p, n) = (c.positives() as u128, c.negatives() as u128);
    match (p, n) {
        (0, 0) => f64::NAN,
        (0, _) => c.tn as f64 / n as f64,
        (_, 0) => c.tp as f64 / p as f64,
        _ => (c.tp as u128 * n + c.tn as u128 * p) as f64 / (2 * p * n) as f64,
    }
}

/// F1 of one class as `(numerator, denominator)`; 0/1 without true positives.
fn f1(tp: usize, fp: usize, fn_: usize) -> (u128, u128) {
    if tp == 0 {
        (0, 1)
    } else {
        (2 * tp as u128, (2 * tp + fp + fn_) as u128)
    }
}

/// Support-weighted F1 as a single ratio of integers.
fn weighted_f1_of(c: &Confusion) -> f64 {
    let n = (c.positives() + c.negatives()) as u128;
    let (a, b) = f1(c.tp, c.fp, c.fn_);
    let (d, e) = f1(c.tn, c.fn_, c.fp);
    let num = c.positives() as u128 * a * e + c.negatives() as u128 * d * b;
    (num as f64) / ((b * e * n) as f64)
}

/// (sensitivity + specificity) / 2.
pub fn balanced_accuracy(labels: &[bool], predictions: &[bool]) -> Result<f64> {
    check_lengths(labels.len(), predictions.len())?;
    require_both_classes(labels)?;
    Ok(balanced_accuracy_present(&Confusion::from_pairs(
        labels,
        predictions,
    )))
}

/// Support-weighted mean of per-class F1, each class taken as its own
/// positive. A class with no true positives scores 0.
pub fn weighted_f1(labels: &[bool], predictions: &[bool]) -> Result<f64> {
    check_lengths(labels.len(), predictions.len())?;
    require_both_classes(labels)?;
    Ok(weighted_f1_of(&Confusion::from_pairs(labels, predictions)))
}

/// Probability that a random positive scores above a random negative, ties
/// counted one half. Computed from mid-ranks in O(n log n).
pub fn auroc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    check_lengths(labels.len(), scores.len())?;
    require_both_classes(labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of (doubled) mid-ranks of the positives keeps everything integral.
    let mut pos_rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1, doubled mid-rank = i + j + 2
        let mid2 = (i + j + 2) as u128;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        pos_rank_sum2 += mid2 * tied_pos;
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    // U = R_pos - n_pos (n_pos + 1) / 2, doubled.
    let u2 = pos_rank_sum2 - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// Thresholds positive-class scores (`score > threshold` is positive) and
/// computes all three metrics. Single-class inputs are scored on the
/// classes present and flagged; AUROC is omitted for them.
pub fn evaluate_scores(labels: &[bool], scores: &[f64], threshold: f64) -> Result<EvalResult> {
    check_lengths(labels.len(), scores.len())?;
    let predictions: Vec<bool> = scores.iter().map(|&s| s > threshold).collect();
    let c = Confusion::from_pairs(labels, &predictions);
    let single_class = c.positives() == 0 || c.negatives() == 0;
    let auroc = if single_class {
        None
    } else {
        Some(auroc(labels, scores)?)
    };
    Ok(EvalResult {
        n_pos: c.positives(),
        n_neg: c.negatives(),
        balanced_accuracy: balanced_accuracy_present(&c),
        weighted_f1: weighted_f1_of(&c),
        auroc,
        threshold,
        single_class,
    })
}

/// Scores annotated test records with `model` (positive-class softmax
/// probability, no augmentation) and computes the metric triple.
///
/// Records produced by random-patch sampling are rejected, as are empty
/// test sets.
pub fn evaluate<T: crate::Real>(
    model: &crate::adapt::AdaptedModel<T>,
    store: &dyn crate::ingest::TileReader,
    records: &[&crate::ingest::AnnotationRecord],
    patch: &crate::ingest::PatchSpec,
    threshold: f64,
    batch_size: usize,
    cache: Option<&mut crate::train::FeatureCache>,
) -> Result<EvalResult> {
    if records.is_empty() {
        return Err(Error::Empty("test set".into()));
    }
    if let Some(r) = records.iter().find(|r| r.annotation_id.starts_with("random:")) {
        return Err(Error::invalid(
            "test records",
            format!("`{}` is a synthetic random patch; only annotations are evaluated", r.annotation_id),
        ));
    }
    let logits = crate::train::predict_logits(model, store, records, patch, batch_size, cache)?;
    let scores = crate::adapt::positive_probabilities(logits.view());
    let labels: Vec<bool> = records.iter().map(|r| r.label.is_positive()).collect();
    evaluate_scores(&labels, &scores, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    const L: [bool; 4] = [true, true, false, false];

    #[test]
    fn balanced_accuracy_examples() {
        assert_eq!(balanced_accuracy(&L, &L).unwrap(), 1.0);
        assert_eq!(
            balanced_accuracy(&L, &[true, false, false, false]).unwrap(),
            0.75
        );
        assert_eq!(balanced_accuracy(&L, &[true; 4]).unwrap(), 0.5);
        assert_eq!(balanced_accuracy(&L, &[false; 4]).unwrap(), 0.5);
    }

    #[test]
    fn weighted_f1_examples() {
        assert_eq!(weighted_f1(&L, &L).unwrap(), 1.0);
        let v = weighted_f1(&L, &[true, false, false, false]).unwrap();
        assert!((v - (0.5 * 2.0 / 3.0 + 0.5 * 0.8)).abs() < 1e-15);
        let v = weighted_f1(&[true, false, false, false], &[false; 4]).unwrap();
        assert!((v - 0.75 * 6.0 / 7.0).abs() < 1e-15);
        assert!((v - 0.6429).abs() < 1e-4);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&L, &[0.9, 0.4, 0.6, 0.1]).unwrap(), 0.75);
        assert_eq!(auroc(&L, &[1.0, 1.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(auroc(&L, &[0.3; 4]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(matches!(
            balanced_accuracy(&[true, true], &[true, false]),
            Err(Error::SingleClass)
        ));
        assert!(matches!(weighted_f1(&[false], &[false]), Err(Error::SingleClass)));
        assert!(matches!(auroc(&[true, true], &[0.1, 0.2]), Err(Error::SingleClass)));
    }

    #[test]
    fn evaluate_flags_single_class() {
        let r = evaluate_scores(&[true, true], &[0.9, 0.2], 0.5).unwrap();
        assert!(r.single_class);
        assert_eq!(r.auroc, None);
        assert_eq!(r.balanced_accuracy, 0.5);
        assert!(evaluate_scores(&[], &[], 0.5).is_err());
    }

    #[test]
    fn evaluate_oracle_and_inverted() {
        let labels = [true, false, true, false, false, true];
        let perfect: Vec<f64> = labels.iter().map(|&l| if l { 0.9 } else { 0.1 }).collect();
        let r = evaluate_scores(&labels, &perfect, 0.5).unwrap();
        assert_eq!((r.balanced_accuracy, r.weighted_f1, r.auroc), (1.0, 1.0, Some(1.0)));
        let inverted: Vec<f64> = perfect.iter().map(|s| 1.0 - s).collect();
        assert_eq!(evaluate_scores(&labels, &inverted, 0.5).unwrap().auroc, Some(0.0));

        let mut dl = labels.to_vec();
        dl.extend_from_slice(&labels);
        let mut ds = perfect.clone();
        ds.extend_from_slice(&perfect);
        let d = evaluate_scores(&dl, &ds, 0.5).unwrap();
        assert_eq!(d.balanced_accuracy, r.balanced_accuracy);
        assert_eq!(d.auroc, r.auroc);
    }
}
