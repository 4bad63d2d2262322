//! Evaluation metrics and seed aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::HardLabel;

fn check(predicted: &[HardLabel], truth: &[HardLabel]) -> Result<()> {
    if predicted.len() != truth.len() {
        return Err(Error::Dimension {
            expected: truth.len(),
            got: predicted.len(),
        });
    }
    Ok(())
}

/// Fraction of exact matches; 0 for an empty set.
pub fn accuracy(predicted: &[HardLabel], truth: &[HardLabel]) -> Result<f64> {
    check(predicted, truth)?;
    if truth.is_empty() {
        return Ok(0.0);
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Unweighted mean of per-class F1 over all `num_classes` classes. A class
/// with no true positives, no false positives and no false negatives scores
/// 0.
pub fn macro_f1(predicted: &[HardLabel], truth: &[HardLabel], num_classes: usize) -> Result<f64> {
    check(predicted, truth)?;
    if num_classes == 0 {
        return Err(Error::Domain("macro-F1 needs at least one class".into()));
    }
    let mut tp = vec![0usize; num_classes];
    let mut pred_count = vec![0usize; num_classes];
    let mut true_count = vec![0usize; num_classes];
    for (p, t) in predicted.iter().zip(truth) {
        if p.0 >= num_classes || t.0 >= num_classes {
            return Err(Error::Domain(format!("label outside 0..{num_classes}")));
        }
        pred_count[p.0] += 1;
        true_count[t.0] += 1;
        if p == t {
            tp[p.0] += 1;
        }
    }
    let sum: f64 = (0..num_classes)
        .map(|c| {
            let denom = pred_count[c] + true_count[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(sum / num_classes as f64)
}

/// Mean and sample standard deviation (`n − 1` denominator, 0 for a single
/// value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd {
            mean: f64::NAN,
            std: f64::NAN,
            n,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    MeanStd { mean, std, n }
}

/// Population coefficient of variation `std / mean`; 0 when the mean is 0.
pub fn coefficient_of_variation(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}
