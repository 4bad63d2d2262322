//! Classwise learning-status tracking and confidence thresholds.
//!
//! Each model keeps an exponential moving average of its mean predicted class
//! distribution on weakly augmented unlabeled data. Rescaling that estimate so
//! its largest entry is one and multiplying by the base threshold gives a
//! per-class cutoff: classes the model currently predicts less often get a
//! lower bar.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{ProbDist, SIMPLEX_TOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningStatus {
    p_tilde: Vec<f64>,
    step: u64,
}

impl LearningStatus {
    /// Uniform status at step zero.
    pub fn new(num_classes: usize) -> Self {
        assert!(num_classes >= 2, "need at least two classes");
        LearningStatus {
            p_tilde: vec![1.0 / num_classes as f64; num_classes],
            step: 0,
        }
    }

    /// Builds a status from explicit values; they must lie on the simplex.
    pub fn from_values(p_tilde: Vec<f64>, step: u64) -> Result<Self> {
        ProbDist::new(p_tilde.clone())?;
        Ok(LearningStatus { p_tilde, step })
    }

    pub fn values(&self) -> &[f64] {
        &self.p_tilde
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_classes(&self) -> usize {
        self.p_tilde.len()
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::Domain(format!("EMA decay must lie in [0, 1), got {lambda}")));
    }
    Ok(())
}

/// `p̃_t = λ p̃_{t-1} + (1 − λ) · mean(batch_preds)`.
///
/// An empty batch leaves the status untouched (no step is counted).
pub fn update_status(status: &LearningStatus, batch_preds: &[ProbDist], lambda: f64) -> Result<LearningStatus> {
    check_lambda(lambda)?;
    if batch_preds.is_empty() {
        log::debug!("empty unlabeled batch at step {}; status not updated", status.step);
        return Ok(status.clone());
    }
    let c = status.num_classes();
    let mut mean = vec![0.0; c];
    for pred in batch_preds {
        if pred.num_classes() != c {
            return Err(Error::Dimension {
                expected: c,
                got: pred.num_classes(),
            });
        }
        for (m, p) in mean.iter_mut().zip(pred.probs()) {
            *m += p;
        }
    }
    let n = batch_preds.len() as f64;
    let p_tilde = status
        .p_tilde
        .iter()
        .zip(&mean)
        .map(|(old, m)| lambda * old + (1.0 - lambda) * (m / n))
        .collect();
    Ok(LearningStatus {
        p_tilde,
        step: status.step + 1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdVector {
    tau_local: Vec<f64>,
    base_tau: f64,
}

impl ThresholdVector {
    pub fn values(&self) -> &[f64] {
        &self.tau_local
    }

    pub fn get(&self, class: usize) -> f64 {
        self.tau_local[class]
    }

    pub fn base_tau(&self) -> f64 {
        self.base_tau
    }

    pub fn num_classes(&self) -> usize {
        self.tau_local.len()
    }
}

fn check_tau(base_tau: f64) -> Result<()> {
    if !(base_tau > 0.0 && base_tau <= 1.0) {
        return Err(Error::Domain(format!("base threshold must lie in (0, 1], got {base_tau}")));
    }
    Ok(())
}

/// `τ_t(c) = p̃_t(c) / max_c p̃_t(c) · τ`.
pub fn local_thresholds(status: &LearningStatus, base_tau: f64) -> Result<ThresholdVector> {
    check_tau(base_tau)?;
    let max = status.p_tilde.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::Domain("learning status has no positive entry".into()));
    }
    Ok(ThresholdVector {
        tau_local: max_norm(&status.p_tilde, max, base_tau),
        base_tau,
    })
}

fn max_norm(values: &[f64], max: f64, base_tau: f64) -> Vec<f64> {
    values.iter().map(|p| p / max * base_tau).collect()
}

/// Every class at the base threshold.
pub fn fixed_thresholds(num_classes: usize, base_tau: f64) -> Result<ThresholdVector> {
    check_tau(base_tau)?;
    if num_classes < 2 {
        return Err(Error::Domain("need at least two classes".into()));
    }
    Ok(ThresholdVector {
        tau_local: vec![base_tau; num_classes],
        base_tau,
    })
}

/// Per-model controller: learning status plus the threshold rule in force.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdController {
    status: LearningStatus,
    adaptive: bool,
    base_tau: f64,
    lambda: f64,
}

impl ThresholdController {
    pub fn new(num_classes: usize, base_tau: f64, lambda: f64, adaptive: bool) -> Result<Self> {
        check_tau(base_tau)?;
        check_lambda(lambda)?;
        Ok(ThresholdController {
            status: LearningStatus::new(num_classes),
            adaptive,
            base_tau,
            lambda,
        })
    }

    pub fn status(&self) -> &LearningStatus {
        &self.status
    }

    pub fn is_adaptive(&self) -> bool {
        self.adaptive
    }

    /// Folds a batch of weak-view predictions into the status estimate. The
    /// status is tracked in fixed mode too so telemetry stays comparable.
    pub fn observe(&mut self, batch_preds: &[ProbDist]) -> Result<()> {
        self.status = update_status(&self.status, batch_preds, self.lambda)?;
        debug_assert!((self.status.p_tilde.iter().sum::<f64>() - 1.0).abs() < SIMPLEX_TOL);
        Ok(())
    }

    pub fn thresholds(&self) -> Result<ThresholdVector> {
        if self.adaptive {
            local_thresholds(&self.status, self.base_tau)
        } else {
            fixed_thresholds(self.status.num_classes(), self.base_tau)
        }
    }
}
