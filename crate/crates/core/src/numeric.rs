//! Numerical substrate shared by every other module: probability vectors,
//! softmax / cross-entropy, a small row-major matrix, seeded random streams
//! and a central-difference gradient checker.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the sum of a probability vector.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Floor applied to the target probability before taking its log.
pub const LOG_CLAMP: f64 = 1e-12;

/// A class index in `[0, C)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HardLabel(pub usize);

impl HardLabel {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A point on the `C`-class probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    /// Validates `probs` against the simplex invariants.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::Domain(format!(
                "a distribution needs at least 2 classes, got {}",
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Domain(format!("probabilities sum to {sum}")));
        }
        Ok(ProbDist(probs))
    }

    pub fn uniform(num_classes: usize) -> Self {
        ProbDist(vec![1.0 / num_classes as f64; num_classes])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    /// Most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> HardLabel {
        HardLabel(argmax(&self.0))
    }

    /// Probability of the argmax class.
    pub fn confidence(&self) -> f64 {
        self.0[argmax(&self.0)]
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Max-subtracted softmax. Rejects non-finite logits and fewer than two classes.
pub fn softmax(logits: &[f64]) -> Result<ProbDist> {
    if logits.len() < 2 {
        return Err(Error::Domain(format!(
            "softmax needs at least 2 logits, got {}",
            logits.len()
        )));
    }
    if let Some(z) = logits.iter().find(|z| !z.is_finite()) {
        return Err(Error::Domain(format!("non-finite logit {z}")));
    }
    Ok(ProbDist(softmax_unchecked(logits)))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// `-ln pred[target]` with the probability clamped to [`LOG_CLAMP`].
pub fn cross_entropy(target: HardLabel, pred: &ProbDist) -> f64 {
    -pred.get(target.0).max(LOG_CLAMP).ln()
}

/// Central-difference estimate of the gradient of `f` at `theta`.
pub fn finite_diff_gradient<F>(mut f: F, theta: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&probe);
        probe[i] = orig - eps;
        let down = f(&probe);
        probe[i] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    grad
}

/// Relative error used for gradient checks: `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · y`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += yr * w;
            }
        }
        out
    }

    /// `self += scale · a bᵀ`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            let s = scale * ar;
            if s == 0.0 {
                continue;
            }
            for (m, bc) in self.row_mut(r).iter_mut().zip(b) {
                *m += s * bc;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Named random streams. Each consumer owns one so that, e.g., changing how
/// many strong-augmentation draws happen never shifts model initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Stream {
    ModelInit = 1,
    LabeledWeak = 2,
    UnlabeledWeak = 3,
    UnlabeledStrong = 4,
    Batches = 5,
    Split = 6,
    Synthetic = 7,
}

/// Portable seeded generator (ChaCha8).
///
/// Stream splitting: the 64-bit ChaCha stream id is `tag | index << 8`, where
/// `tag` is the [`Stream`] discriminant and `index` a caller-chosen counter
/// (the training step, for per-step augmentation streams). Identical
/// `(seed, stream, index)` triples give identical sequences on every platform.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn stream(seed: u64, stream: Stream, index: u64) -> Self {
        assert!(index < (1 << 56), "stream index out of range");
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream as u64 | (index << 8));
        SeededRng { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw in `[0, 1)` from the top 53 bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// SplitMix64 finalizer, used to derive sub-seeds and hash buckets.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
