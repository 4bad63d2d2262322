//! Semi-supervised classification with two cross-labeling networks.
//!
//! The crate trains a pair of differently initialized classifiers on a small
//! labeled set plus an unlabeled pool. Each network selects confident
//! predictions on weakly augmented inputs as pseudo-labels using per-class
//! thresholds derived from its own learning status, and those pseudo-labels
//! supervise the *other* network on strongly augmented views. Examples on
//! which the two networks disagree are weighted more heavily than those on
//! which they agree.
//!
//! Modules, bottom-up:
//!
//! - [`numeric`]: probability vectors, softmax, cross-entropy, seeded streams.
//! - [`classifier`]: feed-forward softmax classifier and optimizers.
//! - [`augment`]: weak / strong augmentation and text featurization.
//! - [`threshold`]: learning-status EMA and classwise thresholds.
//! - [`trainer`]: the two-network training step and its ablation modes.
//! - [`datasets`]: corpus loading, few-shot splits, synthetic tasks.
//! - [`harness`]: configuration, runs, ablations, sweeps and reports.

pub mod augment;
pub mod classifier;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod numeric;
pub mod threshold;
pub mod trainer;

pub use error::{Error, Result};
