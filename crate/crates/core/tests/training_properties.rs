//! Cross-model properties of the training step on a small synthetic task.

use jointmatch::augment::{AugmentSpec, Example};
use jointmatch::datasets::{make_synthetic, DatasetSplit, SyntheticTaskSpec};
use jointmatch::threshold::ThresholdController;
use jointmatch::trainer::{train_step, Mode, StepContext, TrainConfig, TrainState};

fn small_task() -> DatasetSplit {
    let spec = SyntheticTaskSpec {
        num_classes: 3,
        dim: 4,
        separation: vec![2.5, 2.5, 1.0],
        priors: vec![1.0; 3],
        noise_std: 1.0,
        labeled_per_class: 4,
        unlabeled: 48,
        validation: 10,
        test: 10,
    };
    make_synthetic(&spec, 5).unwrap()
}

fn config(mode: Mode) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        mu: 3,
        tau: 0.5,
        hidden: vec![6],
        mode,
        ..TrainConfig::default()
    }
}

fn batches(split: &DatasetSplit, step: usize) -> (Vec<Example>, Vec<Example>) {
    let n = split.labeled.len();
    let lab = (0..4).map(|i| split.labeled[(step * 4 + i) % n].clone()).collect();
    let m = split.unlabeled.len();
    let unl = (0..12).map(|i| split.unlabeled[(step * 12 + i) % m].clone()).collect();
    (lab, unl)
}

fn run_steps(config: &TrainConfig, split: &DatasetSplit, steps: usize) -> TrainState {
    let augment = AugmentSpec::default();
    let ctx = StepContext {
        config,
        augment: &augment,
        featurizer: &split.featurizer,
    };
    let mut state = TrainState::new(config, split.featurizer.dim(), split.num_classes).unwrap();
    for s in 0..steps {
        let (lab, unl) = batches(split, s);
        train_step(&mut state, &lab, &unl, None, ctx).unwrap();
    }
    state
}

#[test]
fn own_pseudo_label_masks_never_reach_own_loss() {
    let split = small_task();
    let cfg = config(Mode::FULL);
    let augment = AugmentSpec::default();
    let ctx = StepContext {
        config: &cfg,
        augment: &augment,
        featurizer: &split.featurizer,
    };
    let base = run_steps(&cfg, &split, 3);
    let (lab, unl) = batches(&split, 3);

    // Same parameters, but model f's own thresholds are pushed to pass
    // everything in one copy and nothing in the other.
    let mut lenient = base.clone();
    lenient.f.controller = ThresholdController::new(3, 1e-9, cfg.lambda, false).unwrap();
    let mut strict = base.clone();
    strict.f.controller = ThresholdController::new(3, 1.0, cfg.lambda, false).unwrap();
    let a = train_step(&mut lenient, &lab, &unl, None, ctx).unwrap();
    let b = train_step(&mut strict, &lab, &unl, None, ctx).unwrap();
    assert_ne!(a.models[0].pseudo, b.models[0].pseudo);
    assert_eq!(a.models[0].unlabeled_loss, b.models[0].unlabeled_loss);
    assert_eq!(lenient.f.model, strict.f.model);
    // Model g does consume f's masks.
    assert_ne!(a.models[1].unlabeled_loss, b.models[1].unlabeled_loss);
}

#[test]
fn loss_contributions_respect_source_thresholds() {
    let split = small_task();
    let cfg = config(Mode::FULL);
    let augment = AugmentSpec::default();
    let ctx = StepContext {
        config: &cfg,
        augment: &augment,
        featurizer: &split.featurizer,
    };
    let mut state = run_steps(&cfg, &split, 2);
    for s in 2..8 {
        let (lab, unl) = batches(&split, s);
        let trace = train_step(&mut state, &lab, &unl, None, ctx).unwrap();
        for mt in &trace.models {
            for (pl, q) in mt.pseudo.labels.iter().zip(&mt.weak_preds) {
                assert_eq!(pl.hard_label, q.argmax());
                assert_eq!(pl.passed, pl.confidence >= mt.thresholds.get(pl.hard_label.0));
            }
        }
    }
}

#[test]
fn half_delta_matches_unweighted_with_half_unlabeled_weight() {
    let split = small_task();
    let weighted = TrainConfig {
        delta: 0.5,
        ..config(Mode::FULL)
    };
    let unweighted = TrainConfig {
        w_u: weighted.w_u * 0.5,
        ..config(Mode::NO_DISAGREE)
    };
    let a = run_steps(&weighted, &split, 15);
    let b = run_steps(&unweighted, &split, 15);
    for (x, y) in [(&a.f, &b.f), (a.g.as_ref().unwrap(), b.g.as_ref().unwrap())] {
        for (p, q) in x.model.params_flat().iter().zip(y.model.params_flat()) {
            assert!((p - q).abs() <= 1e-12, "{p} vs {q}");
        }
    }
}

#[test]
fn fixmatch_mode_runs_one_model_without_peer_access() {
    let split = small_task();
    let state = run_steps(&config(Mode::FIXMATCH), &split, 10);
    assert!(state.g.is_none());
    assert_eq!(state.peer_reads(), 0);
    for mode in [Mode::FULL, Mode::NO_ADAPTIVE, Mode::NO_CROSS, Mode::NO_DISAGREE] {
        let s = run_steps(&config(mode), &split, 2);
        assert!(s.g.is_some(), "{mode}");
        assert!(s.peer_reads() > 0, "{mode}");
    }
}

#[test]
fn training_is_bit_reproducible() {
    let split = small_task();
    let cfg = config(Mode::FULL);
    let a = run_steps(&cfg, &split, 20);
    let b = run_steps(&cfg, &split, 20);
    assert_eq!(a.f.model, b.f.model);
    assert_eq!(a.g.as_ref().unwrap().model, b.g.as_ref().unwrap().model);
    assert_eq!(a.f.controller, b.f.controller);
}

#[test]
fn zero_ema_decay_tracks_the_last_batch_mean() {
    let split = small_task();
    let cfg = TrainConfig {
        lambda: 0.0,
        ..config(Mode::FULL)
    };
    let augment = AugmentSpec::default();
    let ctx = StepContext {
        config: &cfg,
        augment: &augment,
        featurizer: &split.featurizer,
    };
    let mut state = run_steps(&cfg, &split, 3);
    let (lab, unl) = batches(&split, 3);
    let trace = train_step(&mut state, &lab, &unl, None, ctx).unwrap();
    for mt in &trace.models {
        let n = mt.weak_preds.len() as f64;
        for c in 0..3 {
            let mean: f64 = mt.weak_preds.iter().map(|q| q.get(c)).sum::<f64>() / n;
            assert!((mt.status.values()[c] - mean).abs() < 1e-15);
        }
    }
}
