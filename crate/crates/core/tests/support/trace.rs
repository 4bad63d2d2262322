//! Two consecutive full-mode training steps on a 2-labeled / 4-unlabeled toy,
//! checked against an independent step-through written with plain arrays.
//! Shared by the `algorithm_trace` and `acceptance` targets.

use jointmatch::augment::{AugmentSpec, Example, Featurizer, Payload, StrongSpec, WeakSpec};
use jointmatch::classifier::{Activation, Classifier, Dense, ModelId, OptimizerKind};
use jointmatch::numeric::{HardLabel, Matrix, SeededRng, Stream};
use jointmatch::trainer::{augment_unlabeled, train_step, Mode, Seeds, StepContext, TrainConfig, TrainState};

const TOL: f64 = 1e-12;

#[derive(Clone)]
struct Linear {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl Linear {
    fn probs(&self, x: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = self
            .w
            .iter()
            .zip(&self.b)
            .map(|(row, b)| row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    fn to_classifier(&self, id: ModelId) -> Classifier {
        let c = self.w.len();
        let d = self.w[0].len();
        let flat = self.w.iter().flatten().copied().collect();
        let layer = Dense {
            weights: Matrix::from_vec(c, d, flat).unwrap(),
            bias: self.b.clone(),
        };
        Classifier::from_layers(id, Activation::Identity, vec![layer]).unwrap()
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// Adds `scale · Σ_i coef_i (p_i − e_{y_i}) x_iᵀ` to the gradient accumulators.
fn accumulate(gw: &mut [Vec<f64>], gb: &mut [f64], p: &[f64], y: usize, x: &[f64], scale: f64) {
    for c in 0..p.len() {
        let r = p[c] - if c == y { 1.0 } else { 0.0 };
        for j in 0..x.len() {
            gw[c][j] += scale * r * x[j];
        }
        gb[c] += scale * r;
    }
}

struct OracleModel {
    net: Linear,
    p_tilde: Vec<f64>,
}

struct OracleStep {
    q: [Vec<Vec<f64>>; 2],
    p_tilde: [Vec<f64>; 2],
    tau: [Vec<f64>; 2],
    hard: [Vec<usize>; 2],
    conf: [Vec<f64>; 2],
    mask: [Vec<bool>; 2],
    weights: Vec<f64>,
    sup: [f64; 2],
    unsup: [f64; 2],
}

#[allow(clippy::too_many_arguments)]
fn oracle_step(
    models: &mut [OracleModel; 2],
    lab: &[(Vec<f64>, usize)],
    weak_u: &[Vec<f64>],
    strong_u: &[Vec<f64>],
    lambda: f64,
    tau: f64,
    delta: f64,
    w_u: f64,
    lr: f64,
) -> OracleStep {
    let c = models[0].net.b.len();
    let n_u = weak_u.len() as f64;
    let mut out = OracleStep {
        q: [vec![], vec![]],
        p_tilde: [vec![], vec![]],
        tau: [vec![], vec![]],
        hard: [vec![], vec![]],
        conf: [vec![], vec![]],
        mask: [vec![], vec![]],
        weights: vec![],
        sup: [0.0; 2],
        unsup: [0.0; 2],
    };
    for m in 0..2 {
        let q: Vec<Vec<f64>> = weak_u.iter().map(|u| models[m].net.probs(u)).collect();
        let mut mean = vec![0.0; c];
        for qb in &q {
            for k in 0..c {
                mean[k] += qb[k] / n_u;
            }
        }
        let p: Vec<f64> = (0..c).map(|k| lambda * models[m].p_tilde[k] + (1.0 - lambda) * mean[k]).collect();
        let pmax = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let t: Vec<f64> = p.iter().map(|v| v / pmax * tau).collect();
        let hard: Vec<usize> = q.iter().map(|qb| argmax(qb)).collect();
        let conf: Vec<f64> = q.iter().zip(&hard).map(|(qb, &h)| qb[h]).collect();
        let mask = conf.iter().zip(&hard).map(|(&cf, &h)| cf >= t[h]).collect();
        models[m].p_tilde = p.clone();
        out.q[m] = q;
        out.p_tilde[m] = p;
        out.tau[m] = t;
        out.hard[m] = hard;
        out.conf[m] = conf;
        out.mask[m] = mask;
    }
    out.weights = (0..weak_u.len())
        .map(|b| if out.hard[0][b] != out.hard[1][b] { delta } else { 1.0 - delta })
        .collect();
    let before = [models[0].net.clone(), models[1].net.clone()];
    for m in 0..2 {
        let peer = 1 - m;
        let net = &before[m];
        let d = net.w[0].len();
        let mut gw = vec![vec![0.0; d]; c];
        let mut gb = vec![0.0; c];
        let bsz = lab.len() as f64;
        for (x, y) in lab {
            let p = net.probs(x);
            out.sup[m] -= p[*y].ln() / bsz;
            accumulate(&mut gw, &mut gb, &p, *y, x, 1.0 / bsz);
        }
        for b in 0..strong_u.len() {
            if !out.mask[peer][b] {
                continue;
            }
            let target = out.hard[peer][b];
            let p = net.probs(&strong_u[b]);
            let wb = out.weights[b];
            out.unsup[m] -= wb * p[target].ln() / n_u;
            accumulate(&mut gw, &mut gb, &p, target, &strong_u[b], w_u * wb / n_u);
        }
        let next = &mut models[m].net;
        for k in 0..c {
            for j in 0..d {
                next.w[k][j] = net.w[k][j] - lr * gw[k][j];
            }
            next.b[k] = net.b[k] - lr * gb[k];
        }
    }
    out
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL
}

fn assert_vec(name: &str, got: &[f64], want: &[f64]) {
    assert_eq!(got.len(), want.len(), "{name}");
    for (g, w) in got.iter().zip(want) {
        assert!(close(*g, *w), "{name}: {got:?} vs {want:?}");
    }
}

/// Panics on the first mismatch.
pub fn check_full_mode_trace() {
    let f = Linear {
        w: vec![vec![1.5, 0.0], vec![0.0, 1.5], vec![-1.0, -1.0]],
        b: vec![0.0, 0.0, 0.0],
    };
    let g = Linear {
        w: vec![vec![1.0, 0.5], vec![0.2, 1.8], vec![-0.8, -1.2]],
        b: vec![0.0, 0.0, 0.1],
    };
    let config = TrainConfig {
        batch_size: 2,
        mu: 2,
        lambda: 0.5,
        tau: 0.7,
        delta: 0.9,
        w_u: 1.0,
        learning_rate: 0.5,
        optimizer: OptimizerKind::Sgd,
        seeds: Seeds::from_base(11),
        mode: Mode::FULL,
        ..TrainConfig::default()
    };
    let augment = AugmentSpec {
        weak: WeakSpec {
            replace_rate: 0.0,
            noise_std: 0.0,
        },
        strong: StrongSpec {
            noise_std: 0.3,
            ..StrongSpec::default()
        },
        synonyms: None,
    };
    let featurizer = Featurizer::Dense { dim: 2 };
    let lab_data = vec![(vec![1.0, 0.0], 0usize), (vec![0.0, 1.0], 1usize)];
    let unl_data = vec![vec![2.0, 0.0], vec![0.0, 2.0], vec![-1.5, -1.5], vec![0.6, 0.5]];
    let labeled: Vec<Example> = lab_data
        .iter()
        .enumerate()
        .map(|(i, (x, y))| Example::labeled(i as u64, Payload::Features(x.clone()), HardLabel(*y)))
        .collect();
    let unlabeled: Vec<Example> = unl_data
        .iter()
        .enumerate()
        .map(|(i, x)| Example::unlabeled(10 + i as u64, Payload::Features(x.clone())))
        .collect();

    let mut state =
        TrainState::from_models(&config, f.to_classifier(ModelId::F), Some(g.to_classifier(ModelId::G))).unwrap();
    let mut oracle = [
        OracleModel {
            net: f,
            p_tilde: vec![1.0 / 3.0; 3],
        },
        OracleModel {
            net: g,
            p_tilde: vec![1.0 / 3.0; 3],
        },
    ];
    let ctx = StepContext {
        config: &config,
        augment: &augment,
        featurizer: &featurizer,
    };
    let mut saw = (false, false, false, false);
    for step in 0..2u64 {
        // The strong views are an input to the algorithm; they come from the
        // documented per-step stream.
        let strong = augment_unlabeled(
            &unlabeled,
            &augment,
            &featurizer,
            &mut SeededRng::stream(config.seeds.augmentation, Stream::UnlabeledStrong, step),
            true,
        )
        .unwrap();
        let trace = train_step(&mut state, &labeled, &unlabeled, None, ctx).unwrap();
        let want = oracle_step(&mut oracle, &lab_data, &unl_data, &strong, 0.5, 0.7, 0.9, 1.0, 0.5);

        assert_vec("weights", &trace.weights, &want.weights);
        for (m, mt) in trace.models.iter().enumerate() {
            for b in 0..4 {
                assert_vec("q_b", mt.weak_preds[b].probs(), &want.q[m][b]);
                let pl = &mt.pseudo.labels[b];
                assert_eq!(pl.hard_label.0, want.hard[m][b], "hard label m={m} b={b}");
                assert!(close(pl.confidence, want.conf[m][b]));
                assert_eq!(pl.passed, want.mask[m][b], "mask m={m} b={b} step={step}");
                saw.0 |= pl.passed;
                saw.1 |= !pl.passed;
            }
            assert_vec("p_tilde", mt.status.values(), &want.p_tilde[m]);
            assert_vec("tau", mt.thresholds.values(), &want.tau[m]);
            assert!(close(mt.supervised_loss, want.sup[m]), "L_s m={m}");
            assert!(close(mt.unlabeled_loss, want.unsup[m]), "L_u m={m}: {} vs {}", mt.unlabeled_loss, want.unsup[m]);
            assert!(close(mt.total_loss, want.sup[m] + want.unsup[m]));
        }
        saw.2 |= want.weights.contains(&0.9);
        saw.3 |= want.weights.iter().any(|&w| (w - 0.1).abs() < 1e-15);
        for (ms, om) in [&state.f, state.g.as_ref().unwrap()].iter().zip(&oracle) {
            let got = ms.model.params_flat();
            let want_params: Vec<f64> = om.net.w.iter().flatten().chain(&om.net.b).copied().collect();
            assert_vec("params", &got, &want_params);
        }
    }
    assert!(saw.0 && saw.1, "toy must exercise both passing and failing pseudo-labels");
    assert!(saw.2 && saw.3, "toy must exercise both agreement and disagreement");
}
