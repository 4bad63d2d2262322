//! Exit-gate checks. Prints one line per criterion and exits non-zero if any
//! of them fails.

#[path = "support/trace.rs"]
mod trace;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use jointmatch::classifier::{Activation, Classifier, ModelId};
use jointmatch::harness::metrics::macro_f1;
use jointmatch::harness::{ablate, run, sweep, AblationResult, ExperimentConfig, SweepParam, SweepResult, SweepSpec};
use jointmatch::numeric::{finite_diff_gradient, relative_error, HardLabel, ProbDist, SeededRng};
use jointmatch::threshold::{local_thresholds, update_status, LearningStatus, fixed_thresholds};
use jointmatch::trainer::{select_pseudo_labels, supervised_loss, unlabeled_loss, Mode};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const GRADIENT_CONFIGS: usize = 24;
const GRADIENT_TOL: f64 = 1e-4;
const EXACT_TOL: f64 = 1e-12;
const RANDOM_STATUSES: usize = 10_000;
const F1_SETS: usize = 1_000;
const MIN_BALANCED_SEEDS: usize = 4;
const MIN_PRECISION_GAP: f64 = 0.05;

type Outcome = Result<String, String>;

fn task_config() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/biased_synthetic.conf");
    ExperimentConfig::load(&path).expect("bundled biased task config")
}

fn random_vec(rng: &mut SeededRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.normal()).collect()
}

fn random_dist(rng: &mut SeededRng, c: usize) -> ProbDist {
    let raw: Vec<f64> = (0..c).map(|_| rng.uniform() + 1e-3).collect();
    let sum: f64 = raw.iter().sum();
    ProbDist::new(raw.iter().map(|v| v / sum).collect()).unwrap()
}

fn compare(what: &str, analytic: &[f64], numeric: &[f64]) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        let e = relative_error(*a, *n, 1e-6);
        if !(e < GRADIENT_TOL) {
            return Err(format!("{what}: analytic {a} vs numeric {n} (rel err {e:.2e})"));
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

fn gradient_correctness() -> Outcome {
    let mut rng = SeededRng::new(2024);
    let mut worst = 0.0f64;
    for trial in 0..GRADIENT_CONFIGS {
        let d_in = 1 + rng.below(8);
        let c = 2 + rng.below(4);
        let hidden = rng.below(7);
        let activation = if rng.below(2) == 0 { Activation::Tanh } else { Activation::Identity };
        let sizes = if hidden == 0 { vec![d_in, c] } else { vec![d_in, hidden, c] };
        let model = Classifier::init(&sizes, activation, ModelId::F, trial as u64).unwrap();
        let peer = Classifier::init(&sizes, activation, ModelId::G, 1000 + trial as u64).unwrap();

        let b = 1 + rng.below(4);
        let mu = 1 + rng.below(3);
        let labeled: Vec<(Vec<f64>, HardLabel)> = (0..b)
            .map(|_| (random_vec(&mut rng, d_in, 1.0), HardLabel(rng.below(c))))
            .collect();
        let weak: Vec<Vec<f64>> = (0..b * mu).map(|_| random_vec(&mut rng, d_in, 1.0)).collect();
        let strong: Vec<Vec<f64>> = weak
            .iter()
            .map(|x| x.iter().map(|v| v + 0.5 * rng.normal()).collect())
            .collect();
        let peer_preds: Vec<ProbDist> = weak.iter().map(|x| peer.forward(x).unwrap()).collect();
        let cut = 1.0 / c as f64 + rng.uniform() * (1.0 - 1.0 / c as f64) * 0.5;
        let pseudo = select_pseudo_labels(ModelId::G, &peer_preds, &fixed_thresholds(c, cut).unwrap());
        let delta = rng.uniform();
        let weights: Vec<f64> = (0..weak.len())
            .map(|_| if rng.below(2) == 0 { delta } else { 1.0 - delta })
            .collect();
        let w_u = 0.5 + 2.0 * rng.uniform();

        let theta = model.params_flat();
        let mut probe = model.clone();
        let mut eval = |t: &[f64], part: u8| {
            probe.set_params_flat(t).unwrap();
            let ls = supervised_loss(&probe, &labeled).unwrap().0;
            let lu = unlabeled_loss(&probe, &pseudo, &strong, &weights, true).unwrap().0;
            match part {
                0 => ls,
                1 => lu,
                _ => ls + w_u * lu,
            }
        };
        let (_, gs) = supervised_loss(&model, &labeled).map_err(|e| e.to_string())?;
        let (_, gu) = unlabeled_loss(&model, &pseudo, &strong, &weights, true).map_err(|e| e.to_string())?;
        let mut combined = gs.clone();
        combined.add_scaled(&gu, w_u).map_err(|e| e.to_string())?;

        let ns = finite_diff_gradient(|t| eval(t, 0), &theta, 1e-5);
        let nu = finite_diff_gradient(|t| eval(t, 1), &theta, 1e-5);
        let nc = finite_diff_gradient(|t| eval(t, 2), &theta, 1e-5);
        worst = worst.max(compare(&format!("config {trial} supervised"), &gs.flat(), &ns)?);
        worst = worst.max(compare(&format!("config {trial} unlabeled"), &gu.flat(), &nu)?);
        worst = worst.max(compare(&format!("config {trial} combined"), &combined.flat(), &nc)?);
    }
    Ok(format!("{GRADIENT_CONFIGS} configs, worst relative error {worst:.2e}"))
}

fn threshold_exactness() -> Outcome {
    let uniform = LearningStatus::new(4);
    let batch = [
        ProbDist::new(vec![0.6, 0.1, 0.1, 0.2]).unwrap(),
        ProbDist::new(vec![0.2, 0.3, 0.3, 0.2]).unwrap(),
    ];
    let s1 = update_status(&uniform, &batch, 0.9).map_err(|e| e.to_string())?;
    for (got, want) in s1.values().iter().zip([0.265, 0.245, 0.245, 0.245]) {
        if (got - want).abs() > EXACT_TOL {
            return Err(format!("status {:?}", s1.values()));
        }
    }
    let zero = update_status(&uniform, &batch, 0.0).map_err(|e| e.to_string())?;
    for (got, want) in zero.values().iter().zip([0.4, 0.2, 0.2, 0.2]) {
        if (got - want).abs() > EXACT_TOL {
            return Err(format!("lambda=0 status {:?}", zero.values()));
        }
    }
    let t = local_thresholds(&uniform, 0.98).map_err(|e| e.to_string())?;
    if t.values().iter().any(|&v| (v - 0.98).abs() > EXACT_TOL) {
        return Err(format!("uniform thresholds {:?}", t.values()));
    }
    let skewed = LearningStatus::from_values(vec![0.4, 0.2, 0.2, 0.2], 1).map_err(|e| e.to_string())?;
    let t = local_thresholds(&skewed, 0.98).map_err(|e| e.to_string())?;
    for (got, want) in t.values().iter().zip([0.98, 0.49, 0.49, 0.49]) {
        if (got - want).abs() > EXACT_TOL {
            return Err(format!("skewed thresholds {:?}", t.values()));
        }
    }

    let mut rng = SeededRng::new(77);
    for i in 0..RANDOM_STATUSES {
        let c = 2 + rng.below(9);
        let lambda = rng.uniform() * 0.999;
        let tau = 0.01 + 0.99 * rng.uniform();
        let prev = LearningStatus::from_values(random_dist(&mut rng, c).into_vec(), 0).unwrap();
        let n = 1 + rng.below(8);
        let preds: Vec<ProbDist> = (0..n).map(|_| random_dist(&mut rng, c)).collect();
        let s = update_status(&prev, &preds, lambda).map_err(|e| e.to_string())?;
        let sum: f64 = s.values().iter().sum();
        if (sum - 1.0).abs() > 1e-12 || s.values().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(format!("status {i} left the simplex: {:?}", s.values()));
        }
        let t = local_thresholds(&s, tau).map_err(|e| e.to_string())?;
        let max = t.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max != tau {
            return Err(format!("status {i}: max threshold {max} != tau {tau}"));
        }
        for a in 0..c {
            for b in 0..c {
                if s.values()[a] >= s.values()[b] && t.get(a) < t.get(b) {
                    return Err(format!("status {i}: thresholds not monotone in classes {a},{b}"));
                }
            }
        }
    }
    Ok(format!("worked examples to {EXACT_TOL:.0e}, {RANDOM_STATUSES} random statuses"))
}

fn trace_equivalence() -> Outcome {
    trace::check_full_mode_trace();
    Ok("two scripted steps match the oracle".into())
}

fn per_seed<'a>(ablation: &'a AblationResult, mode: Mode) -> &'a jointmatch::harness::Aggregate {
    &ablation.row(mode).expect("ablation row").aggregate
}

fn pseudo_label_balance(ablation: &AblationResult) -> Outcome {
    let full = per_seed(ablation, Mode::FULL);
    let fix = per_seed(ablation, Mode::FIXMATCH);
    let mut wins = 0;
    let mut detail = Vec::new();
    for (a, b) in full.per_seed.iter().zip(&fix.per_seed) {
        let (ca, cb) = (a.passed_cv.ok_or("missing cv")?, b.passed_cv.ok_or("missing cv")?);
        if ca < cb {
            wins += 1;
        }
        detail.push(format!("{ca:.3}/{cb:.3}"));
    }
    let line = format!("cv full/fixmatch per seed {}, {wins}/5 lower", detail.join(" "));
    if wins >= MIN_BALANCED_SEEDS {
        Ok(line)
    } else {
        Err(line)
    }
}

fn precision_gap(ablation: &AblationResult) -> Outcome {
    let full = per_seed(ablation, Mode::FULL).precision.mean;
    let fix = per_seed(ablation, Mode::FIXMATCH).precision.mean;
    let line = format!("precision full {full:.4} vs fixmatch {fix:.4}, gap {:.2} pp", 100.0 * (full - fix));
    if full - fix >= MIN_PRECISION_GAP {
        Ok(line)
    } else {
        Err(line)
    }
}

fn ablation_ordering(ablation: &AblationResult) -> Outcome {
    let full = per_seed(ablation, Mode::FULL).accuracy.mean;
    let fix = per_seed(ablation, Mode::FIXMATCH).accuracy.mean;
    let (best_label, best) = [Mode::NO_ADAPTIVE, Mode::NO_CROSS, Mode::NO_DISAGREE]
        .iter()
        .map(|m| (m.label(), per_seed(ablation, *m).accuracy.mean))
        .fold((String::new(), f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
    let line = format!("full {full:.4}, fixmatch {fix:.4}, best single ablation {best:.4} ({best_label})");
    if full > fix && full >= best {
        Ok(line)
    } else {
        Err(line)
    }
}

fn delta_shape(result: &SweepResult) -> Outcome {
    let acc = |v: f64| {
        result
            .rows
            .iter()
            .find(|r| r.value == v)
            .map(|r| r.aggregate.accuracy.mean)
            .ok_or(format!("missing delta {v}"))
    };
    let (d0, d7, d9, d1) = (acc(0.0)?, acc(0.7)?, acc(0.9)?, acc(1.0)?);
    let line = format!("delta 0: {d0:.4}, 0.7: {d7:.4}, 0.9: {d9:.4}, 1: {d1:.4}");
    if [d7, d9].iter().any(|&m| m > d0 && m > d1) {
        Ok(line)
    } else {
        Err(line)
    }
}

fn determinism() -> Outcome {
    let mut config = task_config();
    config.set("steps", "200").map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&config, Some(&a)).map_err(|e| e.to_string())?;
    run(&config, Some(&b)).map_err(|e| e.to_string())?;
    let ta = std::fs::read(a.join("telemetry.csv")).map_err(|e| e.to_string())?;
    let tb = std::fs::read(b.join("telemetry.csv")).map_err(|e| e.to_string())?;
    if ta.is_empty() || ta != tb {
        return Err("telemetry differs between identical runs".into());
    }
    Ok(format!("two 200-step runs, {} identical telemetry bytes", ta.len()))
}

fn brute_force_macro_f1(pred: &[usize], truth: &[usize], c: usize) -> f64 {
    let mut confusion = vec![vec![0usize; c]; c];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let mut total = 0.0;
    for k in 0..c {
        let tp = confusion[k][k] as f64;
        let fp: f64 = (0..c).filter(|&t| t != k).map(|t| confusion[t][k] as f64).sum();
        let fn_: f64 = (0..c).filter(|&p| p != k).map(|p| confusion[k][p] as f64).sum();
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        total += if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
    }
    total / c as f64
}

fn macro_f1_oracle() -> Outcome {
    let mut rng = SeededRng::new(9);
    let mut worst = 0.0f64;
    for i in 0..F1_SETS {
        let c = 2 + rng.below(7);
        let n = 1 + rng.below(60);
        let truth: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| if rng.uniform() < 0.6 { t } else { rng.below(c) })
            .collect();
        let want = brute_force_macro_f1(&pred, &truth, c);
        let p: Vec<HardLabel> = pred.iter().map(|&v| HardLabel(v)).collect();
        let t: Vec<HardLabel> = truth.iter().map(|&v| HardLabel(v)).collect();
        let got = macro_f1(&p, &t, c).map_err(|e| e.to_string())?;
        let err = (got - want).abs();
        if err > EXACT_TOL {
            return Err(format!("set {i}: {got} vs brute force {want}"));
        }
        worst = worst.max(err);
    }
    Ok(format!("{F1_SETS} sets, worst abs error {worst:.1e}"))
}

struct Gate {
    failures: usize,
}

impl Gate {
    fn check(&mut self, id: u8, name: &str, limit: Duration, elapsed_before: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        let elapsed = elapsed_before + start.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > limit => Err(format!("{d}; took {:.1}s, limit {}s", elapsed.as_secs_f64(), limit.as_secs())),
            other => other,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        if outcome.is_err() {
            self.failures += 1;
        }
        println!("criterion {id} {tag} {name}: {detail} [{:.1}s]", elapsed.as_secs_f64());
    }
}

fn main() -> ExitCode {
    let mut gate = Gate { failures: 0 };
    let zero = Duration::ZERO;
    gate.check(1, "gradient correctness", Duration::from_secs(10), zero, gradient_correctness);
    gate.check(2, "status and threshold exactness", Duration::from_secs(5), zero, threshold_exactness);
    gate.check(3, "training step trace equivalence", Duration::from_secs(1), zero, trace_equivalence);

    let start = Instant::now();
    let ablation = ablate(&task_config(), &SEEDS, None);
    let ablation_time = start.elapsed();
    match &ablation {
        Ok(result) => {
            gate.check(4, "pseudo-label balance", Duration::from_secs(300), ablation_time, || pseudo_label_balance(result));
            gate.check(5, "pseudo-label precision gap", Duration::from_secs(300), ablation_time, || precision_gap(result));
            gate.check(6, "ablation ordering", Duration::from_secs(900), ablation_time, || ablation_ordering(result));
        }
        Err(e) => {
            for (id, name) in [(4, "pseudo-label balance"), (5, "pseudo-label precision gap"), (6, "ablation ordering")] {
                gate.check(id, name, Duration::MAX, zero, || Err(format!("ablation failed: {e}")));
            }
        }
    }

    gate.check(7, "disagreement weight sweep shape", Duration::from_secs(900), zero, || {
        let spec = SweepSpec {
            parameter: SweepParam::Delta,
            values: vec![0.0, 0.7, 0.9, 1.0],
            seeds: SEEDS.to_vec(),
        };
        let result = sweep(&spec, &task_config(), None).map_err(|e| e.to_string())?;
        delta_shape(&result)
    });
    gate.check(8, "determinism", Duration::from_secs(60), zero, determinism);
    gate.check(9, "macro-F1 oracle", Duration::from_secs(5), zero, macro_f1_oracle);

    if gate.failures == 0 {
        println!("acceptance: all 9 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} of 9 criteria failed", gate.failures);
        ExitCode::FAILURE
    }
}
