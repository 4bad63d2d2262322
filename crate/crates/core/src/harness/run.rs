//! A single training run: batch sampling, periodic evaluation, telemetry
//! streaming, checkpoints and the JSON report.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::metrics::{accuracy, coefficient_of_variation, macro_f1};
use crate::augment::{AugmentSpec, Example};
use crate::classifier::Classifier;
use crate::datasets::DatasetSplit;
use crate::error::{Error, Result};
use crate::numeric::{HardLabel, ProbDist, SeededRng, Stream};
use crate::trainer::{predict, train_step, Seeds, StepContext, StepTelemetry, TrainState};

pub const SCHEMA_VERSION: u32 = 1;

pub const TELEMETRY_COLUMNS: [&str; 11] = [
    "schema_version",
    "step",
    "model",
    "class",
    "passed_count",
    "correct_count",
    "tau_local",
    "p_tilde",
    "supervised_loss",
    "unlabeled_loss",
    "agreement_rate",
];

/// Fraction of the run, counted from the end, that tail summaries cover.
pub const TAIL_FRACTION: f64 = 0.25;

/// Draws fixed-size batches without replacement, reshuffling each epoch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    len: usize,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
    lane: u64,
}

impl BatchSampler {
    /// `lane` separates independent samplers drawing from the same seed.
    pub fn new(len: usize, seed: u64, lane: u64) -> Self {
        let mut s = BatchSampler {
            len,
            order: Vec::new(),
            pos: 0,
            epoch: 0,
            seed,
            lane,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.len).collect();
        SeededRng::stream(self.seed, Stream::Batches, self.epoch * 2 + self.lane).shuffle(&mut self.order);
        self.pos = 0;
        self.epoch += 1;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        if self.len == 0 {
            return Vec::new();
        }
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pos == self.len {
                self.reshuffle();
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub f: Metrics,
    pub g: Option<Metrics>,
    /// Probability-averaged prediction of both models; model f alone when
    /// the run has one model.
    pub ensemble: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub validation: ModelMetrics,
    pub test: ModelMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStatus {
    pub model: String,
    pub p_tilde: Vec<f64>,
    pub tau_local: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSummary {
    /// First step included in the tail window.
    pub tail_start: u64,
    /// Passed pseudo-labels per class per step, averaged over the tail
    /// window and over models.
    pub passed_per_class: Vec<f64>,
    pub correct_per_class: Option<Vec<f64>>,
    /// Coefficient of variation of `passed_per_class`.
    pub passed_cv: f64,
    /// Σ correct / Σ passed over the tail window; `None` without hidden
    /// labels or when nothing passed.
    pub precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub status: String,
    pub error: Option<String>,
    pub mode: String,
    pub mode_signature: String,
    /// Full rendered configuration; parsing it reproduces the run.
    pub config: String,
    pub seeds: Seeds,
    pub split_hash: String,
    pub class_names: Vec<String>,
    pub steps_completed: u64,
    pub evals: Vec<EvalRecord>,
    pub best_step: u64,
    /// Ensemble test metrics at the best-validation evaluation.
    pub headline: Metrics,
    pub final_test: ModelMetrics,
    pub pseudo_labels: Option<PseudoLabelSummary>,
    pub final_status: Vec<ModelStatus>,
    pub peer_reads: u64,
    pub wall_time_secs: f64,
}

impl RunReport {
    /// Serialized report with the wall-time field zeroed.
    pub fn canonical_json(&self) -> String {
        let mut r = self.clone();
        r.wall_time_secs = 0.0;
        serde_json::to_string_pretty(&r).expect("report serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: RunReport = serde_json::from_str(&text)?;
        if report.schema_version != SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported schema version {}",
                path.display(),
                report.schema_version
            )));
        }
        Ok(report)
    }
}

struct Evaluator {
    val_x: Vec<Vec<f64>>,
    val_y: Vec<HardLabel>,
    test_x: Vec<Vec<f64>>,
    test_y: Vec<HardLabel>,
    num_classes: usize,
}

fn featurize(split: &DatasetSplit, examples: &[Example]) -> Result<(Vec<Vec<f64>>, Vec<HardLabel>)> {
    let mut xs = Vec::with_capacity(examples.len());
    let mut ys = Vec::with_capacity(examples.len());
    for e in examples {
        xs.push(split.featurizer.features(&e.payload)?);
        ys.push(
            e.label
                .ok_or_else(|| Error::Data(format!("evaluation example {} has no label", e.id)))?,
        );
    }
    Ok((xs, ys))
}

impl Evaluator {
    fn new(split: &DatasetSplit) -> Result<Self> {
        let (val_x, val_y) = featurize(split, &split.validation)?;
        let (test_x, test_y) = featurize(split, &split.test)?;
        Ok(Evaluator {
            val_x,
            val_y,
            test_x,
            test_y,
            num_classes: split.num_classes,
        })
    }

    fn metrics(&self, preds: &[HardLabel], truth: &[HardLabel]) -> Result<Metrics> {
        Ok(Metrics {
            accuracy: accuracy(preds, truth)?,
            macro_f1: macro_f1(preds, truth, self.num_classes)?,
        })
    }

    fn score(&self, f: &Classifier, g: Option<&Classifier>, xs: &[Vec<f64>], ys: &[HardLabel]) -> Result<ModelMetrics> {
        let pf = predict(f, xs)?;
        let hard = |p: &[ProbDist]| p.iter().map(ProbDist::argmax).collect::<Vec<_>>();
        let mf = self.metrics(&hard(&pf), ys)?;
        let Some(g) = g else {
            return Ok(ModelMetrics {
                f: mf,
                g: None,
                ensemble: mf,
            });
        };
        let pg = predict(g, xs)?;
        let ens: Vec<HardLabel> = pf
            .iter()
            .zip(&pg)
            .map(|(a, b)| {
                let avg: Vec<f64> = a.probs().iter().zip(b.probs()).map(|(x, y)| 0.5 * (x + y)).collect();
                HardLabel(crate::numeric::argmax(&avg))
            })
            .collect();
        Ok(ModelMetrics {
            f: mf,
            g: Some(self.metrics(&hard(&pg), ys)?),
            ensemble: self.metrics(&ens, ys)?,
        })
    }

    fn evaluate(&self, state: &TrainState, step: u64) -> Result<EvalRecord> {
        let f = &state.f.model;
        let g = state.g.as_ref().map(|m| &m.model);
        Ok(EvalRecord {
            step,
            validation: self.score(f, g, &self.val_x, &self.val_y)?,
            test: self.score(f, g, &self.test_x, &self.test_y)?,
        })
    }
}

/// Streams one telemetry row per step, model and class.
pub struct TelemetryWriter {
    writer: csv::Writer<BufWriter<File>>,
    path: PathBuf,
}

impl TelemetryWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(BufWriter::new(file));
        writer.write_record(TELEMETRY_COLUMNS)?;
        Ok(TelemetryWriter {
            writer,
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, t: &StepTelemetry) -> Result<()> {
        for row in telemetry_rows(t) {
            self.writer.write_record(&row)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// CSV rows for one step, in `TELEMETRY_COLUMNS` order.
pub fn telemetry_rows(t: &StepTelemetry) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for m in &t.models {
        for c in 0..m.passed_per_class.len() {
            rows.push(vec![
                SCHEMA_VERSION.to_string(),
                t.step.to_string(),
                m.model.to_string(),
                c.to_string(),
                m.passed_per_class[c].to_string(),
                m.correct_per_class.as_ref().map_or(String::new(), |v| v[c].to_string()),
                m.tau_local[c].to_string(),
                m.p_tilde[c].to_string(),
                m.supervised_loss.to_string(),
                m.unlabeled_loss.to_string(),
                t.agreement_rate.map_or(String::new(), |a| a.to_string()),
            ]);
        }
    }
    rows
}

/// Tail-window pseudo-label statistics over recorded telemetry.
pub fn summarize_pseudo_labels(history: &[StepTelemetry], num_classes: usize) -> Option<PseudoLabelSummary> {
    let last = history.last()?;
    let total = last.step + 1;
    let tail_start = total - ((total as f64 * TAIL_FRACTION).ceil() as u64).max(1);
    let tail: Vec<&StepTelemetry> = history.iter().filter(|t| t.step >= tail_start).collect();
    let mut passed = vec![0.0; num_classes];
    let mut correct = vec![0.0; num_classes];
    let mut have_truth = true;
    let mut samples = 0usize;
    for t in &tail {
        for m in &t.models {
            samples += 1;
            for c in 0..num_classes {
                passed[c] += m.passed_per_class[c] as f64;
            }
            match &m.correct_per_class {
                Some(v) => v.iter().enumerate().for_each(|(c, &n)| correct[c] += n as f64),
                None => have_truth = false,
            }
        }
    }
    let total_passed: f64 = passed.iter().sum();
    let total_correct: f64 = correct.iter().sum();
    let precision = (have_truth && total_passed > 0.0).then(|| total_correct / total_passed);
    let norm = |v: Vec<f64>| v.into_iter().map(|x| x / samples as f64).collect::<Vec<_>>();
    let passed = norm(passed);
    Some(PseudoLabelSummary {
        tail_start,
        passed_cv: coefficient_of_variation(&passed),
        passed_per_class: passed,
        correct_per_class: have_truth.then(|| norm(correct)),
        precision,
    })
}

/// Everything a run produced, including the in-memory telemetry history.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub history: Vec<StepTelemetry>,
    pub state: TrainState,
}

fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(report)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn save_checkpoints(dir: &Path, prefix: &str, f: &Classifier, g: Option<&Classifier>) -> Result<()> {
    f.save(&dir.join(format!("{prefix}_f.json")))?;
    if let Some(g) = g {
        g.save(&dir.join(format!("{prefix}_g.json")))?;
    }
    Ok(())
}

/// Builds the data for `config` and runs it.
pub fn run(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunOutcome> {
    config.validate()?;
    let (split, augment) = config.build_data()?;
    run_with_data(config, &split, &augment, out_dir)
}

/// Runs training on a prepared split. With `out_dir` the run writes
/// `config.snapshot`, `telemetry.csv`, `report.json` and `checkpoints/`.
///
/// On divergence the report is still written with status `diverged` and the
/// error names the last completed telemetry row.
pub fn run_with_data(
    config: &ExperimentConfig,
    split: &DatasetSplit,
    augment: &AugmentSpec,
    out_dir: Option<&Path>,
) -> Result<RunOutcome> {
    let started = Instant::now();
    config.validate()?;
    let tc = &config.train;
    if split.labeled.is_empty() {
        return Err(Error::Data("no labeled examples".into()));
    }
    let mut telemetry = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
            let snap = dir.join("config.snapshot");
            fs::write(&snap, config.render()).map_err(|e| Error::io(&snap, e))?;
            Some(TelemetryWriter::create(&dir.join("telemetry.csv"))?)
        }
        None => None,
    };

    let input_dim = split.featurizer.dim();
    let mut state = TrainState::new(tc, input_dim, split.num_classes)?;
    let evaluator = Evaluator::new(split)?;
    let ctx = StepContext {
        config: tc,
        augment,
        featurizer: &split.featurizer,
    };
    let mut labeled_sampler = BatchSampler::new(split.labeled.len(), tc.seeds.data, 0);
    let mut unlabeled_sampler = BatchSampler::new(split.unlabeled.len(), tc.seeds.data, 1);
    let have_truth = config.track_quality && !split.unlabeled_truth.is_empty();

    let mut evals = vec![evaluator.evaluate(&state, 0)?];
    let mut best = 0usize;
    let mut best_models = (state.f.model.clone(), state.g.as_ref().map(|g| g.model.clone()));
    let mut history: Vec<StepTelemetry> = Vec::with_capacity(tc.steps as usize);
    let mut failure = None;

    for _ in 0..tc.steps {
        let lab: Vec<Example> = labeled_sampler
            .next_batch(tc.batch_size)
            .into_iter()
            .map(|i| split.labeled[i].clone())
            .collect();
        let idx = unlabeled_sampler.next_batch(tc.unlabeled_batch_size());
        let unl: Vec<Example> = idx.iter().map(|&i| split.unlabeled[i].clone()).collect();
        let truth: Option<Vec<HardLabel>> =
            have_truth.then(|| idx.iter().map(|&i| split.unlabeled_truth.get(i)).collect());
        match train_step(&mut state, &lab, &unl, truth.as_deref(), ctx) {
            Ok(trace) => {
                if let Some(w) = telemetry.as_mut() {
                    w.write(&trace.telemetry)?;
                }
                history.push(trace.telemetry);
            }
            Err(e) => {
                let last_row = history
                    .last()
                    .and_then(|t| telemetry_rows(t).pop())
                    .map_or_else(|| "none".to_string(), |r| r.join(","));
                log::error!("{e}; last telemetry row: {last_row}");
                failure = Some(match e {
                    Error::Diverged { step, message } => Error::Diverged {
                        step,
                        message: format!("{message}; last telemetry row: {last_row}"),
                    },
                    other => other,
                });
                break;
            }
        }
        let step = state.step;
        if step % tc.eval_every == 0 || step == tc.steps {
            let record = evaluator.evaluate(&state, step)?;
            if record.validation.ensemble.accuracy > evals[best].validation.ensemble.accuracy {
                best = evals.len();
                best_models = (state.f.model.clone(), state.g.as_ref().map(|g| g.model.clone()));
            }
            evals.push(record);
        }
    }
    if let Some(w) = telemetry {
        w.finish()?;
    }

    let final_test = evals.last().expect("initial evaluation exists").test.clone();
    let final_status = state
        .models()
        .map(|m| -> Result<ModelStatus> {
            Ok(ModelStatus {
                model: m.model.id().to_string(),
                p_tilde: m.controller.status().values().to_vec(),
                tau_local: m.controller.thresholds()?.values().to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        status: if failure.is_some() { "diverged" } else { "completed" }.into(),
        error: failure.as_ref().map(ToString::to_string),
        mode: tc.mode.label(),
        mode_signature: tc.mode.signature(),
        config: config.render(),
        seeds: tc.seeds,
        split_hash: split.hash(),
        class_names: split.class_names.clone(),
        steps_completed: state.step,
        best_step: evals[best].step,
        headline: evals[best].test.ensemble,
        final_test,
        evals,
        pseudo_labels: summarize_pseudo_labels(&history, split.num_classes),
        final_status,
        peer_reads: state.peer_reads(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out_dir {
        write_report(dir, &report)?;
        let ck = dir.join("checkpoints");
        save_checkpoints(&ck, "final", &state.f.model, state.g.as_ref().map(|g| &g.model))?;
        save_checkpoints(&ck, "best", &best_models.0, best_models.1.as_ref())?;
    }
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(RunOutcome { report, history, state })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_covers_each_epoch_once() {
        let mut s = BatchSampler::new(10, 3, 0);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let a: Vec<usize> = BatchSampler::new(7, 1, 0).next_batch(20);
        let b: Vec<usize> = BatchSampler::new(7, 1, 0).next_batch(20);
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        assert!(BatchSampler::new(0, 1, 0).next_batch(3).is_empty());
    }

    #[test]
    fn tail_summary_arithmetic() {
        use crate::classifier::ModelId;
        use crate::trainer::ModelTelemetry;
        let step = |s: u64, passed: Vec<usize>, correct: Vec<usize>| StepTelemetry {
            step: s,
            models: vec![ModelTelemetry {
                model: ModelId::F,
                supervised_loss: 0.0,
                unlabeled_loss: 0.0,
                p_tilde: vec![0.5, 0.5],
                tau_local: vec![0.9, 0.9],
                passed_per_class: passed,
                correct_per_class: Some(correct),
            }],
            agreement_rate: None,
            unlabeled_batch_size: 4,
        };
        // Eight steps: tail covers the last two.
        let mut h: Vec<StepTelemetry> = (0..6).map(|s| step(s, vec![9, 0], vec![0, 0])).collect();
        h.push(step(6, vec![2, 2], vec![1, 2]));
        h.push(step(7, vec![4, 0], vec![4, 0]));
        let s = summarize_pseudo_labels(&h, 2).unwrap();
        assert_eq!(s.tail_start, 6);
        assert_eq!(s.passed_per_class, vec![3.0, 1.0]);
        assert!((s.passed_cv - 0.5).abs() < 1e-15);
        assert!((s.precision.unwrap() - 7.0 / 8.0).abs() < 1e-15);
        assert!(summarize_pseudo_labels(&[], 2).is_none());
    }
}
