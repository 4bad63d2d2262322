//! Multi-seed batteries: the component ablation and one-parameter sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::metrics::{mean_std, MeanStd};
use super::run::{run_with_data, RunReport};
use crate::error::{Error, Result};
use crate::trainer::Mode;

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Per-seed outcome of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub final_accuracy: f64,
    pub precision: Option<f64>,
    pub passed_cv: Option<f64>,
    pub split_hash: String,
}

impl SeedResult {
    fn from_report(seed: u64, r: &RunReport) -> Self {
        SeedResult {
            seed,
            accuracy: r.headline.accuracy,
            macro_f1: r.headline.macro_f1,
            final_accuracy: r.final_test.ensemble.accuracy,
            precision: r.pseudo_labels.as_ref().and_then(|p| p.precision),
            passed_cv: r.pseudo_labels.as_ref().map(|p| p.passed_cv),
            split_hash: r.split_hash.clone(),
        }
    }
}

/// Seed-aggregated metrics of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub accuracy: MeanStd,
    pub macro_f1: MeanStd,
    pub final_accuracy: MeanStd,
    /// Over the seeds that have a precision value.
    pub precision: MeanStd,
    pub passed_cv: MeanStd,
    pub per_seed: Vec<SeedResult>,
}

impl Aggregate {
    pub fn from_seeds(per_seed: Vec<SeedResult>) -> Self {
        let col = |f: &dyn Fn(&SeedResult) -> Option<f64>| -> MeanStd {
            mean_std(&per_seed.iter().filter_map(f).collect::<Vec<_>>())
        };
        Aggregate {
            accuracy: col(&|s| Some(s.accuracy)),
            macro_f1: col(&|s| Some(s.macro_f1)),
            final_accuracy: col(&|s| Some(s.final_accuracy)),
            precision: col(&|s| s.precision),
            passed_cv: col(&|s| s.passed_cv),
            per_seed,
        }
    }
}

fn seeded(base: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    let mut c = base.clone();
    c.set("seed", &seed.to_string()).expect("seed key exists");
    c
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn fmt_ms(m: &MeanStd) -> String {
    if m.n == 0 {
        "n/a".into()
    } else {
        format!("{:.4} ± {:.4}", m.mean, m.std)
    }
}

const AGG_COLUMNS: [&str; 11] = [
    "n",
    "accuracy_mean",
    "accuracy_std",
    "macro_f1_mean",
    "macro_f1_std",
    "final_accuracy_mean",
    "final_accuracy_std",
    "precision_mean",
    "precision_std",
    "passed_cv_mean",
    "passed_cv_std",
];

fn agg_fields(a: &Aggregate) -> Vec<String> {
    let ms = |m: &MeanStd| [m.mean.to_string(), m.std.to_string()];
    let mut v = vec![a.accuracy.n.to_string()];
    for m in [&a.accuracy, &a.macro_f1, &a.final_accuracy, &a.precision, &a.passed_cv] {
        v.extend(ms(m));
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub signature: String,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
}

impl AblationResult {
    pub fn row(&self, mode: Mode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.signature == mode.signature())
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Method | Accuracy | Macro-F1 | Pseudo-label precision | Passed-count CV |\n");
        s.push_str("|---|---|---|---|---|\n");
        for r in &self.rows {
            let a = &r.aggregate;
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} |",
                r.label,
                fmt_ms(&a.accuracy),
                fmt_ms(&a.macro_f1),
                fmt_ms(&a.precision),
                fmt_ms(&a.passed_cv)
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["mode", "signature"];
        header.extend(AGG_COLUMNS);
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.label.clone(), r.signature.clone()];
            rec.extend(agg_fields(&r.aggregate));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Runs the full method and its four ablations over `seeds`. Every mode sees
/// the same data split for a given seed. Runs execute in parallel; each is
/// deterministic on its own.
pub fn ablate(base: &ExperimentConfig, seeds: &[u64], out_dir: Option<&Path>) -> Result<AblationResult> {
    if base.train.mode != Mode::FULL {
        return Err(Error::Config(format!(
            "ablation starts from the full method, config has mode {}",
            base.train.mode.signature()
        )));
    }
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    base.validate()?;
    let data: Vec<_> = seeds
        .iter()
        .map(|&s| seeded(base, s).build_data())
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..Mode::ABLATIONS.len())
        .flat_map(|m| (0..seeds.len()).map(move |s| (m, s)))
        .collect();
    let results: Vec<SeedResult> = jobs
        .par_iter()
        .map(|&(m, s)| {
            let mode = Mode::ABLATIONS[m];
            let mut config = seeded(base, seeds[s]);
            config.train.mode = mode;
            let dir = out_dir.map(|d| d.join(mode.name().unwrap_or("custom")).join(format!("seed-{}", seeds[s])));
            let (split, augment) = &data[s];
            let outcome = run_with_data(&config, split, augment, dir.as_deref())?;
            Ok(SeedResult::from_report(seeds[s], &outcome.report))
        })
        .collect::<Result<_>>()?;
    let rows = Mode::ABLATIONS
        .iter()
        .enumerate()
        .map(|(m, mode)| AblationRow {
            label: mode.label(),
            signature: mode.signature(),
            aggregate: Aggregate::from_seeds(results[m * seeds.len()..(m + 1) * seeds.len()].to_vec()),
        })
        .collect();
    let result = AblationResult { rows };
    if let Some(dir) = out_dir {
        result.write_csv(&dir.join("ablation.csv"))?;
        write_file(&dir.join("ablation.md"), &result.to_markdown())?;
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Delta,
    Lambda,
    Tau,
    Mu,
    NLabels,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delta" | "disagreement_weight" => Ok(SweepParam::Delta),
            "lambda" | "ema_decay" => Ok(SweepParam::Lambda),
            "tau" | "fixed_threshold" => Ok(SweepParam::Tau),
            "mu" | "unlabeled_data_ratio" => Ok(SweepParam::Mu),
            "n_labels" | "labeled_per_class" => Ok(SweepParam::NLabels),
            other => Err(Error::Config(format!("cannot sweep `{other}`"))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Delta => "delta",
            SweepParam::Lambda => "lambda",
            SweepParam::Tau => "tau",
            SweepParam::Mu => "mu",
            SweepParam::NLabels => "n_labels",
        }
    }

    fn is_integer(self) -> bool {
        matches!(self, SweepParam::Mu | SweepParam::NLabels)
    }

    /// The grid the corresponding published table reports, minus points the
    /// method's domain excludes (λ = 1 and τ = 0).
    pub fn paper_grid(self) -> Vec<f64> {
        match self {
            SweepParam::Delta => vec![0.0, 0.3, 0.5, 0.7, 0.9, 1.0],
            SweepParam::Lambda => vec![0.0, 0.25, 0.5, 0.9, 0.99],
            SweepParam::Tau => vec![0.25, 0.5, 0.75, 0.9, 0.95, 0.98, 0.99],
            SweepParam::Mu => vec![1.0, 3.0, 5.0, 10.0, 15.0, 20.0, 30.0],
            SweepParam::NLabels => vec![5.0, 10.0, 15.0, 25.0, 100.0, 1000.0],
        }
    }

    fn render(self, value: f64) -> Result<String> {
        if self.is_integer() {
            if value.fract() != 0.0 || value < 0.0 {
                return Err(Error::Config(format!("{} takes whole numbers, got {value}", self.name())));
            }
            Ok(format!("{}", value as u64))
        } else {
            Ok(value.to_string())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub parameter: SweepParam,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn paper_grid(parameter: SweepParam, seeds: Vec<u64>) -> Self {
        SweepSpec {
            parameter,
            values: parameter.paper_grid(),
            seeds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub parameter: SweepParam,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![self.parameter.name()];
        header.extend(AGG_COLUMNS);
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.value.to_string()];
            rec.extend(agg_fields(&r.aggregate));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// One run per (value, seed), aggregated per value.
pub fn sweep(spec: &SweepSpec, base: &ExperimentConfig, out_dir: Option<&Path>) -> Result<SweepResult> {
    if spec.values.is_empty() || spec.seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one value and one seed".into()));
    }
    let key = spec.parameter.name();
    let configs: Vec<(usize, usize, ExperimentConfig)> = spec
        .values
        .iter()
        .enumerate()
        .flat_map(|(v, &value)| spec.seeds.iter().enumerate().map(move |(s, &seed)| (v, s, value, seed)))
        .map(|(v, s, value, seed)| {
            let mut c = seeded(base, seed);
            c.set(key, &spec.parameter.render(value)?)?;
            c.validate()?;
            Ok((v, s, c))
        })
        .collect::<Result<_>>()?;
    let results: Vec<SeedResult> = configs
        .par_iter()
        .map(|(v, s, config)| {
            let dir: Option<PathBuf> = out_dir.map(|d| {
                d.join(format!("{key}={}", spec.parameter.render(spec.values[*v]).unwrap()))
                    .join(format!("seed-{}", spec.seeds[*s]))
            });
            let (split, augment) = config.build_data()?;
            let outcome = run_with_data(config, &split, &augment, dir.as_deref())?;
            Ok(SeedResult::from_report(spec.seeds[*s], &outcome.report))
        })
        .collect::<Result<_>>()?;
    let k = spec.seeds.len();
    let rows = spec
        .values
        .iter()
        .enumerate()
        .map(|(v, &value)| SweepRow {
            value,
            aggregate: Aggregate::from_seeds(results[v * k..(v + 1) * k].to_vec()),
        })
        .collect();
    let result = SweepResult {
        parameter: spec.parameter,
        rows,
    };
    if let Some(dir) = out_dir {
        result.write_csv(&dir.join(format!("sweep_{key}.csv")))?;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_grids() {
        assert_eq!(SweepParam::Delta.paper_grid().len(), 6);
        assert_eq!(SweepParam::NLabels.paper_grid().len(), 6);
        assert!(!SweepParam::Lambda.paper_grid().contains(&1.0));
        assert!(!SweepParam::Tau.paper_grid().contains(&0.0));
        assert_eq!("ema_decay".parse::<SweepParam>().unwrap(), SweepParam::Lambda);
        assert!(SweepParam::Mu.render(2.5).is_err());
        assert_eq!(SweepParam::NLabels.render(25.0).unwrap(), "25");
    }

    #[test]
    fn aggregate_std_matches_recomputation() {
        let per_seed: Vec<SeedResult> = [0.61, 0.64, 0.7, 0.58, 0.66]
            .iter()
            .enumerate()
            .map(|(i, &a)| SeedResult {
                seed: i as u64,
                accuracy: a,
                macro_f1: a - 0.1,
                final_accuracy: a,
                precision: (i % 2 == 0).then_some(0.9),
                passed_cv: Some(0.1),
                split_hash: String::new(),
            })
            .collect();
        let agg = Aggregate::from_seeds(per_seed);
        let vals = [0.61, 0.64, 0.7, 0.58, 0.66];
        let mean = vals.iter().sum::<f64>() / 5.0;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!((agg.accuracy.std - var.sqrt()).abs() < 1e-12);
        assert_eq!(agg.precision.n, 3);
    }
}
