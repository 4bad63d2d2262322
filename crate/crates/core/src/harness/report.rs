//! Summaries over finished run directories: comparison tables grouped by mode
//! signature and per-step pseudo-label series.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::metrics::{mean_std, MeanStd};
use super::run::{RunReport, SCHEMA_VERSION};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub report: RunReport,
}

#[derive(Debug, Clone)]
pub struct Skipped {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct ReportGroup {
    pub signature: String,
    pub mode: String,
    pub runs: usize,
    pub accuracy: MeanStd,
    pub macro_f1: MeanStd,
    pub precision: MeanStd,
    pub passed_cv: MeanStd,
}

/// One point of the per-class pseudo-label count series.
#[derive(Debug, Clone, PartialEq)]
pub struct CountPoint {
    pub run: String,
    pub step: u64,
    pub model: String,
    pub class: usize,
    pub passed: u64,
    pub correct: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Summary {
    pub runs: Vec<LoadedRun>,
    pub skipped: Vec<Skipped>,
    pub groups: Vec<ReportGroup>,
    pub counts: Vec<CountPoint>,
    /// True when every included telemetry stream carries hidden-label
    /// correctness counts.
    pub has_quality: bool,
}

fn find_reports(root: &Path, found: &mut Vec<PathBuf>, skipped: &mut Vec<Skipped>) {
    if root.is_file() {
        found.push(root.to_path_buf());
        return;
    }
    let candidate = root.join("report.json");
    if candidate.is_file() {
        found.push(candidate);
        return;
    }
    match fs::read_dir(root) {
        Ok(entries) => {
            let mut dirs: Vec<PathBuf> = entries.flatten().map(|e| e.path()).filter(|p| p.is_dir()).collect();
            dirs.sort();
            for d in dirs {
                find_reports(&d, found, skipped);
            }
        }
        Err(e) => skipped.push(Skipped {
            path: root.to_path_buf(),
            reason: e.to_string(),
        }),
    }
}

fn read_counts(run: &str, path: &Path) -> Result<(Vec<CountPoint>, bool)> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{}: no `{name}` column", path.display())))
    };
    let (sv, st, mo, cl, pa, co) = (
        col("schema_version")?,
        col("step")?,
        col("model")?,
        col("class")?,
        col("passed_count")?,
        col("correct_count")?,
    );
    let mut points = Vec::new();
    let mut quality = true;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let bad = |m: &str| Error::Row {
            path: path.to_path_buf(),
            row: i + 2,
            message: m.to_string(),
        };
        if rec.get(sv) != Some(&SCHEMA_VERSION.to_string()[..]) {
            return Err(bad("unsupported schema version"));
        }
        let num = |idx: usize| -> Result<u64> {
            rec.get(idx)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad("bad number"))
        };
        let correct = match rec.get(co) {
            Some("") | None => {
                quality = false;
                None
            }
            Some(_) => Some(num(co)?),
        };
        points.push(CountPoint {
            run: run.to_string(),
            step: num(st)?,
            model: rec.get(mo).unwrap_or("").to_string(),
            class: num(cl)? as usize,
            passed: num(pa)?,
            correct,
        });
    }
    Ok((points, quality))
}

/// Loads every report under `paths`, skipping unreadable ones with a warning.
pub fn summarize(paths: &[PathBuf]) -> Summary {
    let mut found = Vec::new();
    let mut skipped = Vec::new();
    for p in paths {
        if !p.exists() {
            skipped.push(Skipped {
                path: p.clone(),
                reason: "does not exist".into(),
            });
            continue;
        }
        find_reports(p, &mut found, &mut skipped);
    }
    let mut runs = Vec::new();
    let mut counts = Vec::new();
    let mut has_quality = true;
    for path in found {
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let report = match RunReport::load(&path) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped.push(Skipped {
                    path,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let telemetry = dir.join("telemetry.csv");
        if telemetry.is_file() {
            match read_counts(&dir.display().to_string(), &telemetry) {
                Ok((points, quality)) => {
                    has_quality &= quality;
                    counts.extend(points);
                }
                Err(e) => {
                    log::warn!("skipping telemetry {}: {e}", telemetry.display());
                    skipped.push(Skipped {
                        path: telemetry,
                        reason: e.to_string(),
                    });
                }
            }
        }
        runs.push(LoadedRun { dir, report });
    }
    has_quality &= !counts.is_empty();

    let mut by_sig: BTreeMap<String, Vec<&LoadedRun>> = BTreeMap::new();
    for r in &runs {
        by_sig.entry(r.report.mode_signature.clone()).or_default().push(r);
    }
    let groups = by_sig
        .into_iter()
        .map(|(signature, members)| {
            let col = |f: &dyn Fn(&RunReport) -> Option<f64>| {
                mean_std(&members.iter().filter_map(|r| f(&r.report)).collect::<Vec<_>>())
            };
            ReportGroup {
                mode: members[0].report.mode.clone(),
                runs: members.len(),
                accuracy: col(&|r| Some(r.headline.accuracy)),
                macro_f1: col(&|r| Some(r.headline.macro_f1)),
                precision: col(&|r| r.pseudo_labels.as_ref().and_then(|p| p.precision)),
                passed_cv: col(&|r| r.pseudo_labels.as_ref().map(|p| p.passed_cv)),
                signature,
            }
        })
        .collect();
    Summary {
        runs,
        skipped,
        groups,
        counts,
        has_quality,
    }
}

fn fmt_ms(m: &MeanStd) -> String {
    if m.n == 0 {
        "n/a".into()
    } else {
        format!("{:.4} ± {:.4}", m.mean, m.std)
    }
}

impl Summary {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Mode | Signature | Runs | Accuracy | Macro-F1 | Pseudo-label precision | Passed-count CV |\n");
        s.push_str("|---|---|---|---|---|---|---|\n");
        for g in &self.groups {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} |",
                g.mode,
                g.signature,
                g.runs,
                fmt_ms(&g.accuracy),
                fmt_ms(&g.macro_f1),
                fmt_ms(&g.precision),
                fmt_ms(&g.passed_cv)
            );
        }
        if !self.skipped.is_empty() {
            s.push_str("\nSkipped:\n\n");
            for k in &self.skipped {
                let _ = writeln!(s, "- {}: {}", k.path.display(), k.reason);
            }
        }
        s
    }

    /// Writes `summary.md`, `summary.csv`, `runs.csv`, `pseudo_label_counts.csv`
    /// and, when correctness counts exist, `pseudo_label_precision.csv`.
    pub fn write(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let md = out.join("summary.md");
        fs::write(&md, self.to_markdown()).map_err(|e| Error::io(&md, e))?;

        let path = out.join("summary.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record([
            "mode",
            "signature",
            "runs",
            "accuracy_mean",
            "accuracy_std",
            "macro_f1_mean",
            "macro_f1_std",
            "precision_mean",
            "precision_std",
            "passed_cv_mean",
            "passed_cv_std",
        ])?;
        for g in &self.groups {
            let mut rec = vec![g.mode.clone(), g.signature.clone(), g.runs.to_string()];
            for m in [&g.accuracy, &g.macro_f1, &g.precision, &g.passed_cv] {
                rec.push(m.mean.to_string());
                rec.push(m.std.to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = out.join("runs.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["run", "mode", "signature", "status", "accuracy", "macro_f1", "best_step", "split_hash"])?;
        for r in &self.runs {
            let rep = &r.report;
            w.write_record([
                r.dir.display().to_string(),
                rep.mode.clone(),
                rep.mode_signature.clone(),
                rep.status.clone(),
                rep.headline.accuracy.to_string(),
                rep.headline.macro_f1.to_string(),
                rep.best_step.to_string(),
                rep.split_hash.clone(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = out.join("pseudo_label_counts.csv");
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["run", "step", "model", "class", "passed_count"];
        if self.has_quality {
            header.push("correct_count");
        }
        w.write_record(&header)?;
        for p in &self.counts {
            let mut rec = vec![p.run.clone(), p.step.to_string(), p.model.clone(), p.class.to_string(), p.passed.to_string()];
            if self.has_quality {
                rec.push(p.correct.unwrap_or(0).to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let precision_path = out.join("pseudo_label_precision.csv");
        if self.has_quality {
            let mut agg: BTreeMap<(String, u64, String), (u64, u64)> = BTreeMap::new();
            for p in &self.counts {
                let e = agg.entry((p.run.clone(), p.step, p.model.clone())).or_default();
                e.0 += p.passed;
                e.1 += p.correct.unwrap_or(0);
            }
            let mut w = csv::Writer::from_path(&precision_path)?;
            w.write_record(["run", "step", "model", "passed_count", "correct_count", "precision"])?;
            for ((run, step, model), (passed, correct)) in agg {
                let precision = if passed == 0 {
                    String::new()
                } else {
                    (correct as f64 / passed as f64).to_string()
                };
                w.write_record([run, step.to_string(), model, passed.to_string(), correct.to_string(), precision])?;
            }
            w.flush().map_err(|e| Error::io(&precision_path, e))?;
        } else if precision_path.exists() {
            fs::remove_file(&precision_path).map_err(|e| Error::io(&precision_path, e))?;
        }
        Ok(())
    }
}
