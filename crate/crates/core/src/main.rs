use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use jointmatch::harness::experiments::DEFAULT_SEEDS;
use jointmatch::harness::{ablate, run, summarize, sweep, ExperimentConfig, SweepParam, SweepSpec};
use jointmatch::trainer::Mode;
use jointmatch::Error;

#[derive(Parser)]
#[command(name = "jointmatch", version, about = "Semi-supervised text classification with cross-labeled twin classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; re-derives every per-purpose seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Mode name: full, no-adaptive, no-cross, no-disagree, fixmatch.
    #[arg(long)]
    mode: Option<String>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train {
        #[command(flatten)]
        common: Common,
        /// Run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full method and its four ablations over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Sweep one hyperparameter over a grid of values and seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// delta, lambda, tau, mu or n_labels.
        #[arg(long)]
        param: String,
        /// Comma-separated values; the published grid when omitted.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        values: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Summarize finished run directories.
    Report {
        /// Run directories or parents of run directories.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Where to write the summary files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> jointmatch::Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for o in &common.overrides {
        config.apply_override(o)?;
    }
    if let Some(seed) = common.seed {
        config.set("seed", &seed.to_string())?;
    }
    if let Some(mode) = &common.mode {
        config.train.mode = Mode::from_name(mode)?;
    }
    config.validate()?;
    Ok(config)
}

fn exit_for(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config(_) => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}

fn print_run(out: Option<&Path>, report: &jointmatch::harness::RunReport) {
    println!(
        "{}: test accuracy {:.4}, macro-F1 {:.4} (best step {}, {} steps)",
        report.mode, report.headline.accuracy, report.headline.macro_f1, report.best_step, report.steps_completed
    );
    if let Some(dir) = out {
        println!("run directory: {}", dir.display());
    }
}

fn execute(command: Command) -> Result<(), ExitCode> {
    match command {
        Command::Train { common, out } => {
            let config = load_config(&common).map_err(|e| exit_for(&e))?;
            let outcome = run(&config, out.as_deref()).map_err(|e| exit_for(&e))?;
            print_run(out.as_deref(), &outcome.report);
        }
        Command::Ablate { common, out, seeds } => {
            let config = load_config(&common).map_err(|e| exit_for(&e))?;
            let seeds = seeds.unwrap_or_else(|| DEFAULT_SEEDS.to_vec());
            let result = ablate(&config, &seeds, out.as_deref()).map_err(|e| exit_for(&e))?;
            print!("{}", result.to_markdown());
        }
        Command::Sweep {
            common,
            out,
            param,
            values,
            seeds,
        } => {
            let config = load_config(&common).map_err(|e| exit_for(&e))?;
            let parameter: SweepParam = param.parse().map_err(|e| exit_for(&e))?;
            let spec = SweepSpec {
                parameter,
                values: values.unwrap_or_else(|| parameter.paper_grid()),
                seeds: seeds.unwrap_or_else(|| DEFAULT_SEEDS.to_vec()),
            };
            let result = sweep(&spec, &config, out.as_deref()).map_err(|e| exit_for(&e))?;
            println!("| {} | Accuracy | Macro-F1 |", parameter.name());
            println!("|---|---|---|");
            for r in &result.rows {
                let a = &r.aggregate;
                println!(
                    "| {} | {:.4} ± {:.4} | {:.4} ± {:.4} |",
                    r.value, a.accuracy.mean, a.accuracy.std, a.macro_f1.mean, a.macro_f1.std
                );
            }
        }
        Command::Report { dirs, out } => {
            let summary = summarize(&dirs);
            for s in &summary.skipped {
                eprintln!("warning: skipped {}: {}", s.path.display(), s.reason);
            }
            if summary.runs.is_empty() {
                eprintln!("error: no readable reports found");
                return Err(ExitCode::from(2));
            }
            if let Some(out) = out {
                summary.write(&out).map_err(|e| exit_for(&e))?;
            }
            print!("{}", summary.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => code,
    }
}
