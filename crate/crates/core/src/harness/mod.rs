//! Experiment orchestration: configuration, single runs, ablation and sweep
//! batteries, metrics and report summaries.

pub mod config;
pub mod experiments;
pub mod metrics;
pub mod report;
pub mod run;

pub use config::{DataConfig, ExperimentConfig, TextDataConfig};
pub use experiments::{ablate, sweep, AblationResult, Aggregate, SeedResult, SweepParam, SweepResult, SweepSpec};
pub use report::{summarize, Summary};
pub use run::{run, run_with_data, RunOutcome, RunReport};
