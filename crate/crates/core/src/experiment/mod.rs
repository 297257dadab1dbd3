//! Configuration, seed sweeps and serialized outputs.

pub mod config;
pub mod csv;
pub mod runner;
pub mod summary;

pub use config::{parse_config, ExperimentConfig, RawConfig};
pub use csv::{emit_csv, parse_csv, to_csv_string};
pub use runner::{compare_head_ablation, run_experiment, run_seed, ExperimentOutcome, RunArtifacts};
pub use summary::{AblationReport, Aggregate, RunSummary};
