//! Experiment runner for leave-one-domain-out studies: configuration,
//! training runs, ablation tables, paired comparisons, parameter sweeps and
//! curve export.

pub mod config;
pub mod error;
pub mod plot;
pub mod results;
pub mod runner;

pub use config::{load_config, parse_config, Ablation, DatasetSpec, ExperimentConfig, Method, Overrides, Variant};
pub use error::{CliError, CliResult};
pub use plot::{emit_plot_data, emit_plot_file, parse_plot_data, LogRow};
pub use results::{compare, CompareReport, ResultRow, ResultsTable};
pub use runner::{output_root, run, run_with, sweep, SweepRow};

/// Environment variable naming the output root.
pub const OUT_ENV: &str = "CON2EM_OUT";
