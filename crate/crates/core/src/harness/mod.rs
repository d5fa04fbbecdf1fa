//! Configuration layering, the experiment runner, reconstruction reports and
//! the `smit` command line.

pub mod cli;
pub mod config;
pub mod experiment;
pub mod pipeline;
pub mod recon;
pub mod results;

pub use cli::run_command;
pub use experiment::{run_experiment, ExperimentKind, ExperimentSpec};
pub use pipeline::{cross_validate, run_pipeline, PipelineConfig};
pub use recon::{reconstruct_report, ReconReport};
pub use results::{read_rows, ResultRow};
