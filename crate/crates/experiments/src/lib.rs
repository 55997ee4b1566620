//! Experiment harness: configuration, cached training stages, evaluation,
//! ablations, retrieval sweeps and plot data.

pub mod config;
pub mod error;
pub mod metrics;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use error::{ExperimentError, Result, Stage};
pub use pipeline::{emit_plot_data, run_ablations, run_pipeline, run_sweep, Runner, SweepGrid};
