//! Benchmark campaigns: configuration, execution and plot data.

pub mod campaign;
pub mod config;
pub mod plot;

pub use campaign::{run_experiment, CampaignReport, RunFailure};
pub use config::{config_hash, derive_seed, ExperimentConfig, Method};
pub use plot::{emit_plot_data, PlotBundle};
