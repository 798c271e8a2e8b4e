//! Experiment orchestration: configuration files, per-seed training runs
//! with CSV logs and checkpoints, summaries, comparisons and plots.

pub mod compare;
pub mod config;
pub mod csv;
pub mod plot;
pub mod run;

pub use compare::{compare_variants, Comparison};
pub use config::ExperimentConfig;
pub use plot::{render_svg, PlotSeries};
pub use run::{run_experiment, run_seed, Summary};

/// Environment variable that overrides the configured output root.
pub const OUT_ENV: &str = "KINEGRAPH_OUT";

/// Apply [`OUT_ENV`] when it is set and non-empty.
pub fn apply_out_override(cfg: &mut ExperimentConfig) {
    if let Some(dir) = std::env::var_os(OUT_ENV).filter(|d| !d.is_empty()) {
        cfg.out_dir = dir.into();
    }
}
