//! Config ingestion, experiment grids, theory-check runs and result files.

pub mod checks;
pub mod config;
pub mod experiments;
pub mod output;

pub use checks::{run_checks, run_lower_bound, LowerBoundReport};
pub use config::{ExperimentConfig, ExperimentKind, Scale};
pub use experiments::{
    run_experiment_1, run_experiment_2, run_experiment_3, run_grid, ExperimentOutput, GroupSummary, ResultRow,
    SCHEMA_VERSION,
};

pub const THREADS_ENV: &str = "ROBUST_SYSID_THREADS";

/// Sizes the global rayon pool from `ROBUST_SYSID_THREADS` when set. Returns
/// the pool size in effect. Safe to call more than once; only the first call
/// can change the pool.
pub fn init_thread_pool() -> usize {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    rayon::current_num_threads()
}

/// Dispatches on `cfg.experiment` for the grid kinds.
pub fn run_experiment(cfg: &ExperimentConfig) -> crate::error::Result<ExperimentOutput> {
    match cfg.experiment {
        ExperimentKind::CompareLsL2 => run_experiment_1(cfg),
        ExperimentKind::CompareNorms => run_experiment_2(cfg),
        ExperimentKind::SweepTauRho => run_experiment_3(cfg),
        ExperimentKind::Custom => run_grid(cfg),
        ExperimentKind::LowerBound => Err(crate::error::invalid(
            "LowerBound configs run through run_lower_bound",
        )),
    }
}
