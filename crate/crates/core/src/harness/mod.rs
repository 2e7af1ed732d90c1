//! Configuration-driven experiments: the epsilon sweep comparing the full
//! and reduced filters, the weak metric, the rate fit and the report files.

pub mod checks;
pub mod config;
pub mod metric;
pub mod report;
pub mod study;

pub use checks::{run_corrector_scaling, run_dual_check, CorrectorScaling, DualCheckReport};
pub use config::{CorrectorCheckConfig, DualCheckConfig, ExperimentConfig, Expectation};
pub use metric::{estimate_weak_metric, weak_metric_from_values};
pub use report::{emit_report, errors_csv, write_corrector_scaling, write_dual_check};
pub use study::{
    fit_log_log, run_convergence_study, run_convergence_study_with, within_noise, BiasBudget, ConvergenceReport,
    EpsilonSummary, Failure, Fit, Gate, PhiError, BIAS_SHIFT_LIMIT,
};

use crate::error::{Error, Result};

/// Runs `f` on a dedicated pool of `workers` threads, or on the global pool
/// when `None`.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(Error::Config("worker count must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

#[cfg(test)]
mod tests;
