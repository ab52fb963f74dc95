//! Configuration-driven Monte Carlo experiments.

pub mod audit;
pub mod config;
pub mod figure;
pub mod sweep;

pub use audit::{audit_error_bound, AuditEntry, AuditReport, AuditStatus};
pub use config::{
    Algorithm, ChannelSection, CmudSection, CodeSource, ExperimentConfig, LassoSection, M0Policy, TlsSection, XiChoice,
};
pub use figure::{emit_figure_data, figure_configs, write_figure_csv, FigureId, FigureRow, GridPoint};
pub use sweep::{
    design_inputs, run_sweep, run_sweep_with_codes, summarize, sweep_moments, write_records_csv, write_timings_csv,
    PointSummary, SweepOutput, SweepSummary, TrialRecord,
};

use crate::error::{param_err, Result};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959963984540054;

/// Wilson score interval for `failures` out of `n` at 95%.
pub fn wilson_interval(failures: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = failures as f64 / n;
    let z2 = Z_95 * Z_95;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = Z_95 / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Runs `f` on a dedicated pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| param_err("threads", e.to_string()))?;
    Ok(pool.install(f))
}
