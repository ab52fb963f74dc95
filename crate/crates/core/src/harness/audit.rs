//! Empirical check of the CMUD error bound.
//!
//! For every trial the simulator knows the disturbance `w_r = [−u + ϑ]_r`, so
//! it can tell whether event Σ (`max_ℓ |D_ℓᵀw_r| ≤ τ`) occurred. On Σ trials
//! the first-iteration correlations must respect the coherence bounds. The
//! empirical P_e is compared with `(π(1+ν) ln K)^{-1/2} K^{-ν}`.
//!
//! The detector is given the true `M₀ = M`. Operating points where the
//! threshold window is empty are reported as infeasible and not simulated.

use rayon::prelude::*;
use serde::Serialize;

use super::config::{Algorithm, ExperimentConfig};
use super::sweep::{design_inputs, sweep_moments};
use crate::channel::{real_part, sample_active_set, synthesize_received};
use crate::cmud::{
    cmud_detect_real, disturbance_correlation, error_probability_bound, sigma_check, CoherenceThresholds,
};
use crate::decoder::{coherence, design_decoder_mmse_for, design_decoder_optimal, scaled_code_decoder, MmseDesigner};
use crate::error::{MudError, Result};
use crate::seed::{child_seed, label, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuditStatus {
    Audited,
    /// `τ + M₀β ≥ ½`: the bound is vacuous and nothing was simulated.
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditEntry {
    pub algorithm: Algorithm,
    #[serde(rename = "M")]
    pub m: usize,
    pub status: AuditStatus,
    pub thresholds: CoherenceThresholds,
    pub bound: f64,
    pub trials: usize,
    pub sigma_trials: usize,
    pub sigma_frequency: f64,
    /// Σ trials whose correlations broke the coherence bounds.
    pub bound_violations: usize,
    pub failures: usize,
    pub p_e: f64,
    pub standard_error: f64,
    /// Largest `max_ℓ |D_ℓᵀw_r|` over all trials.
    pub max_disturbance: f64,
    /// `p_e ≤ bound + 3·SE`.
    pub within_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub nu: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub bound: f64,
    pub entries: Vec<AuditEntry>,
}

struct TrialAudit {
    sigma: bool,
    violation: bool,
    failure: bool,
    disturbance: f64,
}

/// Audits every CMUD algorithm of the config at every `M` of `M_list`.
pub fn audit_error_bound(cfg: &ExperimentConfig) -> Result<AuditReport> {
    cfg.validate()?;
    let codes = cfg.codes.build(cfg.l, cfg.k)?;
    let params = cfg.channel.params();
    let moments = sweep_moments(cfg)?;
    let nu = cfg.cmud.nu;
    let bound = error_probability_bound(nu, cfg.k);
    let mut designer: Option<MmseDesigner> = None;
    let mut entries = Vec::new();

    for &m in &cfg.m_list {
        let m0 = m.max(1);
        let inputs = design_inputs(cfg, &moments, m0);
        for &algorithm in cfg.algorithms.iter().filter(|a| a.is_cmud()) {
            let decoder = match algorithm {
                Algorithm::CmudScaled => scaled_code_decoder(&codes).matrix,
                Algorithm::CmudD1 => match design_decoder_optimal(&codes, inputs, &cfg.cmud.solver) {
                    Ok((d, _)) => d.matrix,
                    Err(MudError::NotConverged { last_iterate, .. }) => *last_iterate,
                    Err(e) => return Err(e),
                },
                _ => {
                    let designer = designer.get_or_insert_with(|| MmseDesigner::new(&codes));
                    design_decoder_mmse_for(designer, inputs)?.matrix
                }
            };
            let th = CoherenceThresholds::from_coherence(
                coherence(&decoder, &codes)?,
                moments.mu_r,
                moments.sigma_r_sq,
                params.sigma_noise_sq,
                m0,
                nu,
                cfg.k,
            )?;
            let mut entry = AuditEntry {
                algorithm,
                m,
                status: AuditStatus::Infeasible,
                thresholds: th,
                bound,
                trials: 0,
                sigma_trials: 0,
                sigma_frequency: 0.0,
                bound_violations: 0,
                failures: 0,
                p_e: 0.0,
                standard_error: 0.0,
                max_disturbance: 0.0,
                within_bound: false,
            };
            if !th.feasible {
                entries.push(entry);
                continue;
            }

            let outcomes: Vec<TrialAudit> = (0..cfg.trials)
                .into_par_iter()
                .map(|t| {
                    let seed = child_seed(cfg.master_seed, &[label("audit"), m as u64, t as u64]);
                    let mut rng = rng_from_seed(seed);
                    let active = sample_active_set(cfg.k, m, &mut rng)?;
                    let (y, draw, model) = synthesize_received(&codes, &active, &params, &mut rng)?;
                    let y_r = real_part(&y);
                    let disturbance = disturbance_correlation(&decoder, &model.disturbance_real(&draw.noise));
                    let sigma = disturbance <= th.tau;
                    let violation = sigma && !sigma_check(&decoder, &y_r, active.indices(), &th).holds();
                    let detected = cmud_detect_real(&codes, &decoder, &y_r, &th, cfg.cmud.kappa_policy)?.detected;
                    Ok(TrialAudit {
                        sigma,
                        violation,
                        failure: detected != active.indices(),
                        disturbance,
                    })
                })
                .collect::<Result<_>>()?;

            let n = outcomes.len() as f64;
            entry.status = AuditStatus::Audited;
            entry.trials = outcomes.len();
            entry.sigma_trials = outcomes.iter().filter(|o| o.sigma).count();
            entry.sigma_frequency = entry.sigma_trials as f64 / n;
            entry.bound_violations = outcomes.iter().filter(|o| o.violation).count();
            entry.failures = outcomes.iter().filter(|o| o.failure).count();
            entry.p_e = entry.failures as f64 / n;
            entry.standard_error = (entry.p_e * (1.0 - entry.p_e) / n).sqrt();
            entry.max_disturbance = outcomes.iter().map(|o| o.disturbance).fold(0.0, f64::max);
            entry.within_bound = entry.p_e <= bound + 3.0 * entry.standard_error;
            entries.push(entry);
        }
    }
    Ok(AuditReport {
        nu,
        k: cfg.k,
        bound,
        entries,
    })
}
