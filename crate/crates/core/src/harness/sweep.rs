//! Monte Carlo sweep over user counts.

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{Algorithm, ChannelSection, ExperimentConfig, M0Policy};
use super::wilson_interval;
use crate::channel::{
    real_part, sample_active_set, sample_codes_with_replacement, synthesize_for_users, ChannelParams,
};
use crate::cmud::{cmud_detect_real, estimate_user_count, CoherenceThresholds};
use crate::codebook::CodeMatrix;
use crate::decoder::{
    coherence, design_decoder_mmse_for, design_decoder_optimal, scaled_code_decoder, Coherence, DesignInputs,
    MmseDesigner,
};
use crate::error::{MudError, Result};
use crate::lambda_stats::{moments, LambdaMoments};
use crate::seed::{child_seed, label, rng_from_seed};
use crate::sparse_tls::{lasso_detect_real, lp_tls_detect_real, TlsTermination};

/// One detection attempt.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub sigma_e: f64,
    pub sigma_eta: f64,
    pub sigma_theta: f64,
    pub algorithm: Algorithm,
    pub exact_success: bool,
    pub missed: usize,
    pub false_alarms: usize,
    pub child_seed: u64,
    /// Wall time; written to the separate timings file.
    #[serde(skip)]
    pub runtime_ms: f64,
    /// The solver hit its iteration budget.
    #[serde(skip)]
    pub unconverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointSummary {
    pub algorithm: Algorithm,
    #[serde(rename = "M")]
    pub m: usize,
    pub trials: usize,
    pub failures: usize,
    pub p_e: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_missed: f64,
    pub mean_false_alarms: f64,
    pub unconverged: usize,
    pub mean_runtime_ms: f64,
}

/// Decoder used at one sweep point, with its thresholds at the nominal `M₀ = M`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecoderReport {
    #[serde(rename = "M")]
    pub m: usize,
    pub algorithm: Algorithm,
    pub coherence: Coherence,
    pub nominal: CoherenceThresholds,
    /// Reused from an earlier point within the drift tolerance.
    pub reused: bool,
    pub design_iterations: Option<usize>,
    pub design_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserCountSummary {
    #[serde(rename = "M")]
    pub m: usize,
    pub mean_estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub channel: ChannelSection,
    pub moments: LambdaMoments,
    pub points: Vec<PointSummary>,
    pub decoders: Vec<DecoderReport>,
    pub user_count: Vec<UserCountSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    /// Sorted by `(M, algorithm, trial)`.
    pub records: Vec<TrialRecord>,
    pub summary: SweepSummary,
}

impl SweepOutput {
    pub fn point(&self, algorithm: Algorithm, m: usize) -> Option<&PointSummary> {
        self.summary
            .points
            .iter()
            .find(|p| p.algorithm == algorithm && p.m == m)
    }
}

struct PreparedDecoder {
    algorithm: Algorithm,
    matrix: Arc<DMatrix<f64>>,
    coherence: Coherence,
}

/// Designed decoders kept across sweep points.
struct DecoderCache {
    designer: Option<MmseDesigner>,
    scaled: Option<(Arc<DMatrix<f64>>, Coherence)>,
    designed: Vec<(Algorithm, DesignInputs, Arc<DMatrix<f64>>, Coherence)>,
}

impl DecoderCache {
    fn new() -> Self {
        Self {
            designer: None,
            scaled: None,
            designed: Vec::new(),
        }
    }

    fn get(
        &mut self,
        algorithm: Algorithm,
        codes: &CodeMatrix,
        inputs: DesignInputs,
        cfg: &ExperimentConfig,
    ) -> Result<(PreparedDecoder, bool, Option<usize>, bool)> {
        let prepared = |matrix: Arc<DMatrix<f64>>, coherence| PreparedDecoder {
            algorithm,
            matrix,
            coherence,
        };
        if algorithm == Algorithm::CmudScaled {
            let reused = self.scaled.is_some();
            let (m, c) = match &self.scaled {
                Some(entry) => entry.clone(),
                None => {
                    let d = scaled_code_decoder(codes).matrix;
                    let coh = coherence(&d, codes)?;
                    let entry = (Arc::new(d), coh);
                    self.scaled = Some(entry.clone());
                    entry
                }
            };
            return Ok((prepared(m, c), reused, None, true));
        }
        if let Some((_, _, m, c)) = self
            .designed
            .iter()
            .find(|(a, snap, _, _)| *a == algorithm && !snap.drifted(&inputs, cfg.cmud.design_drift))
        {
            return Ok((prepared(m.clone(), *c), true, None, true));
        }
        let (matrix, iterations, converged) = match algorithm {
            Algorithm::CmudD1 => match design_decoder_optimal(codes, inputs, &cfg.cmud.solver) {
                Ok((d, report)) => (d.matrix, Some(report.iterations), true),
                Err(MudError::NotConverged {
                    iterations,
                    last_iterate,
                    ..
                }) => (*last_iterate, Some(iterations), false),
                Err(e) => return Err(e),
            },
            Algorithm::CmudD2 => {
                let designer = self.designer.get_or_insert_with(|| MmseDesigner::new(codes));
                (design_decoder_mmse_for(designer, inputs)?.matrix, None, true)
            }
            _ => unreachable!("only CMUD algorithms carry decoders"),
        };
        let coh = coherence(&matrix, codes)?;
        let matrix = Arc::new(matrix);
        self.designed.push((algorithm, inputs, matrix.clone(), coh));
        Ok((prepared(matrix, coh), false, iterations, converged))
    }
}

/// Per-point quantities shared by every trial.
struct PointContext<'a> {
    cfg: &'a ExperimentConfig,
    codes: &'a CodeMatrix,
    params: ChannelParams,
    moments: LambdaMoments,
    m: usize,
    decoders: Vec<PreparedDecoder>,
    lasso_xi: f64,
    tls_xi: f64,
}

struct TrialOutcome {
    records: Vec<TrialRecord>,
    m_hat: usize,
}

/// Draws the users of trial `trial` at load `m` and runs every configured
/// algorithm on the same received vector.
fn run_trial(ctx: &PointContext<'_>, trial: usize) -> Result<TrialOutcome> {
    let cfg = ctx.cfg;
    let k = ctx.codes.num_codes();
    let seed = child_seed(cfg.master_seed, &[ctx.m as u64, trial as u64]);
    let mut rng = rng_from_seed(seed);
    let users = if cfg.allow_collisions {
        sample_codes_with_replacement(k, ctx.m, &mut rng)
    } else {
        sample_active_set(k, ctx.m, &mut rng)?.indices().to_vec()
    };
    let truth: BTreeSet<usize> = users.iter().copied().collect();
    let (y, _, _) = synthesize_for_users(ctx.codes, &users, &ctx.params, &mut rng)?;
    let y_r = real_part(&y);
    let sigma_noise_sq = ctx.params.sigma_noise_sq;
    let m_hat = estimate_user_count(&y, &ctx.moments, sigma_noise_sq, k)?;
    let m0 = match cfg.cmud.m0_policy {
        M0Policy::Estimated => m_hat.max(1),
        M0Policy::Fixed => cfg.cmud.m0.unwrap_or(1),
        M0Policy::True => ctx.m.max(1),
    };

    let mut records = Vec::with_capacity(cfg.algorithms.len());
    for &algorithm in &cfg.algorithms {
        let start = Instant::now();
        let (support, unconverged) = match algorithm {
            Algorithm::Lasso => {
                let out = lasso_detect_real(ctx.codes.matrix(), &y_r, ctx.lasso_xi, &cfg.lasso.options())?;
                (out.support, !out.converged)
            }
            Algorithm::Tls => {
                let out = lp_tls_detect_real(ctx.codes, &y_r, &cfg.tls.solver_config(ctx.tls_xi))?;
                (out.support, out.termination == TlsTermination::Budget)
            }
            _ => {
                let dec = ctx
                    .decoders
                    .iter()
                    .find(|d| d.algorithm == algorithm)
                    .expect("decoders are prepared for every CMUD algorithm");
                let th = CoherenceThresholds::from_coherence(
                    dec.coherence,
                    ctx.moments.mu_r,
                    ctx.moments.sigma_r_sq,
                    sigma_noise_sq,
                    m0,
                    cfg.cmud.nu,
                    k,
                )?;
                let out = cmud_detect_real(ctx.codes, &dec.matrix, &y_r, &th, cfg.cmud.kappa_policy)?;
                (out.detected, false)
            }
        };
        let runtime_ms = start.elapsed().as_secs_f64() * 1e3;
        let found: BTreeSet<usize> = support.into_iter().collect();
        let missed = truth.difference(&found).count();
        let false_alarms = found.difference(&truth).count();
        records.push(TrialRecord {
            trial,
            m: ctx.m,
            k,
            l: ctx.codes.len(),
            sigma_e: cfg.channel.sigma_e,
            sigma_eta: cfg.channel.sigma_eta,
            sigma_theta: cfg.channel.sigma_theta,
            algorithm,
            exact_success: missed == 0 && false_alarms == 0,
            missed,
            false_alarms,
            child_seed: seed,
            runtime_ms,
            unconverged,
        });
    }
    Ok(TrialOutcome { records, m_hat })
}

/// λ moments for the configured channel, from a seed reserved for them.
pub fn sweep_moments(cfg: &ExperimentConfig) -> Result<LambdaMoments> {
    let mut rng = rng_from_seed(child_seed(cfg.master_seed, &[label("moments")]));
    moments(&cfg.channel.params(), cfg.varrho, &mut rng)
}

/// Design snapshot for a nominal user count.
pub fn design_inputs(cfg: &ExperimentConfig, moments: &LambdaMoments, m0: usize) -> DesignInputs {
    DesignInputs {
        epsilon: m0 as f64 / cfg.k as f64,
        mu_r: moments.mu_r,
        m2_r: moments.m2_r,
        sigma_r_sq: moments.sigma_r_sq,
        sigma_noise_sq: cfg.channel.params().sigma_noise_sq,
        m0,
        nu: cfg.cmud.nu,
    }
}

/// Runs every `(M, trial, algorithm)` combination of the config.
///
/// Trials run on the current rayon pool; the output does not depend on its size.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutput> {
    cfg.validate()?;
    let codes = cfg.codes.build(cfg.l, cfg.k)?;
    run_sweep_with_codes(cfg, &codes)
}

pub fn run_sweep_with_codes(cfg: &ExperimentConfig, codes: &CodeMatrix) -> Result<SweepOutput> {
    cfg.validate()?;
    if (codes.len(), codes.num_codes()) != (cfg.l, cfg.k) {
        return Err(MudError::Dimension(format!(
            "code bank is {}x{}, config asks for L={}, K={}",
            codes.len(),
            codes.num_codes(),
            cfg.l,
            cfg.k
        )));
    }
    let params = cfg.channel.params();
    let moments = sweep_moments(cfg)?;
    let mut cache = DecoderCache::new();
    let mut records = Vec::with_capacity(cfg.trials * cfg.m_list.len() * cfg.algorithms.len());
    let mut decoder_reports = Vec::new();
    let mut user_count = Vec::new();

    for &m in &cfg.m_list {
        let inputs = design_inputs(cfg, &moments, m.max(1));
        let mut decoders = Vec::new();
        for &algorithm in cfg.algorithms.iter().filter(|a| a.is_cmud()) {
            let (dec, reused, design_iterations, design_converged) = cache.get(algorithm, codes, inputs, cfg)?;
            decoder_reports.push(DecoderReport {
                m,
                algorithm,
                coherence: dec.coherence,
                nominal: CoherenceThresholds::from_coherence(
                    dec.coherence,
                    moments.mu_r,
                    moments.sigma_r_sq,
                    params.sigma_noise_sq,
                    m.max(1),
                    cfg.cmud.nu,
                    cfg.k,
                )?,
                reused,
                design_iterations,
                design_converged,
            });
            decoders.push(dec);
        }
        let ctx = PointContext {
            cfg,
            codes,
            params,
            moments,
            m,
            decoders,
            lasso_xi: cfg
                .lasso
                .xi
                .resolve(cfg.k, m, moments.sigma_r_sq, params.sigma_noise_sq),
            tls_xi: cfg.tls.xi.resolve(cfg.k, m, moments.sigma_r_sq, params.sigma_noise_sq),
        };
        let outcomes: Vec<TrialOutcome> = (0..cfg.trials)
            .into_par_iter()
            .map(|t| run_trial(&ctx, t))
            .collect::<Result<_>>()?;
        let m_hat_sum: usize = outcomes.iter().map(|o| o.m_hat).sum();
        user_count.push(UserCountSummary {
            m,
            mean_estimate: m_hat_sum as f64 / cfg.trials as f64,
        });
        records.extend(outcomes.into_iter().flat_map(|o| o.records));
    }

    records.sort_by_key(|r| (r.m, r.algorithm, r.trial));
    let points = summarize(&records);
    Ok(SweepOutput {
        records,
        summary: SweepSummary {
            l: cfg.l,
            k: cfg.k,
            channel: cfg.channel,
            moments,
            points,
            decoders: decoder_reports,
            user_count,
        },
    })
}

/// P_e with Wilson intervals per `(M, algorithm)`, from sorted records.
pub fn summarize(records: &[TrialRecord]) -> Vec<PointSummary> {
    records
        .chunk_by(|a, b| (a.m, a.algorithm) == (b.m, b.algorithm))
        .map(|group| {
            let n = group.len();
            let failures = group.iter().filter(|r| !r.exact_success).count();
            let (ci_low, ci_high) = wilson_interval(failures, n);
            let mean = |f: &dyn Fn(&TrialRecord) -> f64| group.iter().map(f).sum::<f64>() / n as f64;
            PointSummary {
                algorithm: group[0].algorithm,
                m: group[0].m,
                trials: n,
                failures,
                p_e: failures as f64 / n as f64,
                ci_low,
                ci_high,
                mean_missed: mean(&|r| r.missed as f64),
                mean_false_alarms: mean(&|r| r.false_alarms as f64),
                unconverged: group.iter().filter(|r| r.unconverged).count(),
                mean_runtime_ms: mean(&|r| r.runtime_ms),
            }
        })
        .collect()
}

/// Writes the deterministic per-trial CSV.
pub fn write_records_csv<W: Write>(records: &[TrialRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `trial, M, algorithm, runtime_ms`.
pub fn write_timings_csv<W: Write>(records: &[TrialRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["trial", "M", "algorithm", "runtime_ms"])
        .map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.trial.to_string(),
            r.m.to_string(),
            r.algorithm.to_string(),
            format!("{:.3}", r.runtime_ms),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> MudError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => MudError::Io(io),
        other => MudError::Format(format!("csv: {other:?}")),
    }
}
