//! Correlation-based multiuser detection (CMUD).
//!
//! The detector works on the real part of the received vector. Each iteration
//! correlates every decoder column with the residual, declares the codes whose
//! correlation magnitude exceeds `κ`, and subtracts them from the residual.
//! Thresholds come from the coherence statistics of the decoder:
//!
//! ```text
//! Υ = sqrt(2(1+ν) ln K) · sqrt(M₀σ_r² + σ_ϑ²/2)
//! τ = ε μ_r α + γ Υ,   ε = M₀/K
//! κ ∈ (τ + M₀β, 1 − M₀β − τ)
//! ```
//!
//! The window is nonempty exactly when `τ + M₀β < ½`. Outside that regime the
//! detector still runs, with `κ = ½`, but carries no guarantee.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::real_part;
use crate::codebook::CodeMatrix;
use crate::decoder::{coherence, upsilon};
use crate::error::{param_err, MudError, Result};
use crate::lambda_stats::LambdaMoments;

/// Threshold quantities for one decoder and operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoherenceThresholds {
    pub coh_alpha: f64,
    pub coh_beta: f64,
    pub coh_gamma: f64,
    pub nu: f64,
    pub m0: usize,
    pub k: usize,
    pub epsilon: f64,
    pub mu_r: f64,
    pub upsilon: f64,
    pub tau: f64,
    /// Open interval `(τ + M₀β, 1 − M₀β − τ)`; empty when infeasible.
    pub kappa_window: (f64, f64),
    pub feasible: bool,
}

impl CoherenceThresholds {
    /// Builds the thresholds from already computed coherence statistics.
    pub fn from_coherence(
        coh: crate::decoder::Coherence,
        mu_r: f64,
        sigma_r_sq: f64,
        sigma_noise_sq: f64,
        m0: usize,
        nu: f64,
        k: usize,
    ) -> Result<Self> {
        if m0 == 0 {
            return Err(param_err("M0", "must be at least 1"));
        }
        if !(nu > 0.0) {
            return Err(param_err("nu", format!("must be positive, got {nu}")));
        }
        if k == 0 {
            return Err(param_err("K", "must be positive"));
        }
        let epsilon = m0 as f64 / k as f64;
        let ups = upsilon(nu, k, m0, sigma_r_sq, sigma_noise_sq);
        let tau = epsilon * mu_r * coh.alpha + coh.gamma * ups;
        let m0f = m0 as f64;
        let window = (tau + m0f * coh.beta, 1.0 - m0f * coh.beta - tau);
        Ok(Self {
            coh_alpha: coh.alpha,
            coh_beta: coh.beta,
            coh_gamma: coh.gamma,
            nu,
            m0,
            k,
            epsilon,
            mu_r,
            upsilon: ups,
            tau,
            kappa_window: window,
            feasible: tau + m0f * coh.beta < 0.5,
        })
    }

    /// Analytic bound on the error probability when the condition holds:
    /// `(π(1+ν) ln K)^{-1/2} K^{-ν}`.
    pub fn error_bound(&self) -> f64 {
        error_probability_bound(self.nu, self.k)
    }
}

/// `(π(1+ν) ln K)^{-1/2} K^{-ν}`.
pub fn error_probability_bound(nu: f64, k: usize) -> f64 {
    let kf = k as f64;
    (std::f64::consts::PI * (1.0 + nu) * kf.ln()).powf(-0.5) * kf.powf(-nu)
}

/// Fills the threshold record for decoder `D` and code bank `C`.
pub fn compute_thresholds(
    decoder: &DMatrix<f64>,
    codes: &CodeMatrix,
    moments: &LambdaMoments,
    sigma_noise_sq: f64,
    m0: usize,
    nu: f64,
) -> Result<CoherenceThresholds> {
    let coh = coherence(decoder, codes)?;
    CoherenceThresholds::from_coherence(
        coh,
        moments.mu_r,
        moments.sigma_r_sq,
        sigma_noise_sq,
        m0,
        nu,
        codes.num_codes(),
    )
}

/// How `κ` is chosen at each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum KappaPolicy {
    /// Midpoint of the window that remains after `m` detections,
    /// `((M₀−m)β + τ, 1 − (M₀−m−1)β − τ)`, clamped to `[τ, 1]`. Falls back to
    /// the midpoint of `(τ, 1−τ)` (or `½`) when the condition fails.
    #[default]
    Window,
    /// A constant threshold.
    Fixed(f64),
}

impl KappaPolicy {
    pub fn kappa(&self, th: &CoherenceThresholds, detected: usize) -> f64 {
        match *self {
            KappaPolicy::Fixed(k) => k,
            KappaPolicy::Window if th.feasible => {
                let rem = th.m0.saturating_sub(detected) as f64;
                let lo = rem * th.coh_beta + th.tau;
                let hi = 1.0 - (rem - 1.0) * th.coh_beta - th.tau;
                (0.5 * (lo + hi)).clamp(th.tau, 1.0)
            }
            KappaPolicy::Window if th.tau < 0.5 => 0.5 * (th.tau + 1.0 - th.tau),
            KappaPolicy::Window => 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationTrace {
    pub kappa: f64,
    pub added: Vec<usize>,
    /// `‖z⁽ʲ⁾‖₂` after the subtraction.
    pub residual_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    /// No correlation exceeded `κ`.
    EmptySet,
    /// `M₀` iterations were used.
    Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionResult {
    /// Detected code indices, sorted, 0-based.
    pub detected: Vec<usize>,
    pub trace: Vec<IterationTrace>,
    pub iterations: usize,
    pub terminated_by: Termination,
    /// False when the thresholds were infeasible.
    pub guaranteed: bool,
}

/// Runs the correlation detector on the received vector `y`.
///
/// Codes already detected are excluded from later threshold tests.
pub fn cmud_detect(
    codes: &CodeMatrix,
    decoder: &DMatrix<f64>,
    y: &[Complex64],
    thresholds: &CoherenceThresholds,
    policy: KappaPolicy,
) -> Result<DetectionResult> {
    cmud_detect_real(codes, decoder, &real_part(y), thresholds, policy)
}

/// [`cmud_detect`] on an already real-valued observation.
pub fn cmud_detect_real(
    codes: &CodeMatrix,
    decoder: &DMatrix<f64>,
    y_r: &DVector<f64>,
    thresholds: &CoherenceThresholds,
    policy: KappaPolicy,
) -> Result<DetectionResult> {
    let c = codes.matrix();
    if decoder.shape() != c.shape() {
        return Err(MudError::Dimension(format!(
            "decoder is {:?} but codes are {:?}",
            decoder.shape(),
            c.shape()
        )));
    }
    if y_r.len() != c.nrows() {
        return Err(MudError::Dimension(format!(
            "received vector has length {}, expected L={}",
            y_r.len(),
            c.nrows()
        )));
    }

    let mut z = y_r.clone();
    let mut found = BTreeSet::new();
    let mut trace = Vec::new();
    let mut terminated_by = Termination::Budget;
    let dt = decoder.transpose();

    for _ in 0..thresholds.m0 {
        let kappa = policy.kappa(thresholds, found.len());
        let corr = &dt * &z;
        let added: Vec<usize> = corr
            .iter()
            .enumerate()
            .filter(|&(j, v)| v.abs() > kappa && !found.contains(&j))
            .map(|(j, _)| j)
            .collect();
        if added.is_empty() {
            terminated_by = Termination::EmptySet;
            break;
        }
        for &j in &added {
            z -= c.column(j);
            found.insert(j);
        }
        trace.push(IterationTrace {
            kappa,
            added,
            residual_norm: z.norm(),
        });
    }

    Ok(DetectionResult {
        detected: found.into_iter().collect(),
        iterations: trace.len(),
        trace,
        terminated_by,
        guaranteed: thresholds.feasible,
    })
}

/// Energy-based estimate of the number of active users,
/// `round((‖y_r‖² − Lσ_ϑ²/2) / (L(1 − 2μ_r + m2_r)))` clamped to `[0, K]`.
pub fn estimate_user_count(y: &[Complex64], moments: &LambdaMoments, sigma_noise_sq: f64, k: usize) -> Result<usize> {
    let l = y.len();
    if l == 0 {
        return Err(param_err("L", "received vector is empty"));
    }
    let per_user = 1.0 - 2.0 * moments.mu_r + moments.m2_r;
    if !(per_user > 0.0) {
        return Err(param_err(
            "moments",
            format!("1 − 2μ_r + m2_r must be positive, got {per_user}"),
        ));
    }
    let energy: f64 = y.iter().map(|c| c.re * c.re).sum();
    let lf = l as f64;
    let m_hat = ((energy - lf * sigma_noise_sq / 2.0) / (lf * per_user)).round();
    Ok(m_hat.clamp(0.0, k as f64) as usize)
}

/// `max_ℓ |D_ℓᵀ w_r|` for the real disturbance `w_r = [−u + ϑ]_r`. Event Σ
/// holds when this is at most `τ`.
pub fn disturbance_correlation(decoder: &DMatrix<f64>, w_r: &DVector<f64>) -> f64 {
    (decoder.transpose() * w_r).amax()
}

/// Correlation bounds that hold on event Σ for `M` active codes:
/// inactive codes stay at or below `Mβ + τ`, active ones at or above
/// `1 − (M−1)β − τ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SigmaCheck {
    pub max_inactive: f64,
    pub min_active: f64,
    pub inactive_bound: f64,
    pub active_bound: f64,
}

impl SigmaCheck {
    pub fn holds(&self) -> bool {
        self.max_inactive <= self.inactive_bound && self.min_active >= self.active_bound
    }
}

/// Measures the first-iteration correlations against the event-Σ bounds.
pub fn sigma_check(
    decoder: &DMatrix<f64>,
    y_r: &DVector<f64>,
    active: &[usize],
    th: &CoherenceThresholds,
) -> SigmaCheck {
    let corr = decoder.transpose() * y_r;
    let m = active.len() as f64;
    let mut max_inactive = 0.0f64;
    let mut min_active = f64::INFINITY;
    for (j, v) in corr.iter().enumerate() {
        if active.contains(&j) {
            min_active = min_active.min(v.abs());
        } else {
            max_inactive = max_inactive.max(v.abs());
        }
    }
    SigmaCheck {
        max_inactive,
        min_active,
        inactive_bound: m * th.coh_beta + th.tau,
        active_bound: 1.0 - (m - 1.0) * th.coh_beta - th.tau,
    }
}
