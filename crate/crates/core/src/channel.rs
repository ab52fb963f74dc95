//! Channel mismatch model and received-signal synthesis.
//!
//! Each active user `m` picks code `k_m` and pre-equalizes it with its pilot
//! estimate `ĥ = h + e` of the channel. By the time the burst reaches the base
//! station the channel has aged to `αh + η`, so subcarrier `l` carries
//!
//! ```text
//! y_l = Σ_m C_{l,k_m} (αh + η)/(h + e) + ϑ_l
//!     = Σ_m C_{l,k_m} (1 − λ_{l,m}) + ϑ_l,   λ = ((1−α)h + e − η)/(h + e)
//! ```
//!
//! which is the sparse model `y = C x̊ − u + ϑ` with `u = Q x̊` and
//! `Q_{l,k} = C_{l,k} λ_{l,k}` on the active columns.
//!
//! The per-subcarrier channel is drawn i.i.d. `CN(0, σ_h²)`; all users share a
//! single [`ChannelParams`] (the ranging procedure equalizes their powers).

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codebook::CodeMatrix;
use crate::error::{param_err, Result};

/// Mismatch and noise statistics shared by every user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Channel frequency response variance `σ_h²`.
    pub sigma_h_sq: f64,
    /// Pilot estimation noise variance `σ_e²`.
    pub sigma_e_sq: f64,
    /// Channel aging noise variance `σ_η²`.
    pub sigma_eta_sq: f64,
    /// Phase of the aging coefficient `α = e^{iθ}`, in degrees.
    pub theta_deg: f64,
    /// Receiver noise variance `σ_ϑ²`.
    pub sigma_noise_sq: f64,
}

impl ChannelParams {
    /// Builds parameters from standard deviations, which is how the
    /// experiments are usually described.
    pub fn from_std(sigma_h: f64, sigma_e: f64, sigma_eta: f64, theta_deg: f64, sigma_noise: f64) -> Self {
        Self {
            sigma_h_sq: sigma_h * sigma_h,
            sigma_e_sq: sigma_e * sigma_e,
            sigma_eta_sq: sigma_eta * sigma_eta,
            theta_deg,
            sigma_noise_sq: sigma_noise * sigma_noise,
        }
    }

    /// `α = e^{iθ}`.
    pub fn alpha(&self) -> Complex64 {
        Complex64::from_polar(1.0, self.theta_deg.to_radians())
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("sigma_h_sq", self.sigma_h_sq),
            ("sigma_e_sq", self.sigma_e_sq),
            ("sigma_eta_sq", self.sigma_eta_sq),
            ("sigma_noise_sq", self.sigma_noise_sq),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(param_err(name, format!("variance must be finite and >= 0, got {v}")));
            }
        }
        if self.sigma_h_sq <= 0.0 {
            return Err(param_err("sigma_h_sq", "channel variance must be positive"));
        }
        if !self.theta_deg.is_finite() {
            return Err(param_err("theta_deg", "must be finite"));
        }
        Ok(())
    }
}

/// Indices of the active codes (0-based, sorted, distinct).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveSet {
    indices: Vec<usize>,
}

impl ActiveSet {
    pub fn new(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self { indices }
    }

    pub fn empty() -> Self {
        Self { indices: Vec::new() }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// `M`, the number of active users.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.indices.binary_search(&j).is_ok()
    }
}

/// Draws `M` distinct codes uniformly out of `K`.
pub fn sample_active_set<R: Rng + ?Sized>(k: usize, m: usize, rng: &mut R) -> Result<ActiveSet> {
    if m > k {
        return Err(param_err("M", format!("cannot pick {m} distinct codes out of {k}")));
    }
    Ok(ActiveSet::new(index::sample(rng, k, m).into_vec()))
}

/// Draws one code per user with replacement, so two users may collide.
pub fn sample_codes_with_replacement<R: Rng + ?Sized>(k: usize, m: usize, rng: &mut R) -> Vec<usize> {
    (0..m).map(|_| rng.random_range(0..k)).collect()
}

/// Circularly-symmetric complex Gaussian with variance `var`.
pub(crate) fn complex_normal<R: Rng + ?Sized>(var: f64, rng: &mut R) -> Complex64 {
    if var == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// One draw of the per-subcarrier, per-user mismatch quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MismatchSample {
    pub h: Complex64,
    pub e: Complex64,
    pub eta: Complex64,
    pub lambda: Complex64,
}

impl MismatchSample {
    /// Effective gain `(αh + η)/(h + e)` seen by the base station.
    pub fn effective_gain(&self, alpha: Complex64) -> Complex64 {
        (alpha * self.h + self.eta) / (self.h + self.e)
    }
}

/// Draws `h, e, η` and forms `λ`; redraws when `|h + e|` is numerically zero.
pub fn sample_mismatch<R: Rng + ?Sized>(params: &ChannelParams, rng: &mut R) -> Result<MismatchSample> {
    let sigma_v_sq = params.sigma_h_sq + params.sigma_e_sq;
    if !(sigma_v_sq > 0.0) {
        return Err(param_err("sigma_h_sq", "σ_h² + σ_e² must be positive"));
    }
    let floor = 1e-12 * sigma_v_sq.sqrt();
    let alpha = params.alpha();
    loop {
        let h = complex_normal(params.sigma_h_sq, rng);
        let e = complex_normal(params.sigma_e_sq, rng);
        let eta = complex_normal(params.sigma_eta_sq, rng);
        let den = h + e;
        if den.norm() < floor {
            continue;
        }
        let lambda = ((Complex64::new(1.0, 0.0) - alpha) * h + e - eta) / den;
        return Ok(MismatchSample { h, e, eta, lambda });
    }
}

/// A single mismatch ratio `λ`.
pub fn sample_lambda<R: Rng + ?Sized>(params: &ChannelParams, rng: &mut R) -> Result<Complex64> {
    sample_mismatch(params, rng).map(|s| s.lambda)
}

/// All random quantities behind one received vector.
#[derive(Debug, Clone)]
pub struct ChannelDraw {
    /// Code index of each user, in user order.
    pub user_codes: Vec<usize>,
    /// `L x M` per-subcarrier, per-user samples (column `m` is user `m`).
    pub samples: Vec<Vec<MismatchSample>>,
    /// Transmitted pre-equalized symbols `x_{l,m} = C_{l,k_m}/ĥ_{l,m}`.
    pub transmitted: Vec<Vec<Complex64>>,
    /// Receiver noise `ϑ`.
    pub noise: Vec<Complex64>,
    /// Received vector `y`.
    pub y: Vec<Complex64>,
}

/// The sparse representation `y = C x̊ − Q x̊ + ϑ`.
#[derive(Debug, Clone)]
pub struct SparseModel {
    /// Activity vector `x̊` (ones at active codes; counts under collisions).
    pub x_ring: DVector<f64>,
    /// Mismatch matrix `Q` (zero outside the active columns).
    pub q: DMatrix<Complex64>,
    /// `u = Q x̊`.
    pub u: Vec<Complex64>,
    /// `ε = M/K`.
    pub epsilon: f64,
}

impl SparseModel {
    /// Evaluates `C x̊ − u + ϑ`.
    pub fn reconstruct(&self, codes: &CodeMatrix, noise: &[Complex64]) -> Vec<Complex64> {
        let cx = codes.matrix() * &self.x_ring;
        cx.iter()
            .zip(&self.u)
            .zip(noise)
            .map(|((&c, &u), &n)| Complex64::new(c, 0.0) - u + n)
            .collect()
    }

    /// Real part of the effective disturbance `−u + ϑ`.
    pub fn disturbance_real(&self, noise: &[Complex64]) -> DVector<f64> {
        DVector::from_iterator(self.u.len(), self.u.iter().zip(noise).map(|(u, n)| (-u + n).re))
    }
}

/// Synthesizes the received vector for the active set `active`.
pub fn synthesize_received<R: Rng + ?Sized>(
    codes: &CodeMatrix,
    active: &ActiveSet,
    params: &ChannelParams,
    rng: &mut R,
) -> Result<(Vec<Complex64>, ChannelDraw, SparseModel)> {
    synthesize_for_users(codes, active.indices(), params, rng)
}

/// Like [`synthesize_received`] but takes the code chosen by each user, which
/// may repeat when collisions are allowed.
pub fn synthesize_for_users<R: Rng + ?Sized>(
    codes: &CodeMatrix,
    user_codes: &[usize],
    params: &ChannelParams,
    rng: &mut R,
) -> Result<(Vec<Complex64>, ChannelDraw, SparseModel)> {
    params.validate()?;
    let l = codes.len();
    let k = codes.num_codes();
    if let Some(&bad) = user_codes.iter().find(|&&j| j >= k) {
        return Err(param_err("active", format!("code index {bad} out of range for K={k}")));
    }
    let alpha = params.alpha();

    let mut samples = Vec::with_capacity(user_codes.len());
    let mut transmitted = Vec::with_capacity(user_codes.len());
    let mut y = vec![Complex64::new(0.0, 0.0); l];
    let mut x_ring = DVector::zeros(k);
    let mut q = DMatrix::from_element(l, k, Complex64::new(0.0, 0.0));

    for &code in user_codes {
        let mut user_samples = Vec::with_capacity(l);
        let mut user_tx = Vec::with_capacity(l);
        for (row, y_l) in y.iter_mut().enumerate() {
            let s = sample_mismatch(params, rng)?;
            let chip = codes.get(row, code);
            user_tx.push(Complex64::new(chip, 0.0) / (s.h + s.e));
            *y_l += chip * s.effective_gain(alpha);
            q[(row, code)] += chip * s.lambda;
            user_samples.push(s);
        }
        x_ring[code] += 1.0;
        samples.push(user_samples);
        transmitted.push(user_tx);
    }
    // With collisions Q_k holds the summed mismatch of every user on code k;
    // rescale so that u = Q x̊ still reproduces it exactly.
    for (j, &count) in x_ring.iter().enumerate() {
        if count > 1.0 {
            q.column_mut(j).unscale_mut(count);
        }
    }

    let noise: Vec<Complex64> = (0..l).map(|_| complex_normal(params.sigma_noise_sq, rng)).collect();
    for (y_l, n) in y.iter_mut().zip(&noise) {
        *y_l += n;
    }

    let u: Vec<Complex64> = (0..l)
        .map(|row| {
            x_ring
                .iter()
                .enumerate()
                .filter(|(_, &x)| x != 0.0)
                .map(|(j, &x)| q[(row, j)] * x)
                .sum()
        })
        .collect();

    let model = SparseModel {
        x_ring,
        q,
        u,
        epsilon: user_codes.len() as f64 / k as f64,
    };
    let draw = ChannelDraw {
        user_codes: user_codes.to_vec(),
        samples,
        transmitted,
        noise,
        y: y.clone(),
    };
    Ok((y, draw, model))
}

/// Real part of a complex vector as a dense real vector.
pub fn real_part(y: &[Complex64]) -> DVector<f64> {
    DVector::from_iterator(y.len(), y.iter().map(|c| c.re))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::generate_code_matrix;
    use crate::seed::rng_from_seed;

    fn max_abs_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn active_set_extremes() {
        let mut rng = rng_from_seed(1);
        assert!(sample_active_set(8, 0, &mut rng).unwrap().is_empty());
        assert_eq!(
            sample_active_set(8, 8, &mut rng).unwrap().indices(),
            &[0, 1, 2, 3, 4, 5, 6, 7]
        );
        assert!(sample_active_set(8, 9, &mut rng).is_err());
    }

    #[test]
    fn perfect_reciprocity_gives_zero_lambda() {
        let p = ChannelParams::from_std(1.0, 0.0, 0.0, 0.0, 0.0);
        let mut rng = rng_from_seed(3);
        for _ in 0..100 {
            assert_eq!(sample_lambda(&p, &mut rng).unwrap(), Complex64::new(0.0, 0.0));
        }
    }

    #[test]
    fn degenerate_params_rejected() {
        let p = ChannelParams {
            sigma_h_sq: 0.0,
            sigma_e_sq: 0.0,
            sigma_eta_sq: 0.0,
            theta_deg: 0.0,
            sigma_noise_sq: 0.0,
        };
        assert!(sample_lambda(&p, &mut rng_from_seed(0)).is_err());
        assert!(p.validate().is_err());
    }

    #[test]
    fn gain_identity_holds_per_draw() {
        let p = ChannelParams::from_std(1.0, 0.2, 0.3, 17.0, 0.0);
        let alpha = p.alpha();
        let mut rng = rng_from_seed(5);
        for _ in 0..1000 {
            let s = sample_mismatch(&p, &mut rng).unwrap();
            let lhs = s.effective_gain(alpha);
            let rhs = Complex64::new(1.0, 0.0) - s.lambda;
            assert!((lhs - rhs).norm() <= 1e-12 * (1.0 + s.lambda.norm()));
        }
    }

    #[test]
    fn empty_set_without_noise_is_silent() {
        let c = generate_code_matrix(8, 16, 1).unwrap();
        let p = ChannelParams::from_std(1.0, 0.1, 0.1, 5.0, 0.0);
        let (y, _, model) = synthesize_received(&c, &ActiveSet::empty(), &p, &mut rng_from_seed(2)).unwrap();
        assert!(y.iter().all(|v| *v == Complex64::new(0.0, 0.0)));
        assert_eq!(model.epsilon, 0.0);
    }

    #[test]
    fn noiseless_reciprocal_channel_sums_codes() {
        let c = generate_code_matrix(8, 16, 1).unwrap();
        let p = ChannelParams::from_std(1.0, 0.0, 0.0, 0.0, 0.0);
        let s = ActiveSet::new(vec![3, 5]);
        let (y, _, _) = synthesize_received(&c, &s, &p, &mut rng_from_seed(2)).unwrap();
        for (l, v) in y.iter().enumerate() {
            assert_eq!(v.re, c.get(l, 3) + c.get(l, 5));
            assert_eq!(v.im, 0.0);
        }
    }

    #[test]
    fn sparse_model_reproduces_received_signal() {
        let c = generate_code_matrix(32, 64, 9).unwrap();
        let p = ChannelParams::from_std(1.0, 0.15, 0.15, 5.0, 0.2);
        let mut rng = rng_from_seed(11);
        for m in [0usize, 1, 5, 12] {
            let s = sample_active_set(64, m, &mut rng).unwrap();
            let (y, draw, model) = synthesize_received(&c, &s, &p, &mut rng).unwrap();
            let rebuilt = model.reconstruct(&c, &draw.noise);
            let scale = 1.0 + model.u.iter().map(|u| u.norm()).fold(0.0, f64::max);
            assert!(max_abs_diff(&y, &rebuilt) < 1e-12 * scale, "M={m}");
            assert_eq!(model.x_ring.sum() as usize, m);
            for j in 0..64 {
                if !s.contains(j) {
                    assert!(model.q.column(j).iter().all(|v| v.norm() == 0.0));
                }
            }
        }
    }

    #[test]
    fn collisions_keep_model_exact() {
        let c = generate_code_matrix(16, 32, 4).unwrap();
        let p = ChannelParams::from_std(1.0, 0.1, 0.1, 5.0, 0.05);
        let users = [3usize, 3, 7];
        let (y, draw, model) = synthesize_for_users(&c, &users, &p, &mut rng_from_seed(8)).unwrap();
        assert_eq!(model.x_ring[3], 2.0);
        assert!(max_abs_diff(&y, &model.reconstruct(&c, &draw.noise)) < 1e-10);
    }

    #[test]
    fn transmitted_symbols_are_pre_equalized() {
        let c = generate_code_matrix(4, 8, 4).unwrap();
        let p = ChannelParams::from_std(1.0, 0.1, 0.0, 0.0, 0.0);
        let (_, draw, _) = synthesize_for_users(&c, &[2], &p, &mut rng_from_seed(8)).unwrap();
        for l in 0..4 {
            let s = draw.samples[0][l];
            let back = draw.transmitted[0][l] * (s.h + s.e);
            assert!((back.re - c.get(l, 2)).abs() < 1e-12 && back.im.abs() < 1e-12);
        }
    }
}
