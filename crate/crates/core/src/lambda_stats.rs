//! Moments of the real part of the mismatch ratio `λ = U/V`.
//!
//! `U = (1−α)h + e − η` and `V = h + e` are jointly circular complex Gaussian,
//! so `λ = a + W/V` with `a = ρ σ_u/σ_v` and `W` independent of `V`. The
//! density of `λ` is the standard complex Gaussian ratio density centred at `a`,
//! radially symmetric in the shifted polar coordinates `(t, θ)`:
//!
//! ```text
//! f = Γ / (t² + γ²)²,  Γ = (1−|ρ|²) σ_u² / (π σ_v²) = γ²/π
//! ```
//!
//! `E[λ_r] = Re a` in closed form. `E[λ_r²]` diverges (logarithmically), so it is
//! evaluated over a disc of radius `t_max` derived from the percentile box
//! `T_ϱ`, using the exact antiderivative of the radial integral.
//!
//! `ρ` here is the *normalized* correlation coefficient
//! `((1−α)σ_h² + σ_e²)/(σ_u σ_v)`; only with that reading does the density
//! integrate to one and the closed-form mean agree with simulation.

use num_complex::Complex64;
use rand::Rng;
use serde::Serialize;

use crate::channel::{sample_lambda, ChannelParams};
use crate::error::{param_err, Result};

/// Number of ratio draws used for the percentile level by default.
pub const DEFAULT_PERCENTILE_DRAWS: usize = 1_000_000;

/// Parameters of the `λ` density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LambdaPdf {
    /// Numerator variance `σ_u² = |1−α|²σ_h² + σ_e² + σ_η²`.
    pub sigma_u_sq: f64,
    /// Denominator variance `σ_v² = σ_h² + σ_e²`.
    pub sigma_v_sq: f64,
    #[serde(serialize_with = "ser_complex")]
    pub rho: Complex64,
    /// Density normalization `Γ`.
    pub gamma_norm: f64,
    /// Real shift `α̂ = ρ_r σ_u/σ_v`.
    pub alpha_hat: f64,
    /// Imaginary shift `β = −ρ_i σ_u/σ_v`.
    pub beta_hat: f64,
    /// Polar scale `γ = sqrt((1−|ρ|²) σ_u²/σ_v²)`.
    pub gamma_polar: f64,
    /// `σ_u = 0`: λ is identically zero.
    pub degenerate: bool,
}

fn ser_complex<S: serde::Serializer>(c: &Complex64, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeStruct;
    let mut st = s.serialize_struct("Complex", 2)?;
    st.serialize_field("re", &c.re)?;
    st.serialize_field("im", &c.im)?;
    st.end()
}

impl LambdaPdf {
    /// Density of `λ` at `(re, im)`. Centred at `ρ σ_u/σ_v`, which is the
    /// conditional-mean offset `E[U V*]/σ_v²`.
    pub fn density(&self, re: f64, im: f64) -> f64 {
        if self.degenerate || self.gamma_polar == 0.0 {
            return 0.0;
        }
        let ratio = (self.sigma_u_sq / self.sigma_v_sq).sqrt();
        let dr = re - self.rho.re * ratio;
        let di = im - self.rho.im * ratio;
        let t2 = dr * dr + di * di;
        let g2 = self.gamma_polar * self.gamma_polar;
        self.gamma_norm / ((t2 + g2) * (t2 + g2))
    }
}

/// Complete moment record for `[λ]_r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LambdaMoments {
    #[serde(flatten)]
    pub pdf: LambdaPdf,
    /// Percentile level `ϱ`.
    pub varrho: f64,
    /// Box half-width `T_ϱ`.
    pub t_level: f64,
    /// Polar truncation radius.
    pub t_max: f64,
    /// `E[λ_r]`.
    pub mu_r: f64,
    /// Truncated `E[λ_r²]`.
    pub m2_r: f64,
    /// `σ_r² = m2_r − μ_r²`, clamped at zero.
    pub sigma_r_sq: f64,
}

impl LambdaMoments {
    /// All-zero moments, e.g. for a perfectly reciprocal channel.
    pub fn zero() -> Self {
        Self {
            pdf: LambdaPdf {
                sigma_u_sq: 0.0,
                sigma_v_sq: 0.0,
                rho: Complex64::new(0.0, 0.0),
                gamma_norm: 0.0,
                alpha_hat: 0.0,
                beta_hat: 0.0,
                gamma_polar: 0.0,
                degenerate: true,
            },
            varrho: 0.0,
            t_level: 0.0,
            t_max: 0.0,
            mu_r: 0.0,
            m2_r: 0.0,
            sigma_r_sq: 0.0,
        }
    }
}

/// Density parameters of `λ` for the given channel.
pub fn pdf_params(params: &ChannelParams) -> Result<LambdaPdf> {
    if !(params.sigma_h_sq > 0.0) {
        return Err(param_err("sigma_h_sq", "channel variance must be positive"));
    }
    let one_minus_alpha = Complex64::new(1.0, 0.0) - params.alpha();
    let sigma_u_sq = one_minus_alpha.norm_sqr() * params.sigma_h_sq + params.sigma_e_sq + params.sigma_eta_sq;
    let sigma_v_sq = params.sigma_h_sq + params.sigma_e_sq;
    if sigma_u_sq <= 0.0 {
        return Ok(LambdaPdf {
            sigma_u_sq: 0.0,
            sigma_v_sq,
            ..LambdaMoments::zero().pdf
        });
    }
    let (su, sv) = (sigma_u_sq.sqrt(), sigma_v_sq.sqrt());
    let cov = one_minus_alpha * params.sigma_h_sq + params.sigma_e_sq;
    let mut rho = cov / (su * sv);
    // Cauchy–Schwarz guarantees |ρ| ≤ 1 up to rounding.
    if rho.norm() > 1.0 {
        rho /= rho.norm();
    }
    let one_minus = (1.0 - rho.norm_sqr()).max(0.0);
    let gamma_polar = (one_minus * sigma_u_sq / sigma_v_sq).sqrt();
    Ok(LambdaPdf {
        sigma_u_sq,
        sigma_v_sq,
        rho,
        gamma_norm: one_minus * sigma_u_sq / (std::f64::consts::PI * sigma_v_sq),
        alpha_hat: rho.re * su / sv,
        beta_hat: -rho.im * su / sv,
        gamma_polar,
        degenerate: false,
    })
}

/// `E[λ_r] = Re{(1−α)σ_h² + σ_e²}/(σ_h² + σ_e²)`.
pub fn mean_lambda_r(params: &ChannelParams) -> Result<f64> {
    Ok(pdf_params(params)?.alpha_hat)
}

/// Smallest `T` with `Pr(|λ_r| ≤ T, |λ_i| ≤ T) ≥ ϱ`, estimated from `draws`
/// samples of `max(|λ_r|, |λ_i|)`.
pub fn percentile_threshold<R: Rng + ?Sized>(
    params: &ChannelParams,
    varrho: f64,
    draws: usize,
    rng: &mut R,
) -> Result<f64> {
    if !(varrho > 0.0 && varrho < 1.0) {
        return Err(param_err("varrho", format!("must lie in (0, 1), got {varrho}")));
    }
    if draws == 0 {
        return Err(param_err("draws", "need at least one draw"));
    }
    if pdf_params(params)?.degenerate {
        return Ok(0.0);
    }
    let mut level: Vec<f64> = (0..draws)
        .map(|_| sample_lambda(params, rng).map(|l| l.re.abs().max(l.im.abs())))
        .collect::<Result<_>>()?;
    let idx = ((varrho * draws as f64).ceil() as usize).clamp(1, draws) - 1;
    let (_, nth, _) = level.select_nth_unstable_by(idx, f64::total_cmp);
    Ok(*nth)
}

/// Polar truncation radius covering the `T_ϱ` box after the coordinate shift.
pub fn truncation_radius(pdf: &LambdaPdf, t_level: f64) -> f64 {
    t_level + pdf.alpha_hat.abs().max(pdf.beta_hat.abs())
}

/// Truncated `E[λ_r²]`:
/// `Γ ∫₀^{2π}∫₀^{t_max} t³cos²θ/(t²+γ²)² dt dθ + Γπα̂²/γ²`.
///
/// The radial integral has antiderivative `½ln(t²+γ²) + γ²/(2(t²+γ²))` and
/// the angular one is `π`, which gives
/// `(γ²/2)(ln(1 + t²/γ²) − t²/(t²+γ²)) + α̂²`.
pub fn second_moment_lambda_r(pdf: &LambdaPdf, t_max: f64) -> Result<f64> {
    if !(t_max > 0.0 && t_max.is_finite()) {
        return Err(param_err("t_max", format!("must be positive and finite, got {t_max}")));
    }
    if pdf.degenerate {
        return Ok(0.0);
    }
    let g2 = pdf.gamma_polar * pdf.gamma_polar;
    let shift = pdf.alpha_hat * pdf.alpha_hat;
    if g2 == 0.0 {
        return Ok(shift);
    }
    let t2 = t_max * t_max;
    // ln1p keeps precision when t_max ≪ γ.
    let radial = 0.5 * ((t2 / g2).ln_1p() - t2 / (t2 + g2));
    Ok(pdf.gamma_norm * std::f64::consts::PI * radial + shift)
}

/// Full moment record, using `draws` samples for the percentile level.
pub fn moments_with_draws<R: Rng + ?Sized>(
    params: &ChannelParams,
    varrho: f64,
    draws: usize,
    rng: &mut R,
) -> Result<LambdaMoments> {
    let pdf = pdf_params(params)?;
    if pdf.degenerate {
        return Ok(LambdaMoments {
            pdf,
            varrho,
            ..LambdaMoments::zero()
        });
    }
    let t_level = percentile_threshold(params, varrho, draws, rng)?;
    let t_max = truncation_radius(&pdf, t_level);
    let m2_r = second_moment_lambda_r(&pdf, t_max)?;
    let mu_r = pdf.alpha_hat;
    Ok(LambdaMoments {
        pdf,
        varrho,
        t_level,
        t_max,
        mu_r,
        m2_r,
        sigma_r_sq: (m2_r - mu_r * mu_r).max(0.0),
    })
}

/// Full moment record with the default percentile sample size.
pub fn moments<R: Rng + ?Sized>(params: &ChannelParams, varrho: f64, rng: &mut R) -> Result<LambdaMoments> {
    moments_with_draws(params, varrho, DEFAULT_PERCENTILE_DRAWS, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    fn reference_params(sigma: f64) -> ChannelParams {
        ChannelParams::from_std(1.0, sigma, sigma, 5.0, 0.0)
    }

    #[test]
    fn reciprocal_channel_is_degenerate() {
        let p = ChannelParams::from_std(1.0, 0.0, 0.0, 0.0, 0.0);
        let pdf = pdf_params(&p).unwrap();
        assert!(pdf.degenerate);
        assert_eq!(pdf.sigma_u_sq, 0.0);
        let m = moments_with_draws(&p, 0.95, 10, &mut rng_from_seed(0)).unwrap();
        assert_eq!((m.mu_r, m.m2_r, m.sigma_r_sq), (0.0, 0.0, 0.0));
        assert_eq!(percentile_threshold(&p, 0.95, 10, &mut rng_from_seed(0)).unwrap(), 0.0);
    }

    #[test]
    fn variances_by_hand() {
        let pdf = pdf_params(&reference_params(0.1)).unwrap();
        let expected_u = 2.0 - 2.0 * 5f64.to_radians().cos() + 0.02;
        assert!((pdf.sigma_v_sq - 1.01).abs() < 1e-15);
        assert!((pdf.sigma_u_sq - expected_u).abs() < 1e-15);
        assert!((pdf.sigma_u_sq - 0.027615).abs() < 1e-5);
        assert!(pdf.rho.norm() <= 1.0);
    }

    #[test]
    fn closed_form_means() {
        let no_phase = ChannelParams::from_std(1.0, 0.1, 0.1, 0.0, 0.0);
        assert!((mean_lambda_r(&no_phase).unwrap() - 0.01 / 1.01).abs() < 1e-15);
        let mu = mean_lambda_r(&reference_params(0.1)).unwrap();
        let expected = (1.0 - 5f64.to_radians().cos() + 0.01) / 1.01;
        assert!((mu - expected).abs() < 1e-15);
        assert!((mu - 0.013668).abs() < 1e-6);
        assert_eq!(
            mean_lambda_r(&ChannelParams::from_std(1.0, 0.0, 0.0, 0.0, 0.0)).unwrap(),
            0.0
        );
    }

    #[test]
    fn second_moment_limits_and_monotonicity() {
        let pdf = pdf_params(&reference_params(0.1)).unwrap();
        let tiny = second_moment_lambda_r(&pdf, 1e-9).unwrap();
        assert!((tiny - pdf.alpha_hat.powi(2)).abs() < 1e-15);
        // Γπ/γ² = 1 under the normalized correlation coefficient
        let g2 = pdf.gamma_polar.powi(2);
        assert!((pdf.gamma_norm * std::f64::consts::PI / g2 - 1.0).abs() < 1e-12);
        let mut prev = 0.0;
        for i in 1..200 {
            let v = second_moment_lambda_r(&pdf, i as f64 * 0.05).unwrap();
            assert!(v >= prev);
            prev = v;
        }
        assert!(second_moment_lambda_r(&pdf, 0.0).is_err());
        assert!(second_moment_lambda_r(&pdf, f64::INFINITY).is_err());
    }

    #[test]
    fn percentile_level_monotone_in_varrho() {
        let p = reference_params(0.1);
        let t95 = percentile_threshold(&p, 0.95, 200_000, &mut rng_from_seed(4)).unwrap();
        let t99 = percentile_threshold(&p, 0.99, 200_000, &mut rng_from_seed(4)).unwrap();
        assert!(t99 >= t95 && t95 > 0.0);
        assert!(percentile_threshold(&p, 1.0, 10, &mut rng_from_seed(4)).is_err());
        assert!(percentile_threshold(&p, 0.0, 10, &mut rng_from_seed(4)).is_err());
    }

    #[test]
    fn sigma_r_sq_never_negative() {
        let mut rng = rng_from_seed(77);
        for _ in 0..100 {
            let s_e: f64 = rng.random_range(0.0..0.3);
            let s_eta: f64 = rng.random_range(0.0..0.3);
            let theta: f64 = rng.random_range(0.0..10.0);
            let p = ChannelParams::from_std(1.0, s_e, s_eta, theta, 0.0);
            let m = moments_with_draws(&p, 0.95, 2_000, &mut rng).unwrap();
            assert!(m.sigma_r_sq >= 0.0 && m.m2_r.is_finite());
            assert!(m.pdf.rho.norm() <= 1.0);
        }
    }

    proptest::proptest! {
        #[test]
        fn truncated_second_moment_grows_with_the_radius(
            se in 0.001f64..0.3,
            sn in 0.0f64..0.3,
            theta in 0.0f64..10.0,
            t in 0.01f64..5.0,
        ) {
            let pdf = pdf_params(&ChannelParams::from_std(1.0, se, sn, theta, 0.0)).unwrap();
            let inner = second_moment_lambda_r(&pdf, t).unwrap();
            let outer = second_moment_lambda_r(&pdf, 2.0 * t).unwrap();
            proptest::prop_assert!(inner >= pdf.alpha_hat * pdf.alpha_hat);
            proptest::prop_assert!(outer >= inner);
            proptest::prop_assert!(pdf.rho.norm() <= 1.0 && pdf.gamma_norm >= 0.0);
        }
    }
}
