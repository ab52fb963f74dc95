//! Decoder matrices for the correlation detector.
//!
//! Every decoder `D` is `L x K` with `D_ℓᵀ C_ℓ = 1`. Three constructions:
//!
//! * [`scaled_code_decoder`]: `D = C/L`, the matched-filter baseline.
//! * [`design_decoder_mmse`]: per-column MMSE decoder
//!   `D_ℓ ∝ (δR + Iσ_ϑ²/2)⁻¹C_ℓ` evaluated through the eigendecomposition of
//!   `R = C Cᵀ`, so redesigning for new `(δ, σ_ϑ²)` costs no inversion.
//! * [`design_decoder_optimal`]: minimizes `ε μ_r α + M₀ β + Υ γ` over all
//!   normalized decoders (a second-order cone program, see [`socp`]).

pub mod socp;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::codebook::CodeMatrix;
use crate::error::{param_err, MudError, Result};

pub use socp::{design_decoder_optimal, SolverOptions, SolverReport};

/// Tolerance on `D_ℓᵀC_ℓ = 1` that every constructed decoder satisfies.
pub const NORMALIZATION_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderKind {
    /// `C/L`.
    ScaledCode,
    /// Coherence-optimal design (Decoder-I).
    Optimal,
    /// Closed-form MMSE design (Decoder-II).
    Mmse,
}

/// Design inputs a decoder was built for; the harness compares new operating
/// points against this snapshot to decide when to redesign.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DesignInputs {
    pub epsilon: f64,
    pub mu_r: f64,
    pub m2_r: f64,
    pub sigma_r_sq: f64,
    pub sigma_noise_sq: f64,
    pub m0: usize,
    pub nu: f64,
}

impl DesignInputs {
    /// `Υ = sqrt(2(1+ν) ln K) · sqrt(M₀σ_r² + σ_ϑ²/2)`.
    pub fn upsilon(&self, k: usize) -> f64 {
        upsilon(self.nu, k, self.m0, self.sigma_r_sq, self.sigma_noise_sq)
    }

    /// `δ = ε(1 + E[λ_r²] − 2μ_r)`.
    pub fn delta(&self) -> f64 {
        mmse_delta(self.epsilon, self.mu_r, self.m2_r)
    }

    /// True when `other` differs from this snapshot by more than `rel` in the
    /// user count or either noise variance.
    pub fn drifted(&self, other: &DesignInputs, rel: f64) -> bool {
        let off = |a: f64, b: f64| {
            let scale = a.abs().max(b.abs());
            scale > 0.0 && (a - b).abs() > rel * a.abs().max(f64::MIN_POSITIVE)
        };
        off(self.m0 as f64, other.m0 as f64)
            || off(self.sigma_r_sq, other.sigma_r_sq)
            || off(self.sigma_noise_sq, other.sigma_noise_sq)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderMatrix {
    pub matrix: DMatrix<f64>,
    pub kind: DecoderKind,
    pub inputs: Option<DesignInputs>,
}

impl DecoderMatrix {
    pub fn new(matrix: DMatrix<f64>, kind: DecoderKind, inputs: Option<DesignInputs>) -> Self {
        Self { matrix, kind, inputs }
    }

    /// `max_ℓ |D_ℓᵀC_ℓ − 1|`.
    pub fn normalization_error(&self, codes: &CodeMatrix) -> f64 {
        let c = codes.matrix();
        (0..c.ncols())
            .map(|j| (self.matrix.column(j).dot(&c.column(j)) - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Worst-case decoder/code inner products.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Coherence {
    /// `max_ℓ |Σ_j D_ℓᵀC_j|`
    pub alpha: f64,
    /// `max_ℓ max_{j≠ℓ} |D_ℓᵀC_j|`
    pub beta: f64,
    /// `max_ℓ ‖D_ℓ‖₂`
    pub gamma: f64,
}

pub fn coherence(decoder: &DMatrix<f64>, codes: &CodeMatrix) -> Result<Coherence> {
    let c = codes.matrix();
    if decoder.shape() != c.shape() {
        return Err(MudError::Dimension(format!(
            "decoder is {:?} but codes are {:?}",
            decoder.shape(),
            c.shape()
        )));
    }
    let gram = decoder.transpose() * c;
    let k = gram.nrows();
    let mut alpha = 0.0f64;
    let mut beta = 0.0f64;
    for ell in 0..k {
        let row = gram.row(ell);
        alpha = alpha.max(row.sum().abs());
        for j in (0..k).filter(|&j| j != ell) {
            beta = beta.max(row[j].abs());
        }
    }
    let gamma = decoder.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    Ok(Coherence { alpha, beta, gamma })
}

/// Coherence statistics plus the weighted merit `ε μ_r α + M₀ β + Υ γ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecoderMerit {
    #[serde(flatten)]
    pub coherence: Coherence,
    pub objective: f64,
}

/// Objective weights of the coherence-optimal design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeritWeights {
    pub epsilon: f64,
    pub mu_r: f64,
    pub m0: f64,
    pub upsilon: f64,
}

impl MeritWeights {
    pub fn evaluate(&self, coh: &Coherence) -> f64 {
        self.epsilon * self.mu_r * coh.alpha + self.m0 * coh.beta + self.upsilon * coh.gamma
    }
}

pub fn decoder_objective(
    decoder: &DMatrix<f64>,
    codes: &CodeMatrix,
    epsilon: f64,
    mu_r: f64,
    m0: f64,
    upsilon: f64,
) -> Result<DecoderMerit> {
    let coherence = coherence(decoder, codes)?;
    let objective = MeritWeights {
        epsilon,
        mu_r,
        m0,
        upsilon,
    }
    .evaluate(&coherence);
    Ok(DecoderMerit { coherence, objective })
}

pub fn upsilon(nu: f64, k: usize, m0: usize, sigma_r_sq: f64, sigma_noise_sq: f64) -> f64 {
    (2.0 * (1.0 + nu) * (k as f64).ln()).sqrt() * (m0 as f64 * sigma_r_sq + sigma_noise_sq / 2.0).sqrt()
}

pub fn mmse_delta(epsilon: f64, mu_r: f64, m2_r: f64) -> f64 {
    epsilon * (1.0 + m2_r - 2.0 * mu_r)
}

/// `D = C/L`.
pub fn scaled_code_decoder(codes: &CodeMatrix) -> DecoderMatrix {
    let l = codes.len() as f64;
    DecoderMatrix::new(codes.matrix() / l, DecoderKind::ScaledCode, None)
}

/// `R = Σ_j C_j C_jᵀ` and its eigendecomposition, reusable across designs.
#[derive(Debug, Clone)]
pub struct MmseDesigner {
    codes: DMatrix<f64>,
    /// `R = C Cᵀ`.
    pub r: DMatrix<f64>,
    /// Orthonormal eigenvectors `U` (columns).
    pub eigvecs: DMatrix<f64>,
    /// Eigenvalues `Λ`.
    pub eigvals: DVector<f64>,
    /// `V = UᵀC`; column `ℓ` is the `v` of code `ℓ`.
    projected: DMatrix<f64>,
}

impl MmseDesigner {
    pub fn new(codes: &CodeMatrix) -> Self {
        let c = codes.matrix().clone();
        let r = &c * c.transpose();
        let eig = SymmetricEigen::new(r.clone());
        let projected = eig.eigenvectors.transpose() * &c;
        Self {
            codes: c,
            r,
            eigvecs: eig.eigenvectors,
            eigvals: eig.eigenvalues,
            projected,
        }
    }

    fn check(delta: f64, sigma_noise_sq: f64) -> Result<()> {
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(param_err("delta", format!("must be finite and >= 0, got {delta}")));
        }
        if !(sigma_noise_sq >= 0.0) {
            return Err(param_err("sigma_noise_sq", "must be >= 0"));
        }
        if delta == 0.0 && sigma_noise_sq == 0.0 {
            return Err(MudError::Singular("δ = 0 and σ_ϑ = 0 leave δR + Iσ_ϑ²/2 = 0".into()));
        }
        Ok(())
    }

    /// `D_ℓ = U(δΛ + Iσ_ϑ²/2)⁻¹v / Σ_j v_j²/(δΛ_j + σ_ϑ²/2)`, `v = UᵀC_ℓ`.
    pub fn design(&self, delta: f64, sigma_noise_sq: f64) -> Result<DMatrix<f64>> {
        Self::check(delta, sigma_noise_sq)?;
        let reg = sigma_noise_sq / 2.0;
        let inv: Vec<f64> = self
            .eigvals
            .iter()
            .map(|&lam| 1.0 / (delta * lam.max(0.0) + reg))
            .collect();
        if inv.iter().any(|v| !v.is_finite()) {
            return Err(MudError::Singular("δR + Iσ_ϑ²/2 has a zero eigenvalue".into()));
        }
        let mut weighted = self.projected.clone();
        for (mut row, &w) in weighted.row_iter_mut().zip(&inv) {
            row *= w;
        }
        let mut d = &self.eigvecs * &weighted;
        for (j, mut col) in d.column_iter_mut().enumerate() {
            let denom = self.projected.column(j).dot(&weighted.column(j));
            col /= denom;
        }
        Ok(d)
    }

    /// The same decoder through an explicit inverse of `δR + Iσ_ϑ²/2`.
    pub fn design_direct(&self, delta: f64, sigma_noise_sq: f64) -> Result<DMatrix<f64>> {
        Self::check(delta, sigma_noise_sq)?;
        let l = self.r.nrows();
        let a = &self.r * delta + DMatrix::identity(l, l) * (sigma_noise_sq / 2.0);
        let inv = a
            .try_inverse()
            .ok_or_else(|| MudError::Singular("δR + Iσ_ϑ²/2 is not invertible".into()))?;
        let mut d = inv * &self.codes;
        for (j, mut col) in d.column_iter_mut().enumerate() {
            let denom = self.codes.column(j).dot(&col);
            col /= denom;
        }
        Ok(d)
    }
}

/// Decoder-II through the eigendecomposition route.
pub fn design_decoder_mmse(codes: &CodeMatrix, delta: f64, sigma_noise_sq: f64) -> Result<DecoderMatrix> {
    let matrix = MmseDesigner::new(codes).design(delta, sigma_noise_sq)?;
    Ok(DecoderMatrix::new(matrix, DecoderKind::Mmse, None))
}

/// Decoder-II for a design snapshot.
pub fn design_decoder_mmse_for(designer: &MmseDesigner, inputs: DesignInputs) -> Result<DecoderMatrix> {
    let matrix = designer.design(inputs.delta(), inputs.sigma_noise_sq)?;
    Ok(DecoderMatrix::new(matrix, DecoderKind::Mmse, Some(inputs)))
}
