//! Coherence-optimal decoder design.
//!
//! ```text
//! minimize    ε μ_r α̂ + M₀ β̂ + Υ γ̂
//! subject to  D_ℓᵀC_ℓ = 1,  |sᵀD_ℓ| ≤ α̂,  |C_jᵀD_ℓ| ≤ β̂ (j ≠ ℓ),  ‖D_ℓ‖₂ ≤ γ̂
//! ```
//!
//! with `s = Σ_j C_j`. Eliminating the epigraph variables leaves
//! `min_{D ∈ A} w₁‖Dᵀs‖_∞ + w₂ max_{j≠ℓ}|(CᵀD)_{jℓ}| + w₃ max_ℓ‖D_ℓ‖₂` over the
//! affine set `A` of normalized decoders: a sum of three norms of linear maps
//! of `D`. It is solved with the Chambolle–Pock primal–dual iteration:
//!
//! * the primal prox is the exact projection onto `A` (column by column), so
//!   every primal iterate is feasible to rounding;
//! * each norm is handled through its conjugate, whose prox is a projection
//!   onto the dual-norm ball (ℓ1, ℓ1 over off-diagonal entries, and the
//!   sum-of-column-norms ball respectively).
//!
//! The three linear blocks are rescaled to a common operator norm so that a
//! single pair of step sizes suits all of them. The best primal iterate seen
//! is returned; the warm start `C/L` is the first candidate.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{coherence, Coherence, DecoderKind, DecoderMatrix, DesignInputs, MeritWeights};
use crate::codebook::CodeMatrix;
use crate::error::{param_err, MudError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Stop once the best objective improved by less than `tol` (relative)
    /// over the last `window` iterations.
    pub tol: f64,
    pub window: usize,
    /// Ratio `τ/σ` of primal to dual step size.
    pub step_ratio: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 20_000,
            tol: 1e-7,
            window: 100,
            step_ratio: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverReport {
    pub iterations: usize,
    pub objective: f64,
    /// Objective of the `C/L` warm start.
    pub initial_objective: f64,
    /// `max_ℓ |D_ℓᵀC_ℓ − 1|` of the returned decoder.
    pub equality_residual: f64,
    #[serde(flatten)]
    pub coherence: Coherence,
}

/// Projects `v` onto `{x : ‖x‖₁ ≤ radius}` in place.
pub(crate) fn project_l1_ball(v: &mut [f64], radius: f64) {
    if radius <= 0.0 {
        v.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let l1: f64 = v.iter().map(|x| x.abs()).sum();
    if l1 <= radius {
        return;
    }
    let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    mags.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &m) in mags.iter().enumerate() {
        cumsum += m;
        let t = (cumsum - radius) / (i + 1) as f64;
        if m - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    for x in v.iter_mut() {
        let m = (x.abs() - theta).max(0.0);
        *x = m.copysign(*x);
    }
}

/// Projects the columns of `z` so that `Σ_ℓ ‖z_ℓ‖₂ ≤ radius`.
fn project_group_l1_ball(z: &mut DMatrix<f64>, radius: f64) {
    let mut norms: Vec<f64> = z.column_iter().map(|c| c.norm()).collect();
    let original = norms.clone();
    project_l1_ball(&mut norms, radius);
    for (mut col, (&new, &old)) in z.column_iter_mut().zip(norms.iter().zip(&original)) {
        if old > 0.0 {
            col *= new / old;
        }
    }
}

struct Operator<'a> {
    c: &'a DMatrix<f64>,
    s: DVector<f64>,
    scale_sum: f64,
    scale_id: f64,
    code_norm_sq: DVector<f64>,
}

/// Images of `D` under the three linear blocks.
struct Image {
    sums: DVector<f64>,
    cross: DMatrix<f64>,
    ident: DMatrix<f64>,
}

impl Operator<'_> {
    fn apply(&self, d: &DMatrix<f64>) -> Image {
        let sums = d.tr_mul(&self.s) * self.scale_sum;
        let mut cross = self.c.tr_mul(d);
        cross.fill_diagonal(0.0);
        Image {
            sums,
            cross,
            ident: d * self.scale_id,
        }
    }

    fn adjoint(&self, y: &Image) -> DMatrix<f64> {
        let mut out = self.c * &y.cross;
        out.ger(self.scale_sum, &self.s, &y.sums, 1.0);
        out += &y.ident * self.scale_id;
        out
    }

    fn project_affine(&self, d: &mut DMatrix<f64>) {
        for (j, mut col) in d.column_iter_mut().enumerate() {
            let code = self.c.column(j);
            let r = (col.dot(&code) - 1.0) / self.code_norm_sq[j];
            col.axpy(-r, &code, 1.0);
        }
    }

    /// Objective from an image (undoing the block scaling).
    fn objective(&self, img: &Image, w: &MeritWeights) -> f64 {
        let alpha = if self.scale_sum > 0.0 {
            img.sums.amax() / self.scale_sum
        } else {
            0.0
        };
        let beta = img.cross.amax();
        let gamma = img.ident.column_iter().map(|c| c.norm()).fold(0.0, f64::max) / self.scale_id;
        w.epsilon * w.mu_r * alpha + w.m0 * beta + w.upsilon * gamma
    }
}

fn spectral_norm(c: &DMatrix<f64>) -> f64 {
    let gram = c * c.transpose();
    SymmetricEigen::new(gram).eigenvalues.max().max(0.0).sqrt()
}

/// Solves the coherence-optimal design for the given objective weights.
///
/// Returns [`MudError::NotConverged`] (carrying the best iterate) when the
/// stopping rule is not met within `opts.max_iter` iterations.
pub fn solve_optimal_decoder(
    codes: &CodeMatrix,
    weights: MeritWeights,
    opts: &SolverOptions,
) -> Result<(DMatrix<f64>, SolverReport)> {
    for (name, v) in [
        ("epsilon", weights.epsilon),
        ("mu_r", weights.mu_r),
        ("upsilon", weights.upsilon),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(param_err(name, format!("must be finite and >= 0, got {v}")));
        }
    }
    if !(weights.m0 >= 1.0) {
        return Err(param_err("M0", format!("must be >= 1, got {}", weights.m0)));
    }
    if !(opts.step_ratio > 0.0) || opts.window == 0 {
        return Err(param_err(
            "solver_opts",
            "step_ratio must be positive and window nonzero",
        ));
    }

    let c = codes.matrix();
    let l = c.nrows();
    let s = c.column_sum();
    let norm_c = spectral_norm(c);
    let s_norm = s.norm();
    let op = Operator {
        c,
        scale_sum: if s_norm > 0.0 { norm_c / s_norm } else { 0.0 },
        scale_id: norm_c,
        code_norm_sq: DVector::from_iterator(c.ncols(), c.column_iter().map(|col| col.norm_squared())),
        s,
    };
    // ‖K‖² ≤ 3‖C‖² after rescaling.
    let op_norm = (3.0f64).sqrt() * norm_c;
    let tau = 0.99 * opts.step_ratio.sqrt() / op_norm;
    let sigma = 0.99 / (opts.step_ratio.sqrt() * op_norm);

    let w1 = weights.epsilon * weights.mu_r;
    let radius_sum = if op.scale_sum > 0.0 { w1 / op.scale_sum } else { 0.0 };
    let radius_cross = weights.m0;
    let radius_ident = weights.upsilon / op.scale_id;

    let mut x = c / l as f64;
    let mut kx = op.apply(&x);
    let initial_objective = op.objective(&kx, &weights);
    let mut best = x.clone();
    let mut best_obj = initial_objective;
    let mut history = vec![best_obj];

    let mut y = Image {
        sums: DVector::zeros(c.ncols()),
        cross: DMatrix::zeros(c.ncols(), c.ncols()),
        ident: DMatrix::zeros(l, c.ncols()),
    };

    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        iterations += 1;
        let mut x_new = &x - op.adjoint(&y) * tau;
        op.project_affine(&mut x_new);
        let kx_new = op.apply(&x_new);

        // Dual ascent on the extrapolated point 2x_new − x.
        let ext = |new: f64, old: f64| 2.0 * new - old;
        y.sums
            .zip_apply(&kx_new.sums.zip_map(&kx.sums, ext), |yv, kv| *yv += sigma * kv);
        y.cross
            .zip_apply(&kx_new.cross.zip_map(&kx.cross, ext), |yv, kv| *yv += sigma * kv);
        y.ident
            .zip_apply(&kx_new.ident.zip_map(&kx.ident, ext), |yv, kv| *yv += sigma * kv);
        project_l1_ball(y.sums.as_mut_slice(), radius_sum);
        y.cross.fill_diagonal(0.0);
        project_l1_ball(y.cross.as_mut_slice(), radius_cross);
        project_group_l1_ball(&mut y.ident, radius_ident);

        let obj = op.objective(&kx_new, &weights);
        if obj < best_obj {
            best_obj = obj;
            best.copy_from(&x_new);
        }
        history.push(best_obj);
        x = x_new;
        kx = kx_new;

        if iterations >= opts.window {
            let past = history[iterations - opts.window];
            if past - best_obj <= opts.tol * best_obj.abs().max(1e-12) {
                converged = true;
                break;
            }
        }
    }

    // Rounding in the projection is O(ulp); one last projection pins it.
    op.project_affine(&mut best);
    let coh = coherence(&best, codes)?;
    let equality_residual = (0..c.ncols())
        .map(|j| (best.column(j).dot(&c.column(j)) - 1.0).abs())
        .fold(0.0, f64::max);
    let objective = weights.evaluate(&coh);
    if !converged {
        return Err(MudError::NotConverged {
            iterations,
            objective,
            residual: equality_residual,
            last_iterate: Box::new(best),
        });
    }
    Ok((
        best,
        SolverReport {
            iterations,
            objective,
            initial_objective,
            equality_residual,
            coherence: coh,
        },
    ))
}

/// Decoder-I for a design snapshot.
pub fn design_decoder_optimal(
    codes: &CodeMatrix,
    inputs: DesignInputs,
    opts: &SolverOptions,
) -> Result<(DecoderMatrix, SolverReport)> {
    let weights = MeritWeights {
        epsilon: inputs.epsilon,
        mu_r: inputs.mu_r,
        m0: inputs.m0 as f64,
        upsilon: inputs.upsilon(codes.num_codes()),
    };
    let (matrix, report) = solve_optimal_decoder(codes, weights, opts)?;
    Ok((DecoderMatrix::new(matrix, DecoderKind::Optimal, Some(inputs)), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::generate_code_matrix;
    use crate::decoder::{design_decoder_mmse, mmse_delta, scaled_code_decoder};
    use crate::seed::rng_from_seed;
    use rand::Rng;

    #[test]
    fn l1_projection_properties() {
        let mut rng = rng_from_seed(1);
        for _ in 0..200 {
            let n = rng.random_range(1..40);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let r = rng.random_range(0.0..5.0);
            let mut p = v.clone();
            project_l1_ball(&mut p, r);
            let l1: f64 = p.iter().map(|x| x.abs()).sum();
            assert!(l1 <= r + 1e-9);
            // optimality: ⟨v − p, q − p⟩ ≤ 0 for ball points q (try signs·r e_i)
            for i in 0..n {
                for sgn in [-1.0, 1.0] {
                    let mut q = vec![0.0; n];
                    q[i] = sgn * r;
                    let ip: f64 = (0..n).map(|t| (v[t] - p[t]) * (q[t] - p[t])).sum();
                    assert!(ip <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn improves_on_warm_start() {
        let c = generate_code_matrix(16, 32, 8).unwrap();
        let w = MeritWeights {
            epsilon: 10.0 / 32.0,
            mu_r: 0.0137,
            m0: 10.0,
            upsilon: 1.0,
        };
        let (d, rep) = solve_optimal_decoder(&c, w, &SolverOptions::default()).unwrap();
        assert!(rep.equality_residual <= 1e-6);
        let base = w.evaluate(&coherence(&scaled_code_decoder(&c).matrix, &c).unwrap());
        assert!(rep.objective <= base);
        assert!((w.evaluate(&coherence(&d, &c).unwrap()) - rep.objective).abs() < 1e-12);
        let mmse = design_decoder_mmse(&c, mmse_delta(w.epsilon, w.mu_r, 0.02), 0.01).unwrap();
        assert!(rep.objective <= w.evaluate(&coherence(&mmse.matrix, &c).unwrap()) + 1e-9);
    }

    #[test]
    fn rejects_bad_weights() {
        let c = generate_code_matrix(4, 8, 8).unwrap();
        let w = MeritWeights {
            epsilon: 0.1,
            mu_r: 0.01,
            m0: 0.0,
            upsilon: 1.0,
        };
        assert!(solve_optimal_decoder(&c, w, &SolverOptions::default()).is_err());
    }

    #[test]
    fn budget_exhaustion_carries_iterate() {
        let c = generate_code_matrix(16, 32, 8).unwrap();
        let w = MeritWeights {
            epsilon: 0.3,
            mu_r: 0.01,
            m0: 10.0,
            upsilon: 1.0,
        };
        let opts = SolverOptions {
            max_iter: 5,
            window: 100,
            ..SolverOptions::default()
        };
        match solve_optimal_decoder(&c, w, &opts) {
            Err(MudError::NotConverged {
                iterations,
                last_iterate,
                residual,
                ..
            }) => {
                assert_eq!(iterations, 5);
                assert_eq!(last_iterate.shape(), (16, 32));
                assert!(residual < 1e-9);
            }
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }
}
