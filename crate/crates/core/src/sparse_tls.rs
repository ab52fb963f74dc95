//! Sparse recovery detectors: ℓp-constrained total least squares and Lasso.
//!
//! The TLS detector fits `y_r ≈ (C − Q)x` with a sparse, nearly binary `x` and
//! an unknown perturbation `Q`. Each outer iteration
//!
//! 1. forms FOCUSS weights `W` from the previous iterate,
//! 2. relaxes the binary constraint `x_t(x_t − 1) = 0` with multipliers `μ`
//!    and runs gradient ascent on the dual
//!    `g(μ) = −¼ vᵀP⁻¹v`, `P = W + (ξ/2)BᵀB + diag(μ)`, `v = ξBᵀy_r + μ`,
//!    `B = C − Q`, whose gradient is `x∘x − x` at `x = ½P⁻¹v`,
//! 3. accepts the primal point of the last dual iterate that certifies
//!    descent of the surrogate `S(x) = (ξ/2)‖y_r − Bx‖² + xᵀWx`,
//! 4. refits `Q` in closed form.
//!
//! Together these make `G̃ = ‖y_r − Bx‖² + ‖Q‖² + (2/ξ)xᵀWx` nonincreasing.
//! The output is `x` rounded onto `{0, 1}` at ½.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use num_complex::Complex64;
use serde::Serialize;

use crate::channel::real_part;
use crate::codebook::CodeMatrix;
use crate::error::{param_err, MudError, Result};

/// Upper limit on the default `ξ` when the disturbance variance vanishes.
pub const XI_CAP: f64 = 1e6;

/// Binary projection threshold.
pub const BINARY_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TlsConfig {
    /// ℓp exponent in `(0, 1]`.
    pub p: f64,
    /// Data-fidelity weight `ξ`.
    pub xi: f64,
    pub max_outer: usize,
    /// Step halvings allowed per dual ascent step.
    pub max_inner: usize,
    pub max_dual_steps: usize,
    /// Outer stopping tolerance on `‖x̂⁽ⁱ⁾ − x̂⁽ⁱ⁻¹⁾‖_∞`, in `[0, 1]`.
    pub stop_tol: f64,
    pub weight_eps: f64,
    /// First dual step, as a multiple of the mean diagonal of `P`.
    pub dual_step0: f64,
    pub certificate: DescentRule,
}

/// Reference value a candidate `x̂⁽ⁱ⁾` must not exceed to be accepted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DescentRule {
    /// `S⁽ⁱ⁾(x̂⁽ⁱ⁾) ≤ S⁽ⁱ⁻¹⁾(x̂⁽ⁱ⁻¹⁾)`: the outer objective `G̃` never increases.
    #[default]
    PreviousSurrogate,
    /// `S⁽ⁱ⁾(x̂⁽ⁱ⁾) ≤ S⁽ⁱ⁾(x̂⁽ⁱ⁻¹⁾)`: a majorize-minimize step on the ℓp
    /// objective. `G̃` may increase when the weights change.
    CurrentWeights,
}

impl Default for TlsConfig {
    fn default() -> Self {
        Self {
            p: 0.5,
            xi: 10.0,
            max_outer: 30,
            max_inner: 30,
            max_dual_steps: 8,
            stop_tol: 1e-3,
            weight_eps: 1e-8,
            dual_step0: 1.0,
            certificate: DescentRule::PreviousSurrogate,
        }
    }
}

impl TlsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(param_err("tls.p", format!("must lie in (0, 1], got {}", self.p)));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(param_err(
                "tls.xi",
                format!("must be positive and finite, got {}", self.xi),
            ));
        }
        if !(0.0..=1.0).contains(&self.stop_tol) {
            return Err(param_err(
                "tls.stop_tol",
                format!("must lie in [0, 1], got {}", self.stop_tol),
            ));
        }
        if !(self.weight_eps > 0.0) {
            return Err(param_err(
                "tls.weight_eps",
                format!("must be positive, got {}", self.weight_eps),
            ));
        }
        if !(self.dual_step0 > 0.0) {
            return Err(param_err(
                "tls.dual_step0",
                format!("must be positive, got {}", self.dual_step0),
            ));
        }
        if self.max_outer == 0 {
            return Err(param_err("tls.max_outer", "must be at least 1"));
        }
        Ok(())
    }
}

/// `ξ = sqrt(2 ln K)/σ_w`, capped at [`XI_CAP`].
pub fn default_xi(k: usize, sigma_w_sq: f64) -> f64 {
    let xi = (2.0 * (k as f64).ln()).sqrt() / sigma_w_sq.max(0.0).sqrt();
    if xi.is_finite() {
        xi.min(XI_CAP)
    } else {
        XI_CAP
    }
}

/// Closed-form `argmin_Q ‖y_r − (C − Q)x‖² + ‖Q‖_F²`:
/// `Q = (Cx − y_r)xᵀ / (1 + ‖x‖²)`.
pub fn q_update(x: &DVector<f64>, c: &DMatrix<f64>, y_r: &DVector<f64>) -> DMatrix<f64> {
    let r = c * x - y_r;
    (r * x.transpose()) / (1.0 + x.norm_squared())
}

/// Diagonal FOCUSS weights `(x_t² + ε)^{(p−2)/2}`.
pub fn focuss_weights(x_prev: &DVector<f64>, p: f64, weight_eps: f64) -> DVector<f64> {
    let e = (p - 2.0) / 2.0;
    x_prev.map(|v| (v * v + weight_eps).powf(e))
}

/// `S(x) = (ξ/2)‖y_r − (C − Q)x‖² + xᵀWx`.
pub fn surrogate(
    x: &DVector<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    y_r: &DVector<f64>,
    w: &DVector<f64>,
    xi: f64,
) -> f64 {
    let r = y_r - (c - q) * x;
    0.5 * xi * r.norm_squared() + weighted_sq(x, w)
}

/// `G̃ = ‖y_r − (C − Q)x‖² + ‖Q‖_F² + (2/ξ)xᵀWx`.
pub fn tls_objective(
    x: &DVector<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    y_r: &DVector<f64>,
    w: &DVector<f64>,
    xi: f64,
) -> f64 {
    let r = y_r - (c - q) * x;
    r.norm_squared() + q.norm_squared() + 2.0 / xi * weighted_sq(x, w)
}

fn weighted_sq(x: &DVector<f64>, w: &DVector<f64>) -> f64 {
    x.iter().zip(w.iter()).map(|(a, b)| a * a * b).sum()
}

/// The dual problem for fixed `(C, Q, y_r, W, ξ)`:
/// `A = W + (ξ/2)BᵀB` and `b = ξBᵀy_r`.
#[derive(Debug, Clone)]
pub struct DualProblem {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

/// Dual value, gradient and minimizing primal point at one `μ`.
#[derive(Debug, Clone)]
pub struct DualPoint {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub x: DVector<f64>,
}

impl DualProblem {
    pub fn new(c: &DMatrix<f64>, q: &DMatrix<f64>, y_r: &DVector<f64>, w: &DVector<f64>, xi: f64) -> Result<Self> {
        check_shapes(c, q, y_r, w)?;
        let b_mat = c - q;
        let mut a = b_mat.tr_mul(&b_mat) * (0.5 * xi);
        for (t, wt) in w.iter().enumerate() {
            a[(t, t)] += wt;
        }
        Ok(Self {
            a,
            b: b_mat.tr_mul(y_r) * xi,
        })
    }

    fn from_parts(a: DMatrix<f64>, b: DVector<f64>) -> Self {
        Self { a, b }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    fn mean_diagonal(&self) -> f64 {
        self.a.diagonal().mean()
    }

    fn factor(&self, mu: &DVector<f64>) -> Result<Cholesky<f64, Dyn>> {
        if mu.len() != self.dim() {
            return Err(MudError::Dimension(format!(
                "dual vector has length {}, expected K={}",
                mu.len(),
                self.dim()
            )));
        }
        let mut p = self.a.clone();
        for (t, m) in mu.iter().enumerate() {
            p[(t, t)] += m;
        }
        Cholesky::new(p).ok_or(MudError::IndefiniteDual)
    }

    /// `x = ½P⁻¹(b + μ)`.
    pub fn primal(&self, mu: &DVector<f64>) -> Result<DVector<f64>> {
        let chol = self.factor(mu)?;
        Ok(chol.solve(&(&self.b + mu)) * 0.5)
    }

    pub fn evaluate(&self, mu: &DVector<f64>) -> Result<DualPoint> {
        let chol = self.factor(mu)?;
        let v = &self.b + mu;
        let x = chol.solve(&v) * 0.5;
        let value = -0.5 * v.dot(&x);
        let gradient = x.map(|t| t * t - t);
        Ok(DualPoint { value, gradient, x })
    }
}

fn check_shapes(c: &DMatrix<f64>, q: &DMatrix<f64>, y_r: &DVector<f64>, w: &DVector<f64>) -> Result<()> {
    if q.shape() != c.shape() || y_r.len() != c.nrows() || w.len() != c.ncols() {
        return Err(MudError::Dimension(format!(
            "C is {:?}, Q is {:?}, y has length {}, W has length {}",
            c.shape(),
            q.shape(),
            y_r.len(),
            w.len()
        )));
    }
    Ok(())
}

/// Dual value `g(μ) = −¼vᵀP⁻¹v` and its gradient `x∘x − x`.
///
/// Errors with [`MudError::IndefiniteDual`] when `P` is not positive definite.
pub fn dual_function_and_gradient(
    mu: &DVector<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    y_r: &DVector<f64>,
    w: &DVector<f64>,
    xi: f64,
) -> Result<(f64, DVector<f64>)> {
    let pt = DualProblem::new(c, q, y_r, w, xi)?.evaluate(mu)?;
    Ok((pt.value, pt.gradient))
}

/// `x = ½P⁻¹(ξ(C − Q)ᵀy_r + μ)`.
pub fn primal_from_dual(
    mu: &DVector<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    y_r: &DVector<f64>,
    w: &DVector<f64>,
    xi: f64,
) -> Result<DVector<f64>> {
    DualProblem::new(c, q, y_r, w, xi)?.primal(mu).map_err(|e| match e {
        MudError::IndefiniteDual => MudError::Singular("P is not positive definite".into()),
        other => other,
    })
}

/// Indices with `x_t > ½`.
pub fn binary_support(x: &DVector<f64>) -> Vec<usize> {
    x.iter()
        .enumerate()
        .filter(|(_, &v)| v > BINARY_THRESHOLD)
        .map(|(j, _)| j)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TlsTermination {
    /// `‖x̂⁽ⁱ⁾ − x̂⁽ⁱ⁻¹⁾‖_∞ < stop_tol`.
    Converged,
    /// No dual iterate certified descent; the previous iterate is kept.
    NoDescent,
    /// `max_outer` iterations were used.
    Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TlsState {
    #[serde(serialize_with = "crate::serde_util::vector")]
    pub x_hat: DVector<f64>,
    #[serde(skip)]
    pub q_hat: DMatrix<f64>,
    /// Diagonal of `W`.
    #[serde(skip)]
    pub w: DVector<f64>,
    #[serde(serialize_with = "crate::serde_util::vector")]
    pub dual_mu: DVector<f64>,
    /// `G̃` after every accepted outer iteration, starting with the initial point.
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TlsOutcome {
    pub support: Vec<usize>,
    pub state: TlsState,
    pub outer_iterations: usize,
    pub termination: TlsTermination,
    pub converged: bool,
    /// Per accepted iteration: `(S⁽ⁱ⁾(x̂⁽ⁱ⁾, Q̂⁽ⁱ⁻¹⁾), reference)` under the descent rule.
    #[serde(skip)]
    pub certificates: Vec<(f64, f64)>,
}

/// ℓp-constrained TLS detection on the real part of `y`.
pub fn lp_tls_detect(codes: &CodeMatrix, y: &[Complex64], cfg: &TlsConfig) -> Result<TlsOutcome> {
    lp_tls_detect_real(codes, &real_part(y), cfg)
}

pub fn lp_tls_detect_real(codes: &CodeMatrix, y_r: &DVector<f64>, cfg: &TlsConfig) -> Result<TlsOutcome> {
    cfg.validate()?;
    let c = codes.matrix();
    let (l, k) = c.shape();
    if y_r.len() != l {
        return Err(MudError::Dimension(format!(
            "received vector has length {}, expected L={l}",
            y_r.len()
        )));
    }
    let xi = cfg.xi;

    // Min-norm least squares start.
    let cct = c * c.transpose();
    let cct_chol = Cholesky::new(cct).ok_or_else(|| MudError::Singular("C Cᵀ is singular".into()))?;
    let mut x = c.tr_mul(&cct_chol.solve(y_r));
    let mut q = DMatrix::zeros(l, k);

    // Cᵀ C and Cᵀ y_r are reused; Q stays rank one, so BᵀB and Bᵀy_r are
    // cheap corrections of them.
    let gram = c.tr_mul(c);
    let cty = c.tr_mul(y_r);
    let mut q_factor: Option<(DVector<f64>, DVector<f64>, f64)> = None;

    let mut w_prev = focuss_weights(&x, cfg.p, cfg.weight_eps);
    let mut s_prev = surrogate(&x, c, &q, y_r, &w_prev, xi);
    let mut trace = vec![tls_objective(&x, c, &q, y_r, &w_prev, xi)];
    let mut certificates = Vec::new();
    let mut mu = DVector::zeros(k);
    let mut termination = TlsTermination::Budget;
    let mut outer = 0;

    while outer < cfg.max_outer {
        outer += 1;
        let w = focuss_weights(&x, cfg.p, cfg.weight_eps);
        let problem = dual_problem_rank_one(&gram, &cty, c, y_r, q_factor.as_ref(), &w, xi);
        let s_ref = match cfg.certificate {
            DescentRule::PreviousSurrogate => s_prev,
            DescentRule::CurrentWeights => surrogate(&x, c, &q, y_r, &w, xi),
        };
        let certifies = |cand: &DVector<f64>| {
            let s = surrogate(cand, c, &q, y_r, &w, xi);
            (s <= s_ref).then_some(s)
        };

        // x(0) minimizes S⁽ⁱ⁾, so no multiplier certifies if it does not.
        let zero = DVector::zeros(k);
        let unconstrained = problem.evaluate(&zero)?;
        let Some(s0) = certifies(&unconstrained.x) else {
            outer -= 1;
            termination = TlsTermination::NoDescent;
            break;
        };
        let fallback = (unconstrained.x, zero, s0);

        let mut current = match problem.evaluate(&mu) {
            Ok(pt) => pt,
            Err(MudError::IndefiniteDual) => {
                mu.fill(0.0);
                problem.evaluate(&mu)?
            }
            Err(e) => return Err(e),
        };
        let mut accepted = certifies(&current.x).map(|s| (current.x.clone(), mu.clone(), s));

        let scale = problem.mean_diagonal();
        let mut step = cfg.dual_step0 * scale;
        'ascent: for _ in 0..cfg.max_dual_steps {
            let mut halvings = 0;
            let (next_mu, next) = loop {
                let trial = &mu + &current.gradient * step;
                match problem.evaluate(&trial) {
                    Ok(pt) if pt.value > current.value => break (trial, pt),
                    Ok(_) | Err(MudError::IndefiniteDual) => {}
                    Err(e) => return Err(e),
                }
                halvings += 1;
                step *= 0.5;
                if halvings > cfg.max_inner {
                    break 'ascent;
                }
            };
            mu = next_mu;
            current = next;
            if let Some(s) = certifies(&current.x) {
                accepted = Some((current.x.clone(), mu.clone(), s));
            }
            step *= 2.0;
        }

        let (x_new, mu_new, s_new) = accepted.unwrap_or(fallback);
        mu = mu_new;
        certificates.push((s_new, s_ref));

        let r = c * &x_new - y_r;
        let denom = 1.0 + x_new.norm_squared();
        q = (&r * x_new.transpose()) / denom;
        q_factor = Some((r, x_new.clone(), 1.0 / denom));

        let step_size = (&x_new - &x).amax();
        s_prev = surrogate(&x_new, c, &q, y_r, &w, xi);
        trace.push(tls_objective(&x_new, c, &q, y_r, &w, xi));
        debug_assert!(
            cfg.certificate == DescentRule::CurrentWeights
                || trace[trace.len() - 1] <= trace[trace.len() - 2] * (1.0 + 1e-9) + 1e-12,
            "G̃ increased: {:?}",
            &trace[trace.len() - 2..]
        );
        x = x_new;
        w_prev = w;
        if step_size < cfg.stop_tol {
            termination = TlsTermination::Converged;
            break;
        }
    }

    Ok(TlsOutcome {
        support: binary_support(&x),
        state: TlsState {
            x_hat: x,
            q_hat: q,
            w: w_prev,
            dual_mu: mu,
            objective_trace: trace,
        },
        outer_iterations: outer,
        converged: termination != TlsTermination::Budget,
        termination,
        certificates,
    })
}

/// `A = W + (ξ/2)BᵀB`, `b = ξBᵀy_r` for `B = C − s·r xᵀ`, from `CᵀC` and `Cᵀy_r`.
fn dual_problem_rank_one(
    gram: &DMatrix<f64>,
    cty: &DVector<f64>,
    c: &DMatrix<f64>,
    y_r: &DVector<f64>,
    q_factor: Option<&(DVector<f64>, DVector<f64>, f64)>,
    w: &DVector<f64>,
    xi: f64,
) -> DualProblem {
    let mut btb = gram.clone();
    let mut bty = cty.clone();
    if let Some((r, xq, s)) = q_factor {
        // BᵀB = CᵀC − s(Cᵀr)xᵀ − s x(Cᵀr)ᵀ + s²‖r‖² x xᵀ
        let ctr = c.tr_mul(r);
        btb.ger(-s, &ctr, xq, 1.0);
        btb.ger(-s, xq, &ctr, 1.0);
        btb.ger(s * s * r.norm_squared(), xq, xq, 1.0);
        // Bᵀy = Cᵀy − s x (rᵀy)
        bty.axpy(-s * r.dot(y_r), xq, 1.0);
    }
    let mut a = btb * (0.5 * xi);
    for (t, wt) in w.iter().enumerate() {
        a[(t, t)] += wt;
    }
    DualProblem::from_parts(a, bty * xi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LassoOptions {
    /// Absolute duality-gap tolerance.
    pub gap_tol: f64,
    pub max_sweeps: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            gap_tol: 1e-8,
            max_sweeps: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LassoOutcome {
    pub support: Vec<usize>,
    #[serde(serialize_with = "crate::serde_util::vector")]
    pub x: DVector<f64>,
    pub duality_gap: f64,
    pub sweeps: usize,
    pub converged: bool,
}

/// Lasso detection on the real part of `y`.
pub fn lasso_detect(codes: &CodeMatrix, y: &[Complex64], xi: f64) -> Result<LassoOutcome> {
    lasso_detect_real(codes.matrix(), &real_part(y), xi, &LassoOptions::default())
}

/// Cyclic coordinate descent for `min ½‖y_r − Cx‖² + (1/ξ)‖x‖₁`, stopped on the
/// duality gap. The dual point is the residual scaled into the feasible set
/// `‖Cᵀθ‖_∞ ≤ 1/ξ`.
pub fn lasso_detect_real(c: &DMatrix<f64>, y_r: &DVector<f64>, xi: f64, opts: &LassoOptions) -> Result<LassoOutcome> {
    if !(xi > 0.0) {
        return Err(param_err("lasso.xi", format!("must be positive, got {xi}")));
    }
    let (l, k) = c.shape();
    if y_r.len() != l {
        return Err(MudError::Dimension(format!(
            "received vector has length {}, expected L={l}",
            y_r.len()
        )));
    }
    let lambda = 1.0 / xi;
    let col_sq: Vec<f64> = c.column_iter().map(|col| col.norm_squared()).collect();
    let mut x = DVector::<f64>::zeros(k);
    let mut r = y_r.clone();
    let mut sweeps = 0;
    // Warm-started path from the smallest penalty with an all-zero solution
    // down to the target; small penalties are very slow from a cold start.
    let lambda_max = c.tr_mul(y_r).amax();
    let loose_tol = opts.gap_tol.max(PATH_GAP_FRACTION * 0.5 * y_r.norm_squared());
    let mut stage = lambda_max * PATH_RATIO;
    while stage > lambda {
        cd_solve(
            c,
            &col_sq,
            y_r,
            stage,
            loose_tol,
            opts.max_sweeps,
            &mut x,
            &mut r,
            &mut sweeps,
        );
        stage *= PATH_RATIO;
    }
    let gap = cd_solve(
        c,
        &col_sq,
        y_r,
        lambda,
        opts.gap_tol,
        opts.max_sweeps,
        &mut x,
        &mut r,
        &mut sweeps,
    );
    Ok(LassoOutcome {
        support: binary_support(&x),
        converged: gap <= opts.gap_tol,
        x,
        duality_gap: gap,
        sweeps,
    })
}

const PATH_RATIO: f64 = 0.5;
const PATH_GAP_FRACTION: f64 = 1e-6;
const POLISH_STEPS: usize = 1;

/// Runs coordinate descent at a fixed penalty until the duality gap drops to
/// `tol` or `sweeps` reaches `budget`; returns the final gap.
#[allow(clippy::too_many_arguments)]
fn cd_solve(
    c: &DMatrix<f64>,
    col_sq: &[f64],
    y_r: &DVector<f64>,
    lambda: f64,
    tol: f64,
    budget: usize,
    x: &mut DVector<f64>,
    r: &mut DVector<f64>,
    sweeps: &mut usize,
) -> f64 {
    let k = x.len();
    let mut gap = lasso_gap(c, y_r, x, r, lambda);
    // Full sweeps alternate with sweeps restricted to the nonzero coordinates,
    // which is where almost all of the work happens once the support settles.
    while gap > tol && *sweeps < budget {
        *sweeps += 1;
        cd_sweep(c, col_sq, lambda, x, r, 0..k);
        gap = lasso_gap(c, y_r, x, r, lambda);
        if gap <= tol {
            break;
        }
        let active: Vec<usize> = (0..k).filter(|&j| x[j] != 0.0).collect();
        gap = polish(c, y_r, lambda, &active, x, r, gap);
        if gap <= tol {
            break;
        }
        for _ in 0..ACTIVE_SWEEPS {
            if *sweeps >= budget {
                break;
            }
            *sweeps += 1;
            let change = cd_sweep(c, col_sq, lambda, x, r, active.iter().copied());
            if change < 1e-12 {
                break;
            }
        }
        gap = lasso_gap(c, y_r, x, r, lambda);
        if gap > tol {
            gap = polish(c, y_r, lambda, &active, x, r, gap);
        }
    }
    gap
}

/// Active-set refinement: moves toward the minimizer of the objective with
/// the signs on `active` held fixed, dropping coordinates that cross zero on
/// the way. Each step lowers the objective.
fn polish(
    c: &DMatrix<f64>,
    y_r: &DVector<f64>,
    lambda: f64,
    active: &[usize],
    x: &mut DVector<f64>,
    r: &mut DVector<f64>,
    gap: f64,
) -> f64 {
    let mut active = active.to_vec();
    let mut moved = false;
    for _ in 0..POLISH_STEPS {
        if active.is_empty() {
            break;
        }
        let cs = c.select_columns(&active);
        let signs = DVector::from_iterator(active.len(), active.iter().map(|&j| x[j].signum()));
        let target = if active.len() > c.nrows() {
            // Residual-preserving direction that lowers the ℓ1 term.
            let Some(chol) = (&cs * cs.transpose()).cholesky() else {
                break;
            };
            let d = cs.tr_mul(&chol.solve(&(&cs * &signs))) - &signs;
            if d.amax() < 1e-12 {
                break;
            }
            let xs = DVector::from_iterator(active.len(), active.iter().map(|&j| x[j]));
            // Far enough along `d` that some coordinate must cross zero.
            let reach = xs.amax() / d.iter().zip(signs.iter()).map(|(v, s)| -v * s).fold(0.0, f64::max);
            if !reach.is_finite() {
                break;
            }
            xs + d * (2.0 * reach)
        } else {
            let Some(chol) = cs.tr_mul(&cs).cholesky() else {
                break;
            };
            chol.solve(&(cs.tr_mul(y_r) - signs.scale(lambda)))
        };
        let mut step = 1.0;
        let mut blocking = None;
        for (i, &j) in active.iter().enumerate() {
            if target[i] * signs[i] <= 0.0 {
                let t = x[j] / (x[j] - target[i]);
                if t < step {
                    step = t;
                    blocking = Some(i);
                }
            }
        }
        for (i, &j) in active.iter().enumerate() {
            x[j] += step * (target[i] - x[j]);
        }
        moved = true;
        match blocking {
            Some(i) => {
                x[active[i]] = 0.0;
                active.remove(i);
            }
            None => break,
        }
    }
    if !moved {
        return gap;
    }
    *r = y_r - c * &*x;
    lasso_gap(c, y_r, x, r, lambda)
}

const ACTIVE_SWEEPS: usize = 100;

/// One coordinate descent pass over `coords`; returns the largest coordinate change.
fn cd_sweep(
    c: &DMatrix<f64>,
    col_sq: &[f64],
    lambda: f64,
    x: &mut DVector<f64>,
    r: &mut DVector<f64>,
    coords: impl Iterator<Item = usize>,
) -> f64 {
    let mut change = 0.0f64;
    for j in coords {
        if col_sq[j] == 0.0 {
            continue;
        }
        let col = c.column(j);
        let old = x[j];
        let rho = col.dot(r) + col_sq[j] * old;
        let new = soft_threshold(rho, lambda) / col_sq[j];
        if new != old {
            r.axpy(old - new, &col, 1.0);
            x[j] = new;
            change = change.max((new - old).abs());
        }
    }
    change
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

fn lasso_gap(c: &DMatrix<f64>, y: &DVector<f64>, x: &DVector<f64>, r: &DVector<f64>, lambda: f64) -> f64 {
    let corr = c.tr_mul(r).amax();
    let scale = if corr > lambda { lambda / corr } else { 1.0 };
    let theta = r * scale;
    let primal = 0.5 * r.norm_squared() + lambda * x.lp_norm(1);
    let dual = 0.5 * y.norm_squared() - 0.5 * (y - &theta).norm_squared();
    (primal - dual).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::generate_code_matrix;
    use crate::seed::rng_from_seed;
    use rand::Rng;

    fn random_state(seed: u64, l: usize, k: usize) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let mut rng = rng_from_seed(seed);
        let c = generate_code_matrix(l, k, seed).unwrap().matrix().clone();
        let q = DMatrix::from_fn(l, k, |_, _| rng.random_range(-0.2..0.2));
        let y = DVector::from_fn(l, |_, _| rng.random_range(-2.0..2.0));
        let w = DVector::from_fn(k, |_, _| rng.random_range(0.5..5.0));
        (c, q, y, w)
    }

    fn loss_q(x: &DVector<f64>, c: &DMatrix<f64>, q: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
        (y - (c - q) * x).norm_squared() + q.norm_squared()
    }

    #[test]
    fn q_update_trivial_cases() {
        let (c, _, y, _) = random_state(1, 6, 10);
        assert_eq!(q_update(&DVector::zeros(10), &c, &y), DMatrix::zeros(6, 10));
        let x = DVector::from_fn(10, |i, _| (i % 3) as f64);
        let y_fit = &c * &x;
        assert!(q_update(&x, &c, &y_fit).amax() < 1e-15);
    }

    #[test]
    fn q_update_is_stationary() {
        let (c, _, y, _) = random_state(2, 6, 10);
        let mut rng = rng_from_seed(3);
        let x = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
        let q = q_update(&x, &c, &y);
        // Analytic gradient 2[(y − (C−Q)x)(−x)ᵀ·(−1)] + 2Q = −2 r xᵀ... checked numerically.
        let h = 1e-6;
        let mut max_grad = 0.0f64;
        for i in 0..6 {
            for j in 0..10 {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[(i, j)] += h;
                qm[(i, j)] -= h;
                let g = (loss_q(&x, &c, &qp, &y) - loss_q(&x, &c, &qm, &y)) / (2.0 * h);
                max_grad = max_grad.max(g.abs());
            }
        }
        assert!(max_grad < 1e-8, "{max_grad}");
        // No perturbation in the Frobenius ball improves on the closed form.
        let base = loss_q(&x, &c, &q, &y);
        for _ in 0..50 {
            let d = DMatrix::from_fn(6, 10, |_, _| rng.random_range(-1.0..1.0));
            let d = d.clone() / d.norm() * rng.random_range(1e-4..1.0);
            assert!(loss_q(&x, &c, &(&q + d), &y) >= base - 1e-9);
        }
    }

    #[test]
    fn focuss_weight_limits() {
        let x = DVector::from_vec(vec![0.0, 1.0, -2.0]);
        assert!(focuss_weights(&x, 2.0, 1e-8).iter().all(|&w| w == 1.0));
        let w = focuss_weights(&x, 0.5, 1e-14);
        assert!((w[1] - 1.0).abs() < 1e-12);
        assert!(w[0].is_finite());
        assert!((w[0] - 1e-14f64.powf(-0.75)).abs() / w[0] < 1e-12);
        assert!((w[2] - 2f64.powf(-1.5)).abs() < 1e-12);
    }

    #[test]
    fn dual_gradient_matches_finite_differences() {
        let h = 1e-5;
        let mut worst = 0.0f64;
        for seed in 0..100 {
            let (c, q, y, w) = random_state(seed, 6, 10);
            let mut rng = rng_from_seed(seed + 1000);
            let mu = DVector::from_fn(10, |_, _| rng.random_range(-0.4..2.0));
            let (_, grad) = dual_function_and_gradient(&mu, &c, &q, &y, &w, 0.7).unwrap();
            for t in 0..10 {
                let mut mp = mu.clone();
                let mut mm = mu.clone();
                mp[t] += h;
                mm[t] -= h;
                let gp = dual_function_and_gradient(&mp, &c, &q, &y, &w, 0.7).unwrap().0;
                let gm = dual_function_and_gradient(&mm, &c, &q, &y, &w, 0.7).unwrap().0;
                worst = worst.max(((gp - gm) / (2.0 * h) - grad[t]).abs());
            }
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn dual_at_origin_with_zero_drive() {
        let c = DMatrix::from_row_slice(2, 3, &[1.0, -1.0, 1.0, 1.0, 1.0, -1.0]);
        let (value, grad) = dual_function_and_gradient(
            &DVector::zeros(3),
            &c,
            &DMatrix::zeros(2, 3),
            &DVector::zeros(2),
            &DVector::from_element(3, 1.0),
            2.0,
        )
        .unwrap();
        assert_eq!(value, 0.0);
        assert_eq!(grad, DVector::zeros(3));
    }

    #[test]
    fn dual_is_concave_along_segments() {
        let mut rng = rng_from_seed(9);
        for seed in 0..40 {
            let (c, q, y, w) = random_state(seed, 6, 10);
            let a = DVector::from_fn(10, |_, _| rng.random_range(-0.4..3.0));
            let b = DVector::from_fn(10, |_, _| rng.random_range(-0.4..3.0));
            let mid = (&a + &b) * 0.5;
            let g = |m: &DVector<f64>| dual_function_and_gradient(m, &c, &q, &y, &w, 1.3).unwrap().0;
            assert!(g(&mid) >= 0.5 * (g(&a) + g(&b)) - 1e-9);
        }
    }

    #[test]
    fn indefinite_dual_is_reported() {
        let (c, q, y, w) = random_state(4, 6, 10);
        let mu = DVector::from_element(10, -1e3);
        assert!(matches!(
            dual_function_and_gradient(&mu, &c, &q, &y, &w, 1.0),
            Err(MudError::IndefiniteDual)
        ));
        assert!(matches!(
            primal_from_dual(&mu, &c, &q, &y, &w, 1.0),
            Err(MudError::Singular(_))
        ));
    }

    #[test]
    fn primal_at_zero_dual_minimizes_surrogate() {
        let (c, q, y, w) = random_state(5, 6, 10);
        let xi = 2.5;
        let x = primal_from_dual(&DVector::zeros(10), &c, &q, &y, &w, xi).unwrap();
        // ∇S = −ξBᵀ(y − Bx) + 2Wx
        let b = &c - &q;
        let grad = -(b.tr_mul(&(&y - &b * &x))) * xi + x.component_mul(&w) * 2.0;
        assert!(grad.amax() < 1e-8, "{}", grad.amax());
        assert_eq!(
            primal_from_dual(&DVector::zeros(10), &c, &q, &DVector::zeros(6), &w, xi).unwrap(),
            DVector::zeros(10)
        );
    }

    #[test]
    fn primal_two_by_two_by_hand() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, -1.0]);
        let q = DMatrix::zeros(2, 2);
        let y = DVector::from_vec(vec![1.0, 0.5]);
        let w = DVector::from_vec(vec![2.0, 3.0]);
        let mu = DVector::from_vec(vec![0.5, -0.25]);
        let xi = 1.5;
        // CᵀC = 2I, so P = diag(2 + 1.5 + 0.5, 3 + 1.5 − 0.25) = diag(4, 4.25)
        // ξCᵀy = 1.5·(1.5, 0.5) = (2.25, 0.75); v = (2.75, 0.5)
        let expected = [0.5 * 2.75 / 4.0, 0.5 * 0.5 / 4.25];
        let x = primal_from_dual(&mu, &c, &q, &y, &w, xi).unwrap();
        assert!((x[0] - expected[0]).abs() < 1e-10);
        assert!((x[1] - expected[1]).abs() < 1e-10);
    }

    #[test]
    fn rank_one_assembly_matches_direct() {
        let (c, _, y, w) = random_state(6, 6, 10);
        let mut rng = rng_from_seed(6);
        let x = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
        let q = q_update(&x, &c, &y);
        let r = &c * &x - &y;
        let s = 1.0 / (1.0 + x.norm_squared());
        let fast = dual_problem_rank_one(&c.tr_mul(&c), &c.tr_mul(&y), &c, &y, Some(&(r, x, s)), &w, 0.9);
        let direct = DualProblem::new(&c, &q, &y, &w, 0.9).unwrap();
        assert!((fast.a - direct.a).amax() < 1e-12);
        assert!((fast.b - direct.b).amax() < 1e-12);
    }

    #[test]
    fn zero_signal_gives_empty_support() {
        let codes = generate_code_matrix(16, 32, 1).unwrap();
        let out = lp_tls_detect_real(&codes, &DVector::zeros(16), &TlsConfig::default()).unwrap();
        assert!(out.support.is_empty());
        assert_eq!(out.state.x_hat, DVector::zeros(32));
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = TlsConfig {
            p: 0.0,
            ..TlsConfig::default()
        };
        match bad.validate() {
            Err(MudError::Parameter { field, .. }) => assert_eq!(field, "tls.p"),
            other => panic!("{other:?}"),
        }
        assert!(TlsConfig {
            stop_tol: 1.5,
            ..TlsConfig::default()
        }
        .validate()
        .is_err());
        assert!(TlsConfig {
            xi: -1.0,
            ..TlsConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn default_xi_is_capped() {
        assert_eq!(default_xi(256, 0.0), XI_CAP);
        let xi = default_xi(256, 0.04);
        assert!((xi - (2.0 * 256f64.ln()).sqrt() / 0.2).abs() < 1e-12);
    }

    #[test]
    fn lasso_orthogonal_design_is_soft_thresholding() {
        // Orthogonal columns of norm² 4: x = S_{λ}(Cᵀy)/4.
        let c = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 1.0, 1.0, 1.0, 1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0, 1.0,
            ],
        );
        let y = DVector::from_vec(vec![2.0, -0.3, 1.1, 0.4]);
        let xi = 1.0 / 0.8;
        let out = lasso_detect_real(&c, &y, xi, &LassoOptions::default()).unwrap();
        let cty = c.tr_mul(&y);
        for j in 0..4 {
            let expected = soft_threshold(cty[j], 0.8) / 4.0;
            assert!((out.x[j] - expected).abs() < 1e-10, "{j}");
        }
        assert!(out.duality_gap <= 1e-8);
    }

    #[test]
    fn lasso_null_solution_above_threshold() {
        let (c, _, y, _) = random_state(7, 6, 10);
        let lam = c.tr_mul(&y).amax();
        let out = lasso_detect_real(&c, &y, 1.0 / lam, &LassoOptions::default()).unwrap();
        assert_eq!(out.x, DVector::zeros(10));
        assert!(out.support.is_empty());
    }

    #[test]
    fn lasso_reaches_gap_tolerance() {
        for seed in 0..20 {
            let (c, _, y, _) = random_state(seed, 12, 30);
            let out = lasso_detect_real(&c, &y, 0.5, &LassoOptions::default()).unwrap();
            assert!(
                out.converged && out.duality_gap <= 1e-8,
                "seed {seed}: {}",
                out.duality_gap
            );
        }
    }

    #[test]
    fn lasso_converges_with_tiny_and_dense_penalties() {
        for seed in 0..5 {
            let c = generate_code_matrix(16, 32, seed).unwrap().matrix().clone();
            let y = c.column(3) + c.column(20);
            let out = lasso_detect_real(&c, &y, 1e6, &LassoOptions::default()).unwrap();
            assert!(out.converged, "seed {seed}: {}", out.duality_gap);
            assert_eq!(out.support, vec![3, 20]);

            // Nearly as many nonzeros as rows.
            let (c, _, y, _) = random_state(seed, 48, 96);
            let out = lasso_detect_real(&c, &y, 50.0, &LassoOptions::default()).unwrap();
            assert!(out.converged, "seed {seed}: {}", out.duality_gap);
        }
    }

    proptest::proptest! {
        #[test]
        fn lasso_solution_satisfies_kkt(seed in 0u64..300, xi in 0.2f64..50.0) {
            let (c, _, y, _) = random_state(seed, 10, 20);
            let out = lasso_detect_real(&c, &y, xi, &LassoOptions::default()).unwrap();
            proptest::prop_assert!(out.converged);
            let lambda = 1.0 / xi;
            let corr = c.tr_mul(&(&y - &c * &out.x));
            for (j, v) in out.x.iter().enumerate() {
                if *v == 0.0 {
                    proptest::prop_assert!(corr[j].abs() <= lambda * (1.0 + 1e-3) + 1e-6);
                } else {
                    proptest::prop_assert!((corr[j] - lambda * v.signum()).abs() <= 1e-3 * lambda + 1e-6);
                }
            }
        }

        #[test]
        fn q_update_never_loses_to_a_perturbation(seed in 0u64..300, scale in 1e-4f64..1.0) {
            let (c, _, y, _) = random_state(seed, 6, 10);
            let mut rng = rng_from_seed(seed ^ 0xabc);
            let x = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
            let q = q_update(&x, &c, &y);
            let d = DMatrix::from_fn(6, 10, |_, _| rng.random_range(-1.0..1.0));
            let d = d.clone() / d.norm() * scale;
            proptest::prop_assert!(loss_q(&x, &c, &(&q + d), &y) >= loss_q(&x, &c, &q, &y) - 1e-9);
        }
    }
}
