//! Experiment configuration, read from TOML.
//!
//! ```toml
//! L = 144
//! K = 256
//! M_list = [2, 4, 10]
//! trials = 400
//! master_seed = 1
//! algorithms = ["cmud-d1", "cmud-d2", "lasso", "tls"]
//!
//! [channel]
//! sigma_e = 0.01
//! sigma_eta = 0.01
//! sigma_theta = 0.01
//!
//! [cmud]
//! m0_policy = "estimated"
//!
//! [tls]
//! xi = "auto"
//! ```
//!
//! Every key has a default; unknown keys are rejected.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::channel::ChannelParams;
use crate::cmud::KappaPolicy;
use crate::codebook::{generate_code_matrix, load_code_matrix, structured_code_matrix, CodeMatrix};
use crate::decoder::SolverOptions;
use crate::error::{param_err, read_file, MudError, Result};
use crate::sparse_tls::{default_xi, DescentRule, LassoOptions, TlsConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// CMUD with `D = C/L`.
    CmudScaled,
    /// CMUD with Decoder-I.
    CmudD1,
    /// CMUD with Decoder-II.
    CmudD2,
    Lasso,
    Tls,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::CmudScaled,
        Algorithm::CmudD1,
        Algorithm::CmudD2,
        Algorithm::Lasso,
        Algorithm::Tls,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::CmudScaled => "cmud-scaled",
            Algorithm::CmudD1 => "cmud-d1",
            Algorithm::CmudD2 => "cmud-d2",
            Algorithm::Lasso => "lasso",
            Algorithm::Tls => "tls",
        }
    }

    pub fn is_cmud(self) -> bool {
        matches!(self, Algorithm::CmudScaled | Algorithm::CmudD1 | Algorithm::CmudD2)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = MudError;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| param_err("algorithms", format!("unknown algorithm `{s}`")))
    }
}

/// Where the code bank comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum CodeSource {
    /// Seeded pseudo-random ±1 codes.
    Random { seed: u64 },
    /// Hadamard columns plus their quadratic-modulated copies.
    Structured,
    /// A code matrix file.
    File { path: PathBuf },
}

impl Default for CodeSource {
    fn default() -> Self {
        CodeSource::Random { seed: 1 }
    }
}

impl CodeSource {
    pub fn build(&self, l: usize, k: usize) -> Result<CodeMatrix> {
        match self {
            CodeSource::Random { seed } => generate_code_matrix(l, k, *seed),
            CodeSource::Structured => structured_code_matrix(l, k),
            CodeSource::File { path } => {
                let codes = load_code_matrix(path)?;
                if (codes.len(), codes.num_codes()) != (l, k) {
                    return Err(MudError::Dimension(format!(
                        "{} holds a {}x{} bank, config asks for L={l}, K={k}",
                        path.display(),
                        codes.len(),
                        codes.num_codes()
                    )));
                }
                Ok(codes)
            }
        }
    }
}

/// Channel statistics as standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSection {
    pub sigma_h: f64,
    pub sigma_e: f64,
    pub sigma_eta: f64,
    pub theta_deg: f64,
    /// Receiver noise `σ_ϑ`.
    pub sigma_theta: f64,
}

impl Default for ChannelSection {
    fn default() -> Self {
        Self {
            sigma_h: 1.0,
            sigma_e: 0.01,
            sigma_eta: 0.01,
            theta_deg: 5.0,
            sigma_theta: 0.01,
        }
    }
}

impl ChannelSection {
    pub fn params(&self) -> ChannelParams {
        ChannelParams::from_std(
            self.sigma_h,
            self.sigma_e,
            self.sigma_eta,
            self.theta_deg,
            self.sigma_theta,
        )
    }
}

/// How the detector learns `M₀` for each trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum M0Policy {
    /// Energy-based estimate from the received vector, at least 1.
    #[default]
    Estimated,
    /// The configured `cmud.m0`.
    Fixed,
    /// The true user count, at least 1.
    True,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmudSection {
    pub nu: f64,
    pub m0_policy: M0Policy,
    pub m0: Option<usize>,
    pub kappa_policy: KappaPolicy,
    /// Relative change of `M₀`, `σ_r²` or `σ_ϑ²` that forces a decoder redesign.
    pub design_drift: f64,
    pub solver: SolverOptions,
}

impl Default for CmudSection {
    fn default() -> Self {
        Self {
            nu: 1.0,
            m0_policy: M0Policy::Estimated,
            m0: None,
            kappa_policy: KappaPolicy::Window,
            design_drift: 0.2,
            solver: SolverOptions::default(),
        }
    }
}

/// `ξ` given explicitly or derived from the operating point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum XiChoice {
    /// `sqrt(2 ln K)/σ_w` with `σ_w² = Mσ_r² + σ_ϑ²/2`.
    #[default]
    Auto,
    Value(f64),
}

impl XiChoice {
    pub fn resolve(self, k: usize, m: usize, sigma_r_sq: f64, sigma_noise_sq: f64) -> f64 {
        match self {
            XiChoice::Auto => default_xi(k, m as f64 * sigma_r_sq + sigma_noise_sq / 2.0),
            XiChoice::Value(v) => v,
        }
    }

    fn validate(self, field: &'static str) -> Result<()> {
        match self {
            XiChoice::Value(v) if !(v > 0.0 && v.is_finite()) => {
                Err(param_err(field, format!("must be positive and finite, got {v}")))
            }
            _ => Ok(()),
        }
    }
}

impl Serialize for XiChoice {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            XiChoice::Auto => s.serialize_str("auto"),
            XiChoice::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for XiChoice {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Number(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(XiChoice::Value(v)),
            Repr::Text(t) if t == "auto" => Ok(XiChoice::Auto),
            Repr::Text(t) => Err(serde::de::Error::custom(format!(
                "expected a number or \"auto\", got \"{t}\""
            ))),
        }
    }
}

/// Solver settings for the ℓp-TLS detector; `xi` may be `"auto"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TlsSection {
    pub xi: XiChoice,
    pub p: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub max_dual_steps: usize,
    pub stop_tol: f64,
    pub weight_eps: f64,
    pub dual_step0: f64,
    pub certificate: DescentRule,
}

impl Default for TlsSection {
    fn default() -> Self {
        let base = TlsConfig::default();
        Self {
            xi: XiChoice::Auto,
            p: base.p,
            max_outer: base.max_outer,
            max_inner: base.max_inner,
            max_dual_steps: base.max_dual_steps,
            stop_tol: base.stop_tol,
            weight_eps: base.weight_eps,
            dual_step0: base.dual_step0,
            certificate: base.certificate,
        }
    }
}

impl TlsSection {
    pub fn solver_config(&self, xi: f64) -> TlsConfig {
        TlsConfig {
            p: self.p,
            xi,
            max_outer: self.max_outer,
            max_inner: self.max_inner,
            max_dual_steps: self.max_dual_steps,
            stop_tol: self.stop_tol,
            weight_eps: self.weight_eps,
            dual_step0: self.dual_step0,
            certificate: self.certificate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LassoSection {
    pub xi: XiChoice,
    pub gap_tol: f64,
    pub max_sweeps: usize,
}

impl Default for LassoSection {
    fn default() -> Self {
        let base = LassoOptions::default();
        Self {
            xi: XiChoice::Auto,
            gap_tol: base.gap_tol,
            max_sweeps: base.max_sweeps,
        }
    }
}

impl LassoSection {
    pub fn options(&self) -> LassoOptions {
        LassoOptions {
            gap_tol: self.gap_tol,
            max_sweeps: self.max_sweeps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M_list")]
    pub m_list: Vec<usize>,
    pub trials: usize,
    pub master_seed: u64,
    pub algorithms: Vec<Algorithm>,
    /// Percentile level `ϱ` of the λ truncation.
    pub varrho: f64,
    /// Users pick codes with replacement, so two users may share a code.
    pub allow_collisions: bool,
    pub codes: CodeSource,
    pub channel: ChannelSection,
    pub cmud: CmudSection,
    pub tls: TlsSection,
    pub lasso: LassoSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            l: 144,
            k: 256,
            m_list: vec![10],
            trials: 400,
            master_seed: 0,
            algorithms: Algorithm::ALL.to_vec(),
            varrho: 0.95,
            allow_collisions: false,
            codes: CodeSource::default(),
            channel: ChannelSection::default(),
            cmud: CmudSection::default(),
            tls: TlsSection::default(),
            lasso: LassoSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| MudError::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_toml(&read_file(path.as_ref())?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable in TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.l == 0 || self.k == 0 {
            return Err(param_err(
                "L/K",
                format!("must be positive, got L={}, K={}", self.l, self.k),
            ));
        }
        if self.trials == 0 {
            return Err(param_err("trials", "must be at least 1"));
        }
        if self.m_list.is_empty() {
            return Err(param_err("M_list", "must not be empty"));
        }
        if let Some(&m) = self.m_list.iter().find(|&&m| m > self.k) {
            return Err(param_err("M_list", format!("entry {m} exceeds K={}", self.k)));
        }
        if self.algorithms.is_empty() {
            return Err(param_err("algorithms", "must not be empty"));
        }
        if self.algorithms.iter().collect::<BTreeSet<_>>().len() != self.algorithms.len() {
            return Err(param_err("algorithms", "contains duplicates"));
        }
        if !(self.varrho > 0.0 && self.varrho < 1.0) {
            return Err(param_err("varrho", format!("must lie in (0, 1), got {}", self.varrho)));
        }
        self.channel.params().validate()?;
        if !(self.cmud.nu > 0.0) {
            return Err(param_err("cmud.nu", format!("must be positive, got {}", self.cmud.nu)));
        }
        if self.cmud.m0_policy == M0Policy::Fixed && !matches!(self.cmud.m0, Some(m) if m >= 1) {
            return Err(param_err("cmud.m0", "a fixed M0 policy needs cmud.m0 >= 1"));
        }
        if !(self.cmud.design_drift >= 0.0) {
            return Err(param_err("cmud.design_drift", "must be >= 0"));
        }
        if let KappaPolicy::Fixed(v) = self.cmud.kappa_policy {
            if !(v > 0.0 && v.is_finite()) {
                return Err(param_err(
                    "cmud.kappa_policy",
                    format!("fixed value must be positive, got {v}"),
                ));
            }
        }
        self.tls.xi.validate("tls.xi")?;
        self.tls.solver_config(1.0).validate()?;
        self.lasso.xi.validate("lasso.xi")?;
        if !(self.lasso.gap_tol > 0.0) {
            return Err(param_err("lasso.gap_tol", "must be positive"));
        }
        Ok(())
    }
}
