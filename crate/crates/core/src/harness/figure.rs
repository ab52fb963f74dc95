//! Parameter grids of the predefined figure panels, run through [`run_sweep`].

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::Serialize;

use super::config::{Algorithm, ExperimentConfig};
use super::sweep::{csv_err, run_sweep};
use crate::error::{param_err, MudError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum FigureId {
    #[serde(rename = "1")]
    F1,
    #[serde(rename = "2a")]
    F2a,
    #[serde(rename = "2b")]
    F2b,
    #[serde(rename = "3a")]
    F3a,
    #[serde(rename = "3b")]
    F3b,
    #[serde(rename = "4a")]
    F4a,
    #[serde(rename = "4b")]
    F4b,
}

impl FigureId {
    pub const ALL: [FigureId; 7] = [
        FigureId::F1,
        FigureId::F2a,
        FigureId::F2b,
        FigureId::F3a,
        FigureId::F3b,
        FigureId::F4a,
        FigureId::F4b,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FigureId::F1 => "1",
            FigureId::F2a => "2a",
            FigureId::F2b => "2b",
            FigureId::F3a => "3a",
            FigureId::F3b => "3b",
            FigureId::F4a => "4a",
            FigureId::F4b => "4b",
        }
    }

    /// Algorithms drawn in the panel.
    pub fn algorithms(self) -> Vec<Algorithm> {
        use Algorithm::*;
        match self {
            FigureId::F1 => vec![CmudD1, CmudD2, Lasso, Tls],
            FigureId::F2a | FigureId::F3a => vec![CmudD1, CmudD2],
            FigureId::F2b | FigureId::F3b => vec![Lasso, Tls],
            FigureId::F4a => vec![CmudD1],
            FigureId::F4b => vec![Tls],
        }
    }

    /// Default user counts on the horizontal axis.
    pub fn default_m_list(self) -> Vec<usize> {
        match self {
            FigureId::F1 => vec![2, 4, 6, 8, 10, 12, 16, 20, 24, 28, 32, 36, 40, 44, 48, 52, 56, 60],
            FigureId::F2a | FigureId::F3a => (1..=12).collect(),
            FigureId::F2b | FigureId::F3b | FigureId::F4a | FigureId::F4b => (1..=12).map(|m| 2 * m).collect(),
        }
    }

    /// `(K, σ_e, σ_η, σ_ϑ)` of every curve family in the panel.
    pub fn grid(self) -> Vec<GridPoint> {
        let point = |k, sigma_e, sigma_eta, sigma_theta| GridPoint {
            k,
            sigma_e,
            sigma_eta,
            sigma_theta,
        };
        match self {
            FigureId::F1 => vec![point(256, 0.01, 0.01, 0.01)],
            FigureId::F2a | FigureId::F2b => [0.2, 0.5].map(|st| point(256, 0.15, 0.15, st)).to_vec(),
            FigureId::F3a | FigureId::F3b => [0.1, 0.15, 0.2].map(|s| point(256, s, s, 0.2)).to_vec(),
            FigureId::F4a | FigureId::F4b => [200, 250, 300, 400].map(|k| point(k, 0.1, 0.1, 0.2)).to_vec(),
        }
    }
}

impl fmt::Display for FigureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for FigureId {
    type Err = MudError;

    fn from_str(s: &str) -> Result<Self> {
        FigureId::ALL.into_iter().find(|f| f.as_str() == s).ok_or_else(|| {
            param_err(
                "figure",
                format!("unknown figure `{s}`, expected one of 1, 2a, 2b, 3a, 3b, 4a, 4b"),
            )
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridPoint {
    #[serde(rename = "K")]
    pub k: usize,
    pub sigma_e: f64,
    pub sigma_eta: f64,
    pub sigma_theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FigureRow {
    pub figure: FigureId,
    #[serde(rename = "K")]
    pub k: usize,
    pub sigma_e: f64,
    pub sigma_eta: f64,
    pub sigma_theta: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub algorithm: Algorithm,
    pub trials: usize,
    pub failures: usize,
    pub p_e: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// One sweep config per grid point. `L`, trial count, seeds and solver
/// settings come from `base`; user counts above `K` are dropped.
pub fn figure_configs(base: &ExperimentConfig, figure: FigureId, m_list: Option<&[usize]>) -> Vec<ExperimentConfig> {
    let ms = m_list.map_or_else(|| figure.default_m_list(), <[usize]>::to_vec);
    figure
        .grid()
        .into_iter()
        .map(|p| {
            let mut cfg = base.clone();
            cfg.k = p.k;
            cfg.channel.sigma_e = p.sigma_e;
            cfg.channel.sigma_eta = p.sigma_eta;
            cfg.channel.sigma_theta = p.sigma_theta;
            cfg.algorithms = figure.algorithms();
            cfg.m_list = ms.iter().copied().filter(|&m| m <= p.k).collect();
            cfg
        })
        .collect()
}

/// Runs the figure's grid and returns one row per `(grid point, M, algorithm)`.
pub fn emit_figure_data(base: &ExperimentConfig, figure: FigureId, m_list: Option<&[usize]>) -> Result<Vec<FigureRow>> {
    let mut rows = Vec::new();
    for cfg in figure_configs(base, figure, m_list) {
        let out = run_sweep(&cfg)?;
        rows.extend(out.summary.points.iter().map(|p| FigureRow {
            figure,
            k: cfg.k,
            sigma_e: cfg.channel.sigma_e,
            sigma_eta: cfg.channel.sigma_eta,
            sigma_theta: cfg.channel.sigma_theta,
            m: p.m,
            algorithm: p.algorithm,
            trials: p.trials,
            failures: p.failures,
            p_e: p.p_e,
            ci_low: p.ci_low,
            ci_high: p.ci_high,
        }));
    }
    Ok(rows)
}

pub fn write_figure_csv<W: Write>(rows: &[FigureRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
