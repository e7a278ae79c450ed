//! Experiment configuration: JSON sections, defaults, `key=value` overrides
//! and validation.

use std::f64::consts::{FRAC_PI_4, PI};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::coefficients::{CoefficientField, ProblemSpec};
use crate::error::{Error, Result};
use crate::geometry::DEFAULT_ETAS;
use crate::grid::Domain;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Gamma,
    Rho,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_n_cells")]
    pub n_cells: usize,
}

fn default_n_cells() -> usize {
    128
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { n_cells: default_n_cells() }
    }
}

/// Second problem as a perturbation of the first: γ₂ = γ₁ + t·gamma_delta,
/// ρ₂ = ρ₁ + t·rho_delta for every amplitude t; g₂ defaults to g₁.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_delta: Option<CoefficientField>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_delta: Option<CoefficientField>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<CoefficientField>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectorConfig {
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

fn default_sigma() -> f64 {
    0.1 * PI
}

impl Default for SectorConfig {
    fn default() -> Self {
        SectorConfig { sigma: default_sigma() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubeConfig {
    #[serde(default = "default_etas")]
    pub etas: Vec<f64>,
    /// Detection threshold; 10·h·max|D²u| when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_z: Option<f64>,
    /// Depth margins of W, V and Ω_d as fractions of the domain diameter.
    #[serde(default = "default_w_margin")]
    pub w_margin: f64,
    #[serde(default = "default_v_margin")]
    pub v_margin: f64,
    #[serde(default = "default_d_margin")]
    pub d_margin: f64,
    #[serde(default = "default_quantile")]
    pub quantile: f64,
    #[serde(default = "default_window")]
    pub window: f64,
}

fn default_etas() -> Vec<f64> {
    DEFAULT_ETAS.to_vec()
}
fn default_w_margin() -> f64 {
    0.05
}
fn default_v_margin() -> f64 {
    0.1
}
fn default_d_margin() -> f64 {
    0.15
}
fn default_quantile() -> f64 {
    0.01
}
fn default_window() -> f64 {
    2.0
}

impl Default for TubeConfig {
    fn default() -> Self {
        TubeConfig {
            etas: default_etas(),
            tau_z: None,
            w_margin: default_w_margin(),
            v_margin: default_v_margin(),
            d_margin: default_d_margin(),
            quantile: default_quantile(),
            window: default_window(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    /// Sobolev exponent of the interpolation step; must exceed 2.
    #[serde(default = "default_s")]
    pub s: f64,
    #[serde(default = "default_h_band")]
    pub h_band: f64,
    #[serde(default = "default_amplitudes")]
    pub amplitudes: Vec<f64>,
}

fn default_s() -> f64 {
    4.0
}
fn default_h_band() -> f64 {
    0.1
}
fn default_amplitudes() -> Vec<f64> {
    vec![1.0]
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig { s: default_s(), h_band: default_h_band(), amplitudes: default_amplitudes() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructConfig {
    #[serde(default = "default_floor")]
    pub u_floor: f64,
    #[serde(default = "default_floor")]
    pub grad_floor: f64,
    /// Largest relative error accepted by the reconstruct verdict.
    #[serde(default = "default_floor")]
    pub tolerance: f64,
}

fn default_floor() -> f64 {
    0.05
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        ReconstructConfig { u_floor: default_floor(), grad_floor: default_floor(), tolerance: default_floor() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_id")]
    pub id: String,
    #[serde(default)]
    pub mode: Mode,
    pub domain: Domain,
    #[serde(default)]
    pub grid: GridConfig,
    pub problem1: ProblemSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem2: Option<Perturbation>,
    #[serde(default)]
    pub sectors: SectorConfig,
    #[serde(default)]
    pub tube: TubeConfig,
    #[serde(default)]
    pub chain: ChainConfig,
    #[serde(default)]
    pub reconstruct: ReconstructConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

fn default_id() -> String {
    "experiment".into()
}

impl ExperimentConfig {
    /// Range checks that do not depend on the subcommand.
    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        if self.grid.n_cells < 4 {
            return Err(Error::Config(format!("grid.n_cells must be at least 4, got {}", self.grid.n_cells)));
        }
        let sigma = self.sectors.sigma;
        if !(sigma > 0.0 && sigma <= FRAC_PI_4) {
            return Err(Error::Config(format!("sectors.sigma must lie in (0, pi/4], got {sigma}")));
        }
        if !(self.chain.s > 2.0) {
            return Err(Error::Config(format!("chain.s must exceed n = 2, got {}", self.chain.s)));
        }
        if !(self.chain.h_band > 0.0) {
            return Err(Error::Config(format!("chain.h_band must be positive, got {}", self.chain.h_band)));
        }
        if self.chain.amplitudes.is_empty() || self.chain.amplitudes.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::Config("chain.amplitudes must be a nonempty list of nonnegative numbers".into()));
        }
        if self.tube.etas.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
            return Err(Error::Config("tube.etas must lie in (0, 1]".into()));
        }
        for (name, m) in [("w_margin", self.tube.w_margin), ("v_margin", self.tube.v_margin), ("d_margin", self.tube.d_margin)] {
            if !(m >= 0.0 && m < 0.5) {
                return Err(Error::Config(format!("tube.{name} must lie in [0, 0.5), got {m}")));
            }
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        self.problem1.check_continuity(&self.domain).map_err(|e| Error::Config(format!("problem1: {e}")))?;
        if let Some(p2) = &self.problem2 {
            for f in [&p2.gamma_delta, &p2.rho_delta].into_iter().flatten() {
                f.check_continuity(&self.domain).map_err(|e| Error::Config(format!("problem2: {e}")))?;
            }
        }
        Ok(())
    }

    /// The second problem is required by every pipeline that compares two
    /// solutions.
    pub fn require_problem2(&self) -> Result<&Perturbation> {
        self.problem2
            .as_ref()
            .ok_or_else(|| Error::Config("missing section \"problem2\" (required by this subcommand)".into()))
    }
}

/// Sets `a.b.c = value` in a JSON tree, creating objects on the way. The
/// value is parsed as JSON and kept as a string if that fails.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p:?} is not inside an object")))?;
        node = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| Error::Config(format!("override {key:?} does not address an object field")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
    for o in overrides {
        apply_override(&mut v, o)?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config_str(&text, overrides)
}
