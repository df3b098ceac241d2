//! Declarative scenario configuration: flat TOML with typed scalars, inline
//! numeric arrays, and one level of sections.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Model {
    #[serde(rename = "cm-free")]
    CmFree,
    #[serde(rename = "cm-harmonic")]
    CmHarmonic,
    #[serde(rename = "cm-constant-g")]
    CmConstantG,
    #[serde(rename = "vectorial")]
    Vectorial,
    #[serde(rename = "extended-ef")]
    ExtendedEf,
    #[serde(rename = "elementsum-linear")]
    ElementsumLinear,
    #[serde(rename = "elementsum-harmonic")]
    ElementsumHarmonic,
    #[serde(rename = "sutherland")]
    Sutherland,
    #[serde(rename = "reach-sample")]
    ReachSample,
    #[serde(rename = "rank-table")]
    RankTable,
    #[serde(rename = "stationarity-scan")]
    StationarityScan,
}

impl Model {
    pub fn name(&self) -> &'static str {
        match self {
            Model::CmFree => "cm-free",
            Model::CmHarmonic => "cm-harmonic",
            Model::CmConstantG => "cm-constant-g",
            Model::Vectorial => "vectorial",
            Model::ExtendedEf => "extended-ef",
            Model::ElementsumLinear => "elementsum-linear",
            Model::ElementsumHarmonic => "elementsum-harmonic",
            Model::Sutherland => "sutherland",
            Model::ReachSample => "reach-sample",
            Model::RankTable => "rank-table",
            Model::StationarityScan => "stationarity-scan",
        }
    }

    /// Whether the scenario integrates a trajectory (and therefore needs
    /// t_end, dt_out, tol).
    pub fn is_trajectory(&self) -> bool {
        !matches!(self, Model::RankTable | Model::StationarityScan)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    Csv,
    Json,
    Svg,
}

/// A numeric array that may instead say `"random"`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArrayOrRandom {
    Values(Vec<f64>),
    Keyword(String),
}

impl ArrayOrRandom {
    pub fn resolve(&self, what: &str) -> Result<Option<&[f64]>> {
        match self {
            ArrayOrRandom::Values(v) => Ok(Some(v)),
            ArrayOrRandom::Keyword(k) if k == "random" => Ok(None),
            ArrayOrRandom::Keyword(k) => {
                bail!("field `{what}`: expected an array or \"random\", got \"{k}\"")
            }
        }
    }
}

/// Initial data; which fields are read depends on the model.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positions: Option<ArrayOrRandom>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momenta: Option<ArrayOrRandom>,
    /// Coupling magnitudes per pair (row-major upper triangle).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub couplings: Option<ArrayOrRandom>,
    /// Phases of the Hermitian partner -iL per pair (defaults to zero:
    /// the purely imaginary-symmetric coupling class).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coupling_phases: Option<Vec<f64>>,
    /// Explicit coupling upper triangle, real and imaginary parts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_re: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_im: Option<Vec<f64>>,
    /// N=3 cycle magnitudes (l12, l23, l31) for reach scenarios.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lbar: Option<[f64; 3]>,
    /// Cyclic phase sum for reach scenarios.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi123: Option<f64>,
    /// Pauli coefficients (a0, ax, ay, az) for two-particle matrix scenarios.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_pauli: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_pauli: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi_pauli: Option<[f64; 4]>,
    /// Real symmetric matrices given by rows.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_matrix: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_matrix: Option<Vec<Vec<f64>>>,
    /// Hermitian F·E blocks for the vectorial model (E is the identity).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fe_re: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fe_im: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub model: Model,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt_out: Option<f64>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_outputs")]
    pub outputs: Vec<OutputKind>,
    /// Extended-flow coupling strength ξ.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub xi: Option<f64>,
    /// Trajectory count for reach sampling.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_traj: Option<usize>,
    /// Largest size for the rank table.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_max: Option<usize>,
    /// Keep the trap on for the frozen-coupling model (default true, which
    /// is the configuration the periodicity comparison is made in).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trap: Option<bool>,
    #[serde(default)]
    pub initial: InitialSection,
}

fn default_seed() -> u64 {
    0
}

fn default_tol() -> f64 {
    1e-10
}

fn default_outputs() -> Vec<OutputKind> {
    vec![OutputKind::Csv, OutputKind::Json]
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: ScenarioConfig = toml::from_str(&text)
            .with_context(|| format!("cannot parse config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1e-13..=1e-3).contains(&self.tol) {
            bail!("field `tol`: {} outside [1e-13, 1e-3]", self.tol);
        }
        if self.model.is_trajectory() {
            let t_end = self
                .t_end
                .with_context(|| format!("model {} requires `t_end`", self.model.name()))?;
            if t_end <= 0.0 {
                bail!("field `t_end`: must be positive, got {t_end}");
            }
            let dt = self
                .dt_out
                .with_context(|| format!("model {} requires `dt_out`", self.model.name()))?;
            if dt <= 0.0 || dt > t_end {
                bail!("field `dt_out`: must lie in (0, t_end], got {dt}");
            }
        }
        match self.model {
            Model::ReachSample => {
                if self.initial.lbar.is_none() || self.initial.phi123.is_none() {
                    bail!("reach-sample requires `initial.lbar` and `initial.phi123`");
                }
                if self.n_traj.unwrap_or(0) == 0 {
                    bail!("reach-sample requires `n_traj` > 0");
                }
            }
            Model::RankTable => {
                let n_max = self.n_max.context("rank-table requires `n_max`")?;
                if !(3..=11).contains(&n_max) {
                    bail!("field `n_max`: must lie in [3, 11], got {n_max}");
                }
            }
            Model::StationarityScan => {
                let n = self.n.context("stationarity-scan requires `n`")?;
                if !(3..=8).contains(&n) {
                    bail!("field `n`: stationarity scan covers 3..=8, got {n}");
                }
            }
            Model::ExtendedEf => {
                if self.n.unwrap_or(2) != 2 {
                    bail!("extended-ef is wired to the two-particle Pauli form; set n = 2");
                }
                if self.xi.is_none() {
                    bail!("extended-ef requires `xi`");
                }
                if self.initial.x_pauli.is_none()
                    || self.initial.y_pauli.is_none()
                    || self.initial.phi_pauli.is_none()
                {
                    bail!("extended-ef requires `initial.x_pauli`, `initial.y_pauli`, `initial.phi_pauli`");
                }
            }
            Model::CmFree | Model::CmHarmonic | Model::CmConstantG | Model::Vectorial => {
                if self.n.is_none() {
                    bail!("model {} requires `n`", self.model.name());
                }
            }
            Model::ElementsumLinear | Model::ElementsumHarmonic | Model::Sutherland => {
                if self.n.is_none() {
                    bail!("model {} requires `n`", self.model.name());
                }
            }
        }
        Ok(())
    }

    pub fn n_out(&self) -> usize {
        match (self.t_end, self.dt_out) {
            (Some(t), Some(dt)) => ((t / dt).round() as usize).max(1),
            _ => 1,
        }
    }

    pub fn wants(&self, kind: OutputKind) -> bool {
        self.outputs.contains(&kind)
    }
}
