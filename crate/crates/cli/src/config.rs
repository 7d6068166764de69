//! Experiment configuration: a TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use cts_lab_core::calibrate::{ColumnMapping, Dependent};
use cts_lab_core::clearing::Bidder;
use cts_lab_core::game::{ConjecturedGameSpec, PayoffKind};
use cts_lab_core::learning::{InitOrder, DEFAULT_RHO};
use cts_lab_core::spread::{nyiso_isone_reference, SpreadModel};
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Clear,
    Nash,
    NashUtc,
    NashConjectured,
    Learn,
    Calibrate,
    SpreadStats,
    Verify,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Clear => "clear",
            ExperimentKind::Nash => "nash",
            ExperimentKind::NashUtc => "nash-utc",
            ExperimentKind::NashConjectured => "nash-conjectured",
            ExperimentKind::Learn => "learn",
            ExperimentKind::Calibrate => "calibrate",
            ExperimentKind::SpreadStats => "spread-stats",
            ExperimentKind::Verify => "verify",
        }
    }
}

/// Affine spread, given either by its parameters or by a named reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// `"nyiso-isone"` selects the built-in reference spread.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

impl ModelConfig {
    pub fn build(&self) -> Result<SpreadModel, CliError> {
        match (&self.reference, self.alpha, self.beta) {
            (Some(r), None, None) if r == "nyiso-isone" => Ok(nyiso_isone_reference()),
            (Some(r), None, None) => Err(CliError::Config(format!("unknown reference spread {r:?}"))),
            (None, Some(a), Some(b)) => SpreadModel::affine(a, b).map_err(|e| CliError::Config(e.to_string())),
            _ => Err(CliError::Config("model needs either alpha and beta or a reference".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub thetas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NashConfig {
    #[serde(default = "yes")]
    pub require_unique_max: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NashTarget {
    /// Zero-cost baseline equilibrium against the operators' spread.
    #[default]
    Baseline,
    /// Symmetric equilibrium of the conjectured game; bidders conjecture the
    /// settlement spread.
    Conjectured,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningConfig {
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_grid_count")]
    pub grid_count: usize,
    /// Lowest action; defaults to each bidder's fee floor `c B`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_lo: Option<f64>,
    /// Width of the action range above its lowest action.
    #[serde(default = "default_grid_span")]
    pub grid_span: f64,
    #[serde(default)]
    pub init_order: InitOrder,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default = "one")]
    pub replications: usize,
    /// Operators clear against the model scaled by these factors.
    #[serde(default = "unit")]
    pub so_alpha_factor: f64,
    #[serde(default = "unit")]
    pub so_beta_factor: f64,
    #[serde(default)]
    pub nash: NashTarget,
    /// First round of the summary window; defaults to the end of the initial sweep.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_start: Option<usize>,
}

impl Default for LearningConfig {
    fn default() -> Self {
        toml::from_str("").expect("all learning fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub input: PathBuf,
    #[serde(default = "default_dependent")]
    pub dependent: Dependent,
    #[serde(default)]
    pub columns: ColumnMapping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default = "default_oracle_grid")]
    pub grid_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default = "default_payoff")]
    pub payoff: PayoffKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Informational; the command line names the experiment to run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ExperimentKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bidders: Vec<Bidder>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<ProfileConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nash: Option<NashConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conjectured: Option<ConjecturedGameSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning: Option<LearningConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifyConfig>,
}

fn yes() -> bool {
    true
}
fn one() -> usize {
    1
}
fn unit() -> f64 {
    1.0
}
fn default_rounds() -> usize {
    3000
}
fn default_rho() -> f64 {
    DEFAULT_RHO
}
fn default_grid_count() -> usize {
    10
}
fn default_grid_span() -> f64 {
    6000.0
}
fn default_dependent() -> Dependent {
    Dependent::AreaB
}
fn default_oracle_grid() -> usize {
    cts_lab_core::game::DEFAULT_ORACLE_GRID
}
fn default_payoff() -> PayoffKind {
    PayoffKind::Baseline
}

/// Applies `a.b.c=value` onto a TOML document. The value is read as a TOML
/// literal when it parses as one and as a bare string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key {key:?}")));
    }
    let mut node = doc;
    for part in &path[..path.len() - 1] {
        node = match node {
            Value::Table(t) => t.entry(part.to_string()).or_insert_with(|| Value::Table(Default::default())),
            Value::Array(a) => {
                let i: usize = part
                    .parse()
                    .map_err(|_| CliError::Config(format!("override {key:?}: {part:?} is not an array index")))?;
                let len = a.len();
                a.get_mut(i)
                    .ok_or_else(|| CliError::Config(format!("override {key:?}: index {i} out of {len}")))?
            }
            _ => return Err(CliError::Config(format!("override {key:?} descends into a scalar"))),
        };
    }
    let last = path[path.len() - 1];
    match node {
        Value::Table(t) => {
            t.insert(last.to_string(), value);
        }
        Value::Array(a) => {
            let i: usize = last
                .parse()
                .map_err(|_| CliError::Config(format!("override {key:?}: {last:?} is not an array index")))?;
            let len = a.len();
            *a.get_mut(i).ok_or_else(|| CliError::Config(format!("override {key:?}: index {i} out of {len}")))? = value;
        }
        _ => return Err(CliError::Config(format!("override {key:?} descends into a scalar"))),
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc: Value = Value::Table(toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?);
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        doc.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn spread(&self) -> Result<SpreadModel, CliError> {
        self.model
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [model]".into()))?
            .build()
    }

    pub fn roster(&self) -> Result<&[Bidder], CliError> {
        if self.bidders.is_empty() {
            return Err(CliError::Config("missing [[bidders]]".into()));
        }
        Ok(&self.bidders)
    }

    /// Checks that the sections `kind` needs are present and usable.
    pub fn validate_for(&self, kind: ExperimentKind) -> Result<(), CliError> {
        use ExperimentKind::*;
        let need = |present: bool, what: &str| {
            if present {
                Ok(())
            } else {
                Err(CliError::Config(format!("{} needs {what}", kind.name())))
            }
        };
        match kind {
            Clear | Verify => {
                self.spread()?;
                let n = self.roster()?.len();
                let profile = self.profile.as_ref().ok_or_else(|| CliError::Config(format!("{} needs [profile]", kind.name())))?;
                need(profile.thetas.len() == n, "one profile entry per bidder")?;
            }
            Nash | NashUtc => {
                let m = self.spread()?;
                self.roster()?;
                need(m.affine_params().is_some(), "an affine model")?;
            }
            NashConjectured => {
                let spec = self.conjectured.as_ref().ok_or_else(|| CliError::Config("nash-conjectured needs [conjectured]".into()))?;
                spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
            }
            Learn => {
                self.spread()?;
                self.roster()?;
                need(self.seed.is_some(), "a seed")?;
                let l = self.learning.clone().unwrap_or_default();
                need(l.replications >= 1, "at least one replication")?;
                need(l.grid_count >= 2 && l.grid_span > 0.0, "a grid of at least two actions")?;
                need(l.rounds >= l.grid_count, "rounds covering every action once")?;
                need(l.so_alpha_factor > 0.0 && l.so_beta_factor > 0.0, "positive perturbation factors")?;
                need(l.noise_std >= 0.0 && l.rho >= 0.0, "nonnegative noise and exploration")?;
            }
            Calibrate | SpreadStats => {
                need(self.calibration.is_some(), "[calibration]")?;
            }
        }
        Ok(())
    }
}
