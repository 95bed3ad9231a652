//! Run configuration: a single TOML file with unit-suffixed keys.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ensemble::{DEFAULT_FORGETTING, DEFAULT_MEMBERS};
use crate::error::{Error, Result};
use crate::koopman::{KoopmanHyper, DEFAULT_BLEND, DEFAULT_LIFTED_DIM};
use crate::linalg::EIGEN_FLOOR;
use crate::models::{RffConfig, VehicleParams};
use crate::simulator::{Scenario, SensorConfig};

pub const STATE_DIM: usize = 3;
pub const DEFAULT_WINDOW: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Physics,
    Rff,
    Koopman,
}

/// Covariance propagation used for a model's forecast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Jacobian propagation for physics and regressor models, lifted-space
    /// propagation for Koopman models.
    KoopmanLinearization,
    Ensemble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KoopmanSettings {
    pub lifted_dim: usize,
    /// Length scale of the lifting features on normalized states.
    pub bandwidth: f64,
    pub seed: u64,
    pub lambda: KoopmanHyper,
    /// Variance assigned to the feature block of the initial lifted belief.
    pub feature_var: f64,
}

impl Default for KoopmanSettings {
    fn default() -> Self {
        KoopmanSettings {
            lifted_dim: DEFAULT_LIFTED_DIM,
            bandwidth: 2.0,
            seed: 0,
            lambda: KoopmanHyper::default(),
            feature_var: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub kind: ModelKind,
    pub method: Method,
    /// Per-step process noise standard deviations (Jacobian propagation).
    #[serde(default)]
    pub process_noise_std: Option<Vec<f64>>,
    /// Sampling covariance standard deviations (ensemble propagation).
    #[serde(default)]
    pub sampling_std: Option<Vec<f64>>,
    /// Seed the process noise or sampling covariance from one-step residuals
    /// on the training scenarios.
    #[serde(default)]
    pub calibrate: bool,
    #[serde(default = "default_members")]
    pub members: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Model whose prediction is blended into the Koopman forecast; the
    /// Koopman model itself when absent.
    #[serde(default)]
    pub direct: Option<String>,
    /// Pre-trained model file; trained from `training` scenarios when absent.
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub rff: RffConfig,
    #[serde(default)]
    pub koopman: KoopmanSettings,
}

fn default_members() -> usize {
    DEFAULT_MEMBERS
}
fn default_alpha() -> f64 {
    DEFAULT_BLEND
}

impl ModelConfig {
    pub fn new(name: &str, kind: ModelKind, method: Method) -> Self {
        ModelConfig {
            name: name.to_owned(),
            kind,
            method,
            process_noise_std: None,
            sampling_std: None,
            calibrate: false,
            members: DEFAULT_MEMBERS,
            alpha: DEFAULT_BLEND,
            direct: None,
            file: None,
            rff: RffConfig::default(),
            koopman: KoopmanSettings::default(),
        }
    }

    fn needs_training(&self) -> bool {
        self.kind != ModelKind::Physics && self.file.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub window: usize,
    pub forgetting: f64,
    pub eigen_floor: f64,
    /// Innovation-driven adaptation of sampling and process covariances.
    pub adaptive: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            window: DEFAULT_WINDOW,
            forgetting: DEFAULT_FORGETTING,
            eigen_floor: EIGEN_FLOOR,
            adaptive: true,
        }
    }
}

/// Initial estimate: truth at t = 0 plus `offset`, with covariance `diag(std^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub offset: Vec<f64>,
    pub std: Vec<f64>,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            offset: vec![0.0; STATE_DIM],
            std: vec![0.5, 0.1, 0.05],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub vehicle: VehicleParams,
    /// Scenario to simulate; mutually exclusive with `truth_file`.
    #[serde(default)]
    pub scenario: Option<Scenario>,
    /// Previously simulated trajectory CSV with observations.
    #[serde(default)]
    pub truth_file: Option<PathBuf>,
    #[serde(default)]
    pub training: Vec<Scenario>,
    #[serde(default)]
    pub sensors: SensorConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub models: Vec<ModelConfig>,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn new(scenario: Scenario) -> Self {
        RunConfig {
            seed: 0,
            output_dir: default_output(),
            vehicle: VehicleParams::default(),
            scenario: Some(scenario),
            truth_file: None,
            training: Vec::new(),
            sensors: SensorConfig::default(),
            fusion: FusionConfig::default(),
            init: InitConfig::default(),
            models: Vec::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parse `path`; relative paths inside are resolved against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(p) = self.truth_file.as_mut() {
            fix(p);
        }
        for m in &mut self.models {
            if let Some(p) = m.file.as_mut() {
                fix(p);
            }
        }
    }

    pub fn model(&self, name: &str) -> Option<&ModelConfig> {
        self.models.iter().find(|m| m.name == name)
    }

    /// Structural checks run before any computation.
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Config("at least one model must be configured".into()));
        }
        match (&self.scenario, &self.truth_file) {
            (Some(sc), None) => sc.validate()?,
            (None, Some(_)) => {}
            _ => return Err(Error::Config("set exactly one of `scenario` or `truth_file`".into())),
        }
        for sc in &self.training {
            sc.validate()?;
        }
        self.vehicle.validate()?;
        self.sensors.validate()?;

        let f = &self.fusion;
        if f.window < 2 {
            return Err(Error::Config(format!("fusion.window must be >= 2, got {}", f.window)));
        }
        if !(0.0..=1.0).contains(&f.forgetting) {
            return Err(Error::Config(format!("fusion.forgetting must lie in [0, 1], got {}", f.forgetting)));
        }
        if !(f.eigen_floor >= 0.0 && f.eigen_floor.is_finite()) {
            return Err(Error::Config("fusion.eigen_floor must be finite and >= 0".into()));
        }
        check_vector("init.offset", &self.init.offset, false)?;
        check_vector("init.std", &self.init.std, true)?;

        let mut names = HashSet::new();
        for m in &self.models {
            if !names.insert(m.name.as_str()) {
                return Err(Error::Config(format!("duplicate model name `{}`", m.name)));
            }
        }
        for m in &self.models {
            self.validate_model(m)?;
        }
        Ok(())
    }

    fn validate_model(&self, m: &ModelConfig) -> Result<()> {
        let ctx = |msg: String| Error::Config(format!("model `{}`: {msg}", m.name));
        if let Some(q) = &m.process_noise_std {
            check_vector("process_noise_std", q, true).map_err(|e| ctx(e.to_string()))?;
        }
        if let Some(s) = &m.sampling_std {
            check_vector("sampling_std", s, true).map_err(|e| ctx(e.to_string()))?;
        }
        if m.method == Method::Ensemble && m.members < 2 {
            return Err(ctx(format!("members must be >= 2, got {}", m.members)));
        }
        if !(0.0..=1.0).contains(&m.alpha) {
            return Err(ctx(format!("alpha must lie in [0, 1], got {}", m.alpha)));
        }
        if let Some(d) = &m.direct {
            if m.kind != ModelKind::Koopman {
                return Err(ctx("`direct` applies to koopman models only".into()));
            }
            if d == &m.name || self.model(d).is_none() {
                return Err(ctx(format!("`direct` must name another configured model, got `{d}`")));
            }
        }
        if let Some(path) = &m.file {
            if m.kind == ModelKind::Physics {
                return Err(ctx("physics models take no model file".into()));
            }
            if !path.exists() {
                return Err(ctx(format!("model file {} does not exist", path.display())));
            }
        }
        if (m.needs_training() || m.calibrate) && self.training.is_empty() {
            return Err(ctx("needs `training` scenarios (no model file given or calibrate = true)".into()));
        }
        if m.kind == ModelKind::Koopman && m.koopman.lifted_dim < STATE_DIM {
            return Err(ctx(format!("koopman.lifted_dim must be >= {STATE_DIM}")));
        }
        Ok(())
    }
}

fn check_vector(name: &str, v: &[f64], nonnegative: bool) -> Result<()> {
    if v.len() != STATE_DIM {
        return Err(Error::Config(format!("{name} needs {STATE_DIM} entries, got {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite() || (nonnegative && *x < 0.0)) {
        return Err(Error::Config(format!("{name} entries must be finite{}", if nonnegative { " and >= 0" } else { "" })));
    }
    Ok(())
}
