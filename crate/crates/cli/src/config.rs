//! The run configuration: one TOML file, validated before any work starts.

use std::path::{Path, PathBuf};

use invariode::ode::IntegratorConfig;
use invariode::simplex::PotentialKind;
use invariode::train::{ControllerTrainConfig, TrainConfig};
use invariode::verify::{BoundMode, LevelSearchConfig, DEFAULT_DELTA};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classifier,
    Controller,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    pub output_dir: PathBuf,
    /// Model file; defaults to `<output_dir>/model.json`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    /// Seed for network initialization and any sampling done by the CLI.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub controller_train: ControllerTrainConfig,
    #[serde(default)]
    pub certify: CertifyConfig,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub rollout: RolloutConfig,
    #[serde(default)]
    pub sample: SampleConfig,
    #[serde(default)]
    pub plots: PlotConfig,
}

/// The three-class Gaussian toy problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub count: usize,
    pub radius: f64,
    pub sigma: f64,
    pub seed: u64,
    pub holdout: usize,
    pub holdout_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 300,
            radius: 1.5,
            sigma: 0.3,
            seed: 1,
            holdout: 60,
            holdout_seed: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Hidden width of the classifier dynamics.
    pub width: usize,
    /// Hidden width of the controller.
    pub hidden: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { width: 16, hidden: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelledInput {
    pub x: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyConfig {
    pub eps: f64,
    pub density: usize,
    pub mode: BoundMode,
    pub potential: PotentialKind,
    /// `[lo, hi]`; defaults to the potential's standard band.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band: Option<[f64; 2]>,
    /// Defaults to `1/density`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neighborhood_radius: Option<f64>,
    pub delta: f64,
    /// Inputs to certify; defaults to the held-out toy points.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<LabelledInput>,
    /// Controller level to certify; a line search runs when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
    /// Half-width of the controller's state domain box.
    pub domain: f64,
    pub search: LevelSearchConfig,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            eps: 0.05,
            density: 20,
            mode: BoundMode::Crown,
            potential: PotentialKind::Margin,
            band: None,
            neighborhood_radius: None,
            delta: DEFAULT_DELTA,
            inputs: Vec::new(),
            level: None,
            domain: 1.0,
            search: LevelSearchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    /// Number of controller trajectories started inside the certified set.
    pub count: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { count: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub n: usize,
    pub density: usize,
    /// When set, samples the decision boundary of this class instead of the grid.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { n: 3, density: 20, label: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotConfig {
    /// Points per axis of the `V̇` contour grid.
    pub grid: usize,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self { grid: 41 }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.message().to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_path(&self) -> PathBuf {
        self.model.clone().unwrap_or_else(|| self.output_dir.join("model.json"))
    }

    fn validate(&self) -> Result<(), String> {
        let positive = |name: &str, v: f64| if v > 0.0 && v.is_finite() { Ok(()) } else { Err(format!("`{name}` must be positive")) };
        positive("train.lr", self.train.lr)?;
        positive("integrator.dt", self.integrator.dt)?;
        positive("integrator.horizon", self.integrator.horizon)?;
        positive("certify.domain", self.certify.domain)?;
        positive("dataset.radius", self.dataset.radius)?;
        if !(self.certify.eps >= 0.0) {
            return Err("`certify.eps` must be nonnegative".into());
        }
        if self.certify.density == 0 || self.sample.density == 0 {
            return Err("`density` must be positive".into());
        }
        if self.network.width == 0 || self.network.hidden == 0 {
            return Err("`network` widths must be positive".into());
        }
        if let Some([lo, hi]) = self.certify.band {
            if !(lo > 0.0 && lo <= hi) {
                return Err("`certify.band` must satisfy 0 < lo <= hi".into());
            }
        }
        Ok(())
    }
}
