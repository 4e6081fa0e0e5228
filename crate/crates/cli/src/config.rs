//! TOML run configuration, schema version 1.

use std::path::{Path, PathBuf};

use hemoscale::analysis::Method;
use hemoscale::fluct::{SamplerMode, W2Mode};
use hemoscale::limits::{ScaleKind, ThirdComponentForm};
use hemoscale::ssa::{LeapConfig, SimulationConfig, TimeScale, DEFAULT_MAX_EVENTS};
use hemoscale::{ModelParams, PopulationState};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    /// Output directory, relative to the working directory.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// `(N1, N2, N3)` at time 0; `(K, 0, 0)` when absent.
    #[serde(default)]
    pub initial: Option<[u64; 3]>,
    pub model: ModelBlock,
    #[serde(default)]
    pub simulate: Option<SimulateBlock>,
    #[serde(default)]
    pub ensemble: Option<EnsembleBlock>,
    #[serde(default)]
    pub limits: Option<LimitsBlock>,
    #[serde(default)]
    pub fluct: Option<FluctBlock>,
    #[serde(default)]
    pub scaling: Option<ScalingBlock>,
    #[serde(default)]
    pub validate: Option<ValidateBlock>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub k: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    #[serde(default = "one")]
    pub tau1: f64,
    #[serde(default = "one")]
    pub tau2: f64,
    #[serde(default = "one")]
    pub tau3: f64,
}

impl ModelBlock {
    pub fn params(&self) -> Result<ModelParams, CliError> {
        ModelParams::new(self.tau1, self.tau2, self.tau3, self.gamma2, self.gamma3, self.k)
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn with_k(&self, k: f64) -> Self {
        Self { k, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    #[default]
    Exact,
    TauLeap,
}

/// Engine choice shared by the simulating blocks.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EngineBlock {
    #[serde(default)]
    pub method: MethodName,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub max_events: Option<u64>,
}

impl EngineBlock {
    pub fn method(&self) -> Result<Method, CliError> {
        match self.method {
            MethodName::Exact => Ok(Method::Exact),
            MethodName::TauLeap => {
                let mut leap = LeapConfig::default();
                if let Some(e) = self.epsilon {
                    if !(e > 0.0 && e < 1.0) {
                        return Err(CliError::Config(format!("epsilon must lie in (0, 1), got {e}")));
                    }
                    leap.epsilon = e;
                }
                Ok(Method::TauLeap(leap))
            }
        }
    }

    pub fn max_events(&self) -> u64 {
        self.max_events.unwrap_or(DEFAULT_MAX_EVENTS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridBlock {
    pub scale: TimeScale,
    pub horizon: f64,
    pub points: usize,
}

impl GridBlock {
    pub fn simulation(&self, seed: u64, max_events: u64) -> Result<SimulationConfig, CliError> {
        if self.points == 0 {
            return Err(CliError::Config("grid needs at least one point".into()));
        }
        let grid = hemoscale::ssa::uniform_grid(self.horizon, self.points);
        SimulationConfig::with_max_events(self.horizon, self.scale, grid, seed, max_events)
            .map_err(|e| CliError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowBlock {
    /// File stem of the window's CSV.
    pub name: String,
    #[serde(flatten)]
    pub grid: GridBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateBlock {
    #[serde(flatten)]
    pub engine: EngineBlock,
    pub window: Vec<WindowBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleBlock {
    #[serde(flatten)]
    pub engine: EngineBlock,
    pub replicas: usize,
    /// Rescaling of the statistics; defaults to the own scales of the grid's time scale.
    #[serde(default)]
    pub rescale: Option<ScaleKind>,
    pub grid: GridBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsBlock {
    pub rescale: ScaleKind,
    pub horizon: f64,
    pub points: usize,
    #[serde(default)]
    pub third_component: ThirdComponentForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluctBlock {
    pub horizon: f64,
    pub points: usize,
    #[serde(default)]
    pub mode: SamplerMode,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub w2_mode: W2Mode,
    /// Initial `(x1, x2, x3)` of the limit curves.
    #[serde(default = "default_limit_start")]
    pub limit_start: [f64; 3],
    #[serde(default = "default_fluct_replicas")]
    pub replicas: usize,
}

fn default_dt() -> f64 {
    1e-3
}

fn default_limit_start() -> [f64; 3] {
    [1.0, 0.0, 0.0]
}

fn default_fluct_replicas() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingBlock {
    #[serde(flatten)]
    pub engine: EngineBlock,
    /// Strictly increasing.
    pub ks: Vec<f64>,
    pub replicas: usize,
    /// Rescaled time on the `K^gamma3` scale at which the N3 spread is read.
    #[serde(default = "one")]
    pub time: f64,
    /// Grid points on `[0, time]` used for the V2 sup-norm.
    #[serde(default = "default_scaling_points")]
    pub points: usize,
}

fn default_scaling_points() -> usize {
    101
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateBlock {
    #[serde(default = "default_compensator_replicas")]
    pub compensator_replicas: usize,
    #[serde(default = "default_oracle_replicas")]
    pub oracle_replicas: usize,
}

fn default_compensator_replicas() -> usize {
    2000
}

fn default_oracle_replicas() -> usize {
    200_000
}

impl Default for ValidateBlock {
    fn default() -> Self {
        Self {
            compensator_replicas: default_compensator_replicas(),
            oracle_replicas: default_oracle_replicas(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.params()?;
        if let Some(s) = &self.scaling {
            if s.ks.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(CliError::Config("scaling.ks must be strictly increasing".into()));
            }
            for &k in &s.ks {
                self.model.with_k(k).params()?;
            }
        }
        Ok(())
    }

    pub fn params(&self) -> Result<ModelParams, CliError> {
        self.model.params()
    }

    pub fn initial_state(&self, params: &ModelParams) -> PopulationState {
        match self.initial {
            Some([a, b, c]) => PopulationState::new(a, b, c),
            None => PopulationState::default_initial(params),
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn block<'a, T>(&self, block: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
        block
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("config has no [{name}] block")))
    }
}
