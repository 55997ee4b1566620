use std::path::{Path, PathBuf};

use rad_core::checkpoint::config_hash;
use rad_core::diffusion::{
    DiffusionTrainConfig, GuidanceConfig, ReverseVariance, SamplerConfig, ScheduleKind,
    ShortTrajectoryPolicy, DEFAULT_DIFFUSION_STEPS, DEFAULT_HORIZON,
};
use rad_core::envs::{StartMode, StitchingSpec};
use rad_core::nn::Activation;
use rad_core::planner::{Ablation, Fallback, PlannerConfig};
use rad_core::retrieval::RetrievalConfig;
use rad_core::step::StepTrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{ExperimentError, Result};

/// Prefix of environment variables that override config fields.
pub const ENV_PREFIX: &str = "RAD_";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    #[default]
    Stitching,
}

impl EnvName {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::Stitching => "stitching",
        }
    }
}

/// Optimization settings shared by the denoiser and the return guide.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetTraining {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch: usize,
    pub lr: f64,
    pub grad_clip: f64,
}

impl Default for NetTraining {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256, 256],
            activation: Activation::Mish,
            epochs: 100,
            steps_per_epoch: 100,
            batch: 64,
            lr: 1e-3,
            grad_clip: 10.0,
        }
    }
}

impl NetTraining {
    pub fn guide_default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 10,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepTraining {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    /// Sampled `(s_t, s_{t+i}, i)` pairs.
    pub pairs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Feed normalized states to the estimator.
    pub normalize_inputs: bool,
}

impl Default for StepTraining {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            epochs: 30,
            pairs: 4000,
            batch: 64,
            lr: 1e-3,
            normalize_inputs: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Root of every artifact; excluded from the config hash.
    pub out_dir: PathBuf,
    /// Offline dataset (JSONL); generated from `scenario` when absent.
    pub dataset: Option<PathBuf>,
    pub env: EnvName,
    pub scenario: StitchingSpec,
    pub start_mode: StartMode,
    pub seeds: Vec<u64>,
    pub horizon: usize,
    pub n_steps: usize,
    pub k: usize,
    pub delta: f64,
    pub eta: f64,
    pub rho: f64,
    pub gamma: f64,
    pub replan_interval: usize,
    pub variance: ReverseVariance,
    pub fallback: Fallback,
    pub short_trajectories: ShortTrajectoryPolicy,
    pub ablation: Ablation,
    pub denoiser: NetTraining,
    pub guide: NetTraining,
    pub step: StepTraining,
    pub episodes: usize,
    pub max_steps: usize,
    /// Evaluate learning curves every this many denoiser epochs; 0 disables.
    pub curve_every: usize,
    pub curve_episodes: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            dataset: None,
            env: EnvName::Stitching,
            scenario: StitchingSpec::default(),
            start_mode: StartMode::Ood,
            seeds: vec![0, 1, 2],
            horizon: DEFAULT_HORIZON,
            n_steps: DEFAULT_DIFFUSION_STEPS,
            k: 6,
            delta: 0.9,
            eta: 0.005,
            rho: 1.0,
            gamma: rad_core::trajectory::DEFAULT_GAMMA,
            replan_interval: 1,
            variance: ReverseVariance::Beta,
            fallback: Fallback::Unconditional,
            short_trajectories: ShortTrajectoryPolicy::PadLastState,
            ablation: Ablation::Full,
            denoiser: NetTraining::default(),
            guide: NetTraining::guide_default(),
            step: StepTraining::default(),
            episodes: 50,
            max_steps: 300,
            curve_every: 0,
            curve_episodes: 10,
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON config; missing fields take their defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| ExperimentError::Validation(format!("{}: {e}", path.display())))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        serde_json::from_value(value).map_err(|e| ExperimentError::Validation(e.to_string()))
    }

    /// Applies `RAD_<FIELD>` overrides from `vars`. Nested fields use a
    /// double underscore (`RAD_DENOISER__EPOCHS`). Values parse as JSON and
    /// fall back to plain strings.
    pub fn with_overrides<I, K, V>(self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut value = serde_json::to_value(&self)
            .map_err(|e| ExperimentError::Validation(e.to_string()))?;
        let mut applied: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                let key = k.as_ref().strip_prefix(ENV_PREFIX)?.to_ascii_lowercase();
                Some((key, v.as_ref().to_string()))
            })
            .collect();
        applied.sort();
        for (key, raw) in applied {
            let path: Vec<&str> = key.split("__").collect();
            let parsed = serde_json::from_str(&raw).unwrap_or(Value::String(raw.clone()));
            let mut slot = &mut value;
            for (depth, part) in path.iter().enumerate() {
                let obj = slot.as_object_mut().ok_or_else(|| {
                    ExperimentError::Validation(format!("override {key}: {part} is not a section"))
                })?;
                if !obj.contains_key(*part) {
                    return Err(ExperimentError::Validation(format!(
                        "override {ENV_PREFIX}{}: unknown field {part}",
                        key.to_ascii_uppercase()
                    )));
                }
                slot = obj.get_mut(*part).expect("key checked above");
                if depth + 1 == path.len() {
                    *slot = parsed.clone();
                }
            }
        }
        Self::from_value(value)
    }

    /// Overrides from the process environment.
    pub fn with_env_overrides(self) -> Result<Self> {
        self.with_overrides(std::env::vars())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(ExperimentError::Validation(msg.to_string()));
        if self.seeds.is_empty() {
            return fail("at least one seed is required");
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return fail("seeds must be distinct");
        }
        if self.horizon < 2 {
            return fail("horizon must be at least 2");
        }
        if self.n_steps == 0 {
            return fail("n_steps must be positive");
        }
        if self.k == 0 {
            return fail("k must be positive");
        }
        if !(-1.0..=1.0).contains(&self.delta) {
            return fail("delta must lie in [-1, 1]");
        }
        if !(self.eta >= 0.0) || !(self.rho >= 0.0) {
            return fail("eta and rho must be non-negative");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail("gamma must lie in (0, 1]");
        }
        if self.replan_interval == 0 {
            return fail("replan_interval must be positive");
        }
        if self.episodes == 0 || self.max_steps == 0 {
            return fail("episodes and max_steps must be positive");
        }
        for (name, t) in [("denoiser", &self.denoiser), ("guide", &self.guide)] {
            if t.batch == 0 || t.steps_per_epoch == 0 || t.hidden.contains(&0) {
                return Err(ExperimentError::Validation(format!(
                    "{name}: batch, steps_per_epoch and layer widths must be positive"
                )));
            }
        }
        if self.step.batch == 0 || self.step.pairs == 0 || self.step.hidden.contains(&0) {
            return fail("step: batch, pairs and layer widths must be positive");
        }
        self.scenario
            .validate()
            .map_err(|e| ExperimentError::Validation(e.to_string()))
    }

    /// Hash of everything that affects results; `out_dir` is left out so a
    /// run can move without invalidating its artifacts.
    pub fn hash(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)
            .map_err(|e| ExperimentError::Validation(e.to_string()))?;
        if let Some(obj) = value.as_object_mut() {
            obj.remove("out_dir");
        }
        Ok(config_hash(&value)?)
    }

    pub fn retrieval(&self) -> RetrievalConfig {
        RetrievalConfig {
            k: self.k,
            delta: self.delta,
            eta: self.eta,
            ..RetrievalConfig::default()
        }
    }

    pub fn planner(&self) -> PlannerConfig {
        PlannerConfig {
            retrieval: self.retrieval(),
            horizon: self.horizon,
            sampler: SamplerConfig {
                guidance: GuidanceConfig {
                    rho: self.rho,
                    ..GuidanceConfig::default()
                },
                variance: self.variance,
                ..SamplerConfig::default()
            },
            replan_interval: self.replan_interval,
            fallback: self.fallback,
            ablation: self.ablation,
        }
    }

    fn diffusion_config(&self, t: &NetTraining, seed: u64) -> DiffusionTrainConfig {
        DiffusionTrainConfig {
            horizon: self.horizon,
            n_steps: self.n_steps,
            schedule: ScheduleKind::Cosine,
            hidden: t.hidden.clone(),
            activation: t.activation,
            epochs: t.epochs,
            batch: t.batch,
            steps_per_epoch: Some(t.steps_per_epoch),
            lr: t.lr,
            grad_clip: t.grad_clip,
            seed,
            short_trajectories: self.short_trajectories,
            ..DiffusionTrainConfig::default()
        }
    }

    pub fn denoiser_config(&self, seed: u64) -> DiffusionTrainConfig {
        self.diffusion_config(&self.denoiser, seed)
    }

    pub fn guide_config(&self, seed: u64) -> DiffusionTrainConfig {
        self.diffusion_config(&self.guide, seed)
    }

    pub fn step_config(&self, seed: u64) -> StepTrainConfig {
        StepTrainConfig {
            horizon: self.horizon,
            epochs: self.step.epochs,
            batch: self.step.batch,
            lr: self.step.lr,
            hidden: self.step.hidden.clone(),
            seed,
            ..StepTrainConfig::default()
        }
    }
}
