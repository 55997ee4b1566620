//! Versioned JSON checkpoints for every trained network.
//!
//! A checkpoint holds the network spec, flattened parameters, optionally the
//! optimizer moments, the hash of the training config that produced it, and
//! role-specific metadata (schedule, horizon, normalization).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionModel, NoiseSchedule, ReturnGuide};
use crate::error::{RadError, Result};
use crate::nn::{Mlp, NetParams, NetSpec, OptimizerState};
use crate::step::StepEstimator;
use crate::trajectory::{sha256_hex, NormStats};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Denoiser,
    ReturnGuide,
    StepEstimator,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Denoiser => "denoiser",
            Role::ReturnGuide => "return_guide",
            Role::StepEstimator => "step_estimator",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl OptimizerSnapshot {
    pub fn capture(opt: &OptimizerState) -> Self {
        Self {
            step: opt.step,
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            first_moment: opt.first_moment.to_flat(),
            second_moment: opt.second_moment.to_flat(),
        }
    }

    pub fn restore(&self, spec: &NetSpec) -> Result<OptimizerState> {
        Ok(OptimizerState {
            first_moment: NetParams::from_flat(spec, &self.first_moment)?,
            second_moment: NetParams::from_flat(spec, &self.second_moment)?,
            step: self.step,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        })
    }
}

/// Role-specific extras needed to rebuild a usable model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanMeta {
    pub horizon: usize,
    pub ds: usize,
    pub da: usize,
    pub schedule: NoiseSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub return_range: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMeta {
    pub horizon: usize,
    pub input_norm: Option<NormStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Meta {
    Plan(PlanMeta),
    Step(StepMeta),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub role: Role,
    pub spec: NetSpec,
    pub params: Vec<f64>,
    pub optimizer: Option<OptimizerSnapshot>,
    pub config_hash: String,
    pub meta: Meta,
}

/// sha256 of the compact JSON encoding of any config value.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(config)?.as_bytes()))
}

impl Checkpoint {
    pub fn new(
        role: Role,
        net: &Mlp,
        optimizer: Option<&OptimizerState>,
        config_hash: impl Into<String>,
        meta: Meta,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            role,
            spec: net.spec.clone(),
            params: net.params.to_flat(),
            optimizer: optimizer.map(OptimizerSnapshot::capture),
            config_hash: config_hash.into(),
            meta,
        }
    }

    pub fn denoiser(model: &DiffusionModel, opt: Option<&OptimizerState>, hash: &str) -> Self {
        let meta = Meta::Plan(PlanMeta {
            horizon: model.horizon,
            ds: model.ds,
            da: model.da,
            schedule: model.schedule.clone(),
            return_range: None,
        });
        Self::new(Role::Denoiser, &model.net, opt, hash, meta)
    }

    pub fn return_guide(
        guide: &ReturnGuide,
        schedule: &NoiseSchedule,
        opt: Option<&OptimizerState>,
        hash: &str,
    ) -> Self {
        let meta = Meta::Plan(PlanMeta {
            horizon: guide.horizon,
            ds: guide.ds,
            da: guide.da,
            schedule: schedule.clone(),
            return_range: Some((guide.return_min, guide.return_max)),
        });
        Self::new(Role::ReturnGuide, &guide.net, opt, hash, meta)
    }

    pub fn step_estimator(est: &StepEstimator, opt: Option<&OptimizerState>, hash: &str) -> Self {
        let meta = Meta::Step(StepMeta {
            horizon: est.horizon,
            input_norm: est.input_norm.clone(),
        });
        Self::new(Role::StepEstimator, &est.net, opt, hash, meta)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(RadError::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| RadError::io(dir, e))?;
        }
        fs::write(path, self.to_json()?).map_err(|e| RadError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| RadError::io(path, e))?;
        Self::from_json(&text)
    }

    fn expect_role(&self, role: Role) -> Result<()> {
        if self.role != role {
            return Err(RadError::Checkpoint(format!(
                "expected a {role} checkpoint, found {}",
                self.role
            )));
        }
        Ok(())
    }

    /// Rebuilds the network; with `expected`, any spec difference is an error.
    pub fn to_mlp(&self, expected: Option<&NetSpec>) -> Result<Mlp> {
        if let Some(spec) = expected {
            if spec != &self.spec {
                return Err(RadError::Checkpoint(format!(
                    "network spec mismatch: checkpoint has {:?}, expected {:?}",
                    self.spec, spec
                )));
            }
        }
        let params = NetParams::from_flat(&self.spec, &self.params)?;
        Mlp::from_params(self.spec.clone(), params)
    }

    pub fn optimizer_state(&self) -> Result<Option<OptimizerState>> {
        self.optimizer.as_ref().map(|o| o.restore(&self.spec)).transpose()
    }

    fn plan_meta(&self) -> Result<&PlanMeta> {
        match &self.meta {
            Meta::Plan(m) => Ok(m),
            Meta::Step(_) => Err(RadError::Checkpoint("missing plan metadata".into())),
        }
    }

    pub fn to_denoiser(&self, expected: Option<&NetSpec>) -> Result<DiffusionModel> {
        self.expect_role(Role::Denoiser)?;
        let m = self.plan_meta()?;
        Ok(DiffusionModel {
            net: self.to_mlp(expected)?,
            schedule: m.schedule.clone(),
            horizon: m.horizon,
            ds: m.ds,
            da: m.da,
        })
    }

    pub fn to_return_guide(&self, expected: Option<&NetSpec>) -> Result<ReturnGuide> {
        self.expect_role(Role::ReturnGuide)?;
        let m = self.plan_meta()?;
        let (lo, hi) = m
            .return_range
            .ok_or_else(|| RadError::Checkpoint("return guide without return range".into()))?;
        Ok(ReturnGuide {
            net: self.to_mlp(expected)?,
            horizon: m.horizon,
            ds: m.ds,
            da: m.da,
            return_min: lo,
            return_max: hi,
        })
    }

    pub fn schedule(&self) -> Result<&NoiseSchedule> {
        Ok(&self.plan_meta()?.schedule)
    }

    pub fn to_step_estimator(&self, expected: Option<&NetSpec>) -> Result<StepEstimator> {
        self.expect_role(Role::StepEstimator)?;
        let Meta::Step(m) = &self.meta else {
            return Err(RadError::Checkpoint("missing step estimator metadata".into()));
        };
        Ok(StepEstimator {
            net: self.to_mlp(expected)?,
            horizon: m.horizon,
            input_norm: m.input_norm.clone(),
        })
    }
}
