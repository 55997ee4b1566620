//! Closed-loop receding-horizon agent.
//!
//! On every replan the planner retrieves a target state, estimates how many
//! steps away it is, samples an anchored guided plan and queues its actions.
//! Random draws per replan happen in a fixed order: the random target (if
//! that ablation is on), the random step count (if on), then one `u64` that
//! seeds the plan's own noise stream.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{sample_plan, AnchorSet, DiffusionModel, PlanMatrix, ReturnGuide, SamplerConfig};
use crate::envs::Env;
use crate::error::{RadError, Result};
use crate::retrieval::{RetrievalConfig, RetrievalQuery, StateDatabase};
use crate::step::StepEstimator;
use crate::trajectory::{discounted_suffix_return, ActionVec, StateVec, Trajectory};

/// Target row used by the fixed-anchor ablation.
pub const FIXED_ANCHOR_POSITION: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Plan anchored only at the current state.
    #[default]
    Unconditional,
    /// Reuse the previous target when there is one.
    LastTarget,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoRetrievalRandomTarget,
    FixedAnchorPosition,
    RandomStepCount,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoRetrievalRandomTarget,
        Ablation::FixedAnchorPosition,
        Ablation::RandomStepCount,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoRetrievalRandomTarget => "no_retrieval_random_target",
            Ablation::FixedAnchorPosition => "fixed_anchor_position",
            Ablation::RandomStepCount => "random_step_count",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub retrieval: RetrievalConfig,
    pub horizon: usize,
    pub sampler: SamplerConfig,
    /// Environment steps between plans.
    pub replan_interval: usize,
    pub fallback: Fallback,
    pub ablation: Ablation,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            retrieval: RetrievalConfig::default(),
            horizon: crate::diffusion::DEFAULT_HORIZON,
            sampler: SamplerConfig::default(),
            replan_interval: 1,
            fallback: Fallback::Unconditional,
            ablation: Ablation::Full,
        }
    }
}

/// Trained components shared by every planner instance.
#[derive(Clone, Debug)]
pub struct PlannerModels {
    pub denoiser: Arc<DiffusionModel>,
    pub guide: Option<Arc<ReturnGuide>>,
    pub step: Arc<StepEstimator>,
    pub db: Arc<StateDatabase>,
}

/// What produced the action of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub replanned: bool,
    /// Plan row the action came from.
    pub cursor: usize,
    /// Target in raw state units; `None` for an unconditional plan.
    pub target: Option<Vec<f64>>,
    pub i_hat: Option<usize>,
    pub similarity: Option<f64>,
    pub segment_return: Option<f64>,
    pub target_traj: Option<u64>,
    pub target_timestep: Option<usize>,
    pub retrieval_miss: bool,
}

#[derive(Clone, Debug)]
struct ActivePlan {
    plan: PlanMatrix,
    diag: StepDiagnostics,
}

#[derive(Clone, Debug)]
pub struct PlannerState {
    current: Option<ActivePlan>,
    cursor: usize,
    steps_since_replan: usize,
    last_target: Option<(Vec<f64>, StepDiagnostics)>,
    rng: ChaCha8Rng,
}

impl PlannerState {
    fn new(seed: u64) -> Self {
        Self {
            current: None,
            cursor: 0,
            steps_since_replan: 0,
            last_target: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

pub struct Planner {
    models: PlannerModels,
    config: PlannerConfig,
    action_bounds: Option<(Vec<f64>, Vec<f64>)>,
    state: PlannerState,
}

impl Planner {
    pub fn new(models: PlannerModels, config: PlannerConfig, seed: u64) -> Result<Self> {
        if config.replan_interval == 0 {
            return Err(RadError::Config("replan interval must be at least 1".into()));
        }
        if config.horizon != models.denoiser.horizon {
            return Err(RadError::Config(format!(
                "planner horizon {} differs from denoiser horizon {}",
                config.horizon, models.denoiser.horizon
            )));
        }
        if config.horizon != models.step.horizon {
            return Err(RadError::Config(format!(
                "planner horizon {} differs from step estimator horizon {}",
                config.horizon, models.step.horizon
            )));
        }
        if let Some(g) = &models.guide {
            if g.horizon != config.horizon {
                return Err(RadError::Config(format!(
                    "planner horizon {} differs from return guide horizon {}",
                    config.horizon, g.horizon
                )));
            }
        }
        if config.sampler.guidance.rho != 0.0 && models.guide.is_none() {
            return Err(RadError::Config("guidance scale is nonzero but no return guide is loaded".into()));
        }
        if !config.sampler.guidance.rho.is_finite() || config.sampler.guidance.rho < 0.0 {
            return Err(RadError::Config("guidance scale must be finite and non-negative".into()));
        }
        let ds = models.db.dataset().ds();
        if models.denoiser.ds != ds || models.denoiser.da != models.db.dataset().da() {
            return Err(RadError::Config("denoiser and database disagree on dimensions".into()));
        }
        if models.db.is_empty() {
            return Err(RadError::Config("state database is empty".into()));
        }
        Ok(Self {
            models,
            config,
            action_bounds: None,
            state: PlannerState::new(seed),
        })
    }

    /// The same planner with one component swapped for its ablation.
    pub fn ablation_variant(mut self, kind: Ablation) -> Self {
        self.config.ablation = kind;
        self
    }

    pub fn with_action_bounds(mut self, low: Vec<f64>, high: Vec<f64>) -> Self {
        self.action_bounds = Some((low, high));
        self
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.config
    }

    /// Drops the current plan and reseeds the random stream.
    pub fn reset(&mut self, seed: u64) {
        self.state = PlannerState::new(seed);
    }

    pub fn current_plan(&self) -> Option<&PlanMatrix> {
        self.state.current.as_ref().map(|p| &p.plan)
    }

    fn replan_due(&self) -> bool {
        match &self.state.current {
            None => true,
            Some(p) => {
                self.state.steps_since_replan >= self.config.replan_interval
                    || self.state.cursor >= p.plan.horizon()
            }
        }
    }

    fn replan(&mut self, s_t: &StateVec) -> Result<()> {
        let h = self.config.horizon;
        let db = &self.models.db;
        let data = db.dataset();
        let rng = &mut self.state.rng;

        let mut diag = StepDiagnostics {
            replanned: true,
            cursor: 0,
            target: None,
            i_hat: None,
            similarity: None,
            segment_return: None,
            target_traj: None,
            target_timestep: None,
            retrieval_miss: false,
        };
        let target: Option<Vec<f64>> = match self.config.ablation {
            Ablation::NoRetrievalRandomTarget => {
                let idx = rng.random_range(0..db.len());
                let e = &db.entries()[idx];
                diag.segment_return = Some(db.segment_return(idx, h)?);
                diag.target_traj = Some(e.traj_id);
                diag.target_timestep = Some(e.timestep);
                Some(e.state.to_vec())
            }
            _ => {
                let q = RetrievalQuery::new(s_t.clone(), &self.config.retrieval, h);
                match db.retrieve(&q) {
                    Ok(r) => {
                        diag.similarity = Some(r.similarity);
                        diag.segment_return = Some(r.segment_return);
                        diag.target_traj = Some(r.traj_id);
                        diag.target_timestep = Some(r.timestep);
                        Some(r.target.to_vec())
                    }
                    Err(RadError::RetrievalMiss) => {
                        diag.retrieval_miss = true;
                        log::debug!("retrieval miss at {:?}", &s_t[..]);
                        match (&self.config.fallback, &self.state.last_target) {
                            (Fallback::LastTarget, Some((t, d))) => {
                                diag.similarity = d.similarity;
                                diag.segment_return = d.segment_return;
                                diag.target_traj = d.target_traj;
                                diag.target_timestep = d.target_timestep;
                                Some(t.clone())
                            }
                            _ => None,
                        }
                    }
                    Err(e) => return Err(e),
                }
            }
        };

        let i_hat = match (&target, self.config.ablation) {
            (None, _) => None,
            (Some(_), Ablation::FixedAnchorPosition) => Some(FIXED_ANCHOR_POSITION.min(h - 1)),
            (Some(_), Ablation::RandomStepCount) => Some(rng.random_range(1..h)),
            (Some(g), _) => Some(self.models.step.estimate_steps(s_t, g)?),
        };
        let plan_seed: u64 = rng.random();

        let s_norm = data.normalize_state(s_t)?;
        let anchors = match (&target, i_hat) {
            (Some(g), Some(i)) => AnchorSet::start_and_target(s_norm, data.normalize_state(g)?, i)?,
            _ => AnchorSet::start_only(s_norm)?,
        };
        let guide = self.models.guide.as_deref();
        let mut plan_rng = ChaCha8Rng::seed_from_u64(plan_seed);
        let plan = sample_plan(&self.models.denoiser, guide, &self.config.sampler, &anchors, &mut plan_rng)?;

        diag.target = target.clone();
        diag.i_hat = i_hat;
        if let Some(t) = target {
            if !diag.retrieval_miss {
                self.state.last_target = Some((t, diag.clone()));
            }
        }
        self.state.current = Some(ActivePlan { plan, diag });
        self.state.cursor = 0;
        self.state.steps_since_replan = 0;
        Ok(())
    }

    /// Next action for `s_t` in raw units, clipped to the action bounds.
    pub fn act(&mut self, s_t: &StateVec) -> Result<(ActionVec, StepDiagnostics)> {
        if !s_t.is_finite() {
            return Err(RadError::InvalidArgument("non-finite state".into()));
        }
        let replanned = self.replan_due();
        if replanned {
            self.replan(s_t)?;
        }
        let active = self.state.current.as_ref().expect("plan present after replan");
        let cursor = self.state.cursor;
        let raw = active.plan.action(cursor).to_vec();
        let mut action = self.models.db.dataset().denormalize_action(&raw)?;
        if let Some((lo, hi)) = &self.action_bounds {
            for (a, (l, h)) in action.iter_mut().zip(lo.iter().zip(hi)) {
                *a = a.clamp(*l, *h);
            }
        }
        let mut diag = active.diag.clone();
        diag.replanned = replanned;
        diag.cursor = cursor;
        self.state.cursor += 1;
        self.state.steps_since_replan += 1;
        Ok((ActionVec::new(action), diag))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    /// Visited states including the initial one and the final one.
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub terminal: bool,
    pub success: bool,
    /// Undiscounted sum of rewards.
    pub total_return: f64,
    /// Discounted return from the first step.
    pub discounted_return: f64,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// The executed steps as a trajectory (the final state is dropped).
    pub fn to_trajectory(&self, id: u64) -> Result<Trajectory> {
        Trajectory::from_columns(
            id,
            self.states[..self.actions.len()].to_vec(),
            self.actions.clone(),
            self.rewards.clone(),
        )
    }
}

/// Runs the planner in closed loop until a terminal step or `max_steps`.
pub fn run_episode(
    planner: &mut Planner,
    env: &mut dyn Env,
    max_steps: usize,
    seed: u64,
    gamma: f64,
) -> Result<EpisodeRecord> {
    let mut rec = EpisodeRecord {
        seed,
        states: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        diagnostics: Vec::new(),
        terminal: false,
        success: false,
        total_return: 0.0,
        discounted_return: 0.0,
    };
    if max_steps == 0 {
        return Ok(rec);
    }
    planner.reset(seed);
    let (lo, hi) = env.action_bounds();
    planner.action_bounds = Some((lo, hi));
    let mut s = env.reset(seed);
    rec.states.push(s.to_vec());
    for step in 0..max_steps {
        let (a, diag) = planner.act(&s)?;
        let out = env.step(&a).map_err(|e| match e {
            RadError::Env { msg, .. } => RadError::Env { step, msg },
            other => RadError::Env {
                step,
                msg: other.to_string(),
            },
        })?;
        rec.actions.push(a.into_inner());
        rec.rewards.push(out.reward);
        rec.diagnostics.push(diag);
        rec.states.push(out.state.to_vec());
        s = out.state;
        if out.terminal {
            rec.terminal = true;
            rec.success = env.in_goal(&s);
            break;
        }
    }
    rec.total_return = rec.rewards.iter().sum();
    rec.discounted_return = discounted_suffix_return(&rec.to_trajectory(0)?, 0, gamma, None)?;
    Ok(rec)
}
