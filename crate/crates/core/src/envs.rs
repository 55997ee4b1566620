//! Small planar benchmarks and the offline datasets generated from them.
//!
//! `Nav2d` is a point mass whose action is a bounded displacement. The
//! stitching scenario lays out a start region S, a midpoint M and a goal G on
//! a ring around the arena center: family A walks S to M and then on to a
//! dead end D, family B starts elsewhere, passes M (offset by `gap`) and
//! reaches G. Neither family alone shows S to G, and at M the data mostly
//! says "go to D".

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{RadError, Result};
use crate::trajectory::{OfflineDataset, StateVec, Trajectory, Transition, ActionVec};

pub const STEP_COST: f64 = -0.01;
pub const GOAL_REWARD: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: StateVec,
    pub reward: f64,
    pub terminal: bool,
}

pub trait Env {
    fn name(&self) -> &str;
    fn ds(&self) -> usize;
    fn da(&self) -> usize;
    /// Per-dimension `(low, high)` action bounds.
    fn action_bounds(&self) -> (Vec<f64>, Vec<f64>);
    fn reset(&mut self, seed: u64) -> StateVec;
    fn step(&mut self, action: &[f64]) -> Result<StepOutcome>;
    fn state(&self) -> &StateVec;
    fn in_goal(&self, state: &[f64]) -> bool;
}

/// Axis-aligned blocked rectangle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Wall {
    fn contains(&self, p: &[f64]) -> bool {
        (0..2).all(|d| p[d] >= self.min[d] && p[d] <= self.max[d])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StartDistribution {
    Fixed { at: [f64; 2] },
    Disk { center: [f64; 2], radius: f64 },
    Annulus { center: [f64; 2], inner: f64, outer: f64 },
}

impl StartDistribution {
    fn sample(&self, rng: &mut impl Rng) -> [f64; 2] {
        match *self {
            StartDistribution::Fixed { at } => at,
            StartDistribution::Disk { center, radius } => {
                // uniform by area
                let r = radius * rng.random::<f64>().sqrt();
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                [center[0] + r * a.cos(), center[1] + r * a.sin()]
            }
            StartDistribution::Annulus { center, inner, outer } => {
                let r = (inner * inner + (outer * outer - inner * inner) * rng.random::<f64>()).sqrt();
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                [center[0] + r * a.cos(), center[1] + r * a.sin()]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nav2dParams {
    /// Arena is `[-half_extent, half_extent]^2`.
    pub half_extent: f64,
    pub step_size: f64,
    pub goal: [f64; 2],
    pub goal_radius: f64,
    pub walls: Vec<Wall>,
    /// Transition noise standard deviation, in units of `step_size`.
    pub noise: f64,
    pub start: StartDistribution,
}

impl Default for Nav2dParams {
    fn default() -> Self {
        Self {
            half_extent: 10.0,
            step_size: 0.5,
            goal: [6.0, 0.0],
            goal_radius: 1.0,
            walls: Vec::new(),
            noise: 0.0,
            start: StartDistribution::Fixed { at: [-6.0, 0.0] },
        }
    }
}

#[derive(Clone, Debug)]
pub struct Nav2d {
    params: Nav2dParams,
    state: StateVec,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
}

pub fn nav2d_env(params: Nav2dParams) -> Result<Nav2d> {
    if !(params.half_extent > 0.0 && params.step_size > 0.0 && params.goal_radius > 0.0) {
        return Err(RadError::Scenario("arena, step size and goal radius must be positive".into()));
    }
    if !(params.noise >= 0.0 && params.noise.is_finite()) {
        return Err(RadError::Scenario(format!("invalid noise level {}", params.noise)));
    }
    let noise = (params.noise > 0.0)
        .then(|| Normal::new(0.0, params.noise * params.step_size).expect("positive std"));
    let mut env = Nav2d {
        state: StateVec::zeros(2),
        rng: ChaCha8Rng::seed_from_u64(0),
        noise,
        params,
    };
    env.reset(0);
    Ok(env)
}

impl Nav2d {
    pub fn params(&self) -> &Nav2dParams {
        &self.params
    }

    /// Moves the agent to an explicit position.
    pub fn set_state(&mut self, pos: [f64; 2]) {
        self.state = StateVec::new(self.clip_to_arena(pos).to_vec());
    }

    fn clip_to_arena(&self, p: [f64; 2]) -> [f64; 2] {
        let h = self.params.half_extent;
        [p[0].clamp(-h, h), p[1].clamp(-h, h)]
    }
}

impl Env for Nav2d {
    fn name(&self) -> &str {
        "nav2d"
    }

    fn ds(&self) -> usize {
        2
    }

    fn da(&self) -> usize {
        2
    }

    fn action_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let s = self.params.step_size;
        (vec![-s; 2], vec![s; 2])
    }

    /// Starts inside walls are redrawn (up to a bounded number of tries).
    fn reset(&mut self, seed: u64) -> StateVec {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = self.params.start.sample(&mut self.rng);
        for _ in 0..1000 {
            let clipped = self.clip_to_arena(p);
            if !self.params.walls.iter().any(|w| w.contains(&clipped)) {
                break;
            }
            p = self.params.start.sample(&mut self.rng);
        }
        self.set_state(p);
        self.state.clone()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if action.len() != 2 {
            return Err(RadError::DimensionMismatch {
                expected: 2,
                got: action.len(),
            });
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(RadError::Env {
                step: 0,
                msg: "non-finite action".into(),
            });
        }
        let s = self.params.step_size;
        let mut next = [
            self.state[0] + action[0].clamp(-s, s),
            self.state[1] + action[1].clamp(-s, s),
        ];
        if let Some(n) = &self.noise {
            next[0] += n.sample(&mut self.rng);
            next[1] += n.sample(&mut self.rng);
        }
        // A blocked move slides along whichever axis stays free.
        let cur = [self.state[0], self.state[1]];
        let free = |p: &[f64; 2]| !self.params.walls.iter().any(|w| w.contains(p));
        let moved = [
            next,
            [next[0], cur[1]],
            [cur[0], next[1]],
        ]
        .into_iter()
        .map(|p| self.clip_to_arena(p))
        .find(|p| free(p));
        if let Some(p) = moved {
            self.state = StateVec::new(p.to_vec());
        }
        let terminal = self.in_goal(&self.state);
        Ok(StepOutcome {
            state: self.state.clone(),
            reward: if terminal { GOAL_REWARD } else { STEP_COST },
            terminal,
        })
    }

    fn state(&self) -> &StateVec {
        &self.state
    }

    fn in_goal(&self, state: &[f64]) -> bool {
        let g = self.params.goal;
        (state[0] - g[0]).hypot(state[1] - g[1]) <= self.params.goal_radius
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StitchingSpec {
    pub half_extent: f64,
    pub step_size: f64,
    /// Behavior-policy displacement per step (L2), at most `step_size`.
    pub speed: f64,
    pub start: [f64; 2],
    /// Turning points: family A passes the first on its way to M, family B
    /// the second on its way from M to G.
    pub corners: Vec<[f64; 2]>,
    pub midpoint: [f64; 2],
    pub goal: [f64; 2],
    pub goal_radius: f64,
    /// Where family A goes after M; `None` stops it at M.
    pub dead_end: Option<[f64; 2]>,
    /// Where family B begins.
    pub branch_start: [f64; 2],
    /// Distance by which family B misses M, measured away from the center.
    pub gap: f64,
    /// Family A trajectories.
    pub traj_count: usize,
    /// Family B trajectories.
    pub branch_count: usize,
    /// Radius of the start disks of both families.
    pub start_jitter: f64,
    /// Behavior-policy action noise std, in units of `speed`.
    pub action_noise: f64,
    /// Environment transition noise, in units of `step_size`.
    pub noise: f64,
    pub ood_inner: f64,
    pub ood_outer: f64,
    pub walls: Vec<Wall>,
    pub max_len: usize,
}

impl Default for StitchingSpec {
    /// S at the bottom of the left arm, M at the end of the top arm, D in a
    /// pocket straight above M and G at the bottom of a corridor straight
    /// below it. Family B starts on the top arm just before M.
    fn default() -> Self {
        let wall = |min: [f64; 2], max: [f64; 2]| Wall { min, max };
        Self {
            half_extent: 10.0,
            step_size: 0.5,
            speed: 0.45,
            start: [-5.0, 0.0],
            corners: vec![[-5.0, 5.0]],
            midpoint: [0.0, 5.0],
            goal: [0.0, 1.2],
            goal_radius: 1.0,
            dead_end: Some([0.0, 9.0]),
            branch_start: [-2.5, 5.0],
            gap: 0.0,
            traj_count: 6,
            branch_count: 3,
            start_jitter: 0.5,
            action_noise: 0.1,
            noise: 0.0,
            ood_inner: 1.0,
            ood_outer: 2.0,
            walls: vec![
                wall([-10.0, -10.0], [-6.0, 10.0]),
                wall([-6.0, 6.0], [-1.0, 10.0]),
                wall([1.0, -10.0], [10.0, 10.0]),
                wall([-4.0, -10.0], [-1.0, 4.0]),
                wall([-1.0, -10.0], [1.0, 0.0]),
            ],
            max_len: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartMode {
    #[default]
    InDistribution,
    /// Annulus around S, off the dataset's support.
    Ood,
}

impl StitchingSpec {
    pub fn validate(&self) -> Result<()> {
        let h = self.half_extent;
        let inside = |p: [f64; 2]| p[0].abs() <= h && p[1].abs() <= h;
        if !(self.gap >= 0.0 && self.gap.is_finite()) {
            return Err(RadError::Scenario(format!("invalid gap {}", self.gap)));
        }
        if !(self.speed > 0.0 && self.speed <= self.step_size) {
            return Err(RadError::Scenario("speed must lie in (0, step_size]".into()));
        }
        let mut points = vec![
            ("start", self.start),
            ("midpoint", self.midpoint),
            ("goal", self.goal),
            ("branch_start", self.branch_start),
            ("gapped midpoint", self.gapped_midpoint()),
        ];
        points.extend(self.dead_end.map(|d| ("dead_end", d)));
        points.extend(self.corners.iter().map(|c| ("corner", *c)));
        for (name, p) in points {
            if !inside(p) {
                return Err(RadError::Scenario(format!("{name} {p:?} lies outside the arena")));
            }
            if self.walls.iter().any(|w| w.contains(&p)) {
                return Err(RadError::Scenario(format!("{name} {p:?} lies inside a wall")));
            }
        }
        if self.corners.len() > 2 {
            return Err(RadError::Scenario("at most two corners".into()));
        }
        if self.traj_count == 0 || self.branch_count == 0 {
            return Err(RadError::Scenario("both families need at least one trajectory".into()));
        }
        if !(self.ood_inner >= 0.0 && self.ood_outer > self.ood_inner) {
            return Err(RadError::Scenario("OOD annulus needs 0 <= inner < outer".into()));
        }
        Ok(())
    }

    /// The waypoint family B passes through.
    pub fn gapped_midpoint(&self) -> [f64; 2] {
        let [x, y] = self.midpoint;
        let r = x.hypot(y);
        let (ux, uy) = if r > 0.0 { (x / r, y / r) } else { (0.0, 1.0) };
        [x + self.gap * ux, y + self.gap * uy]
    }

    pub fn env_params(&self, mode: StartMode) -> Nav2dParams {
        let start = match mode {
            StartMode::InDistribution => StartDistribution::Disk {
                center: self.start,
                radius: self.start_jitter,
            },
            StartMode::Ood => StartDistribution::Annulus {
                center: self.start,
                inner: self.ood_inner,
                outer: self.ood_outer,
            },
        };
        Nav2dParams {
            half_extent: self.half_extent,
            step_size: self.step_size,
            goal: self.goal,
            goal_radius: self.goal_radius,
            walls: self.walls.clone(),
            noise: self.noise,
            start,
        }
    }

    pub fn env(&self, mode: StartMode) -> Result<Nav2d> {
        self.validate()?;
        nav2d_env(self.env_params(mode))
    }

    /// Family A holds ids `0..traj_count`, family B the `branch_count` after.
    pub fn is_family_b(&self, traj_id: u64) -> bool {
        traj_id >= self.traj_count as u64
    }
}

/// Follows waypoints at `speed`; the step that reaches a waypoint lands on
/// it exactly.
fn waypoint_rollout(
    env: &mut Nav2d,
    waypoints: &[[f64; 2]],
    spec: &StitchingSpec,
    id: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let noise = Normal::new(0.0, spec.action_noise * spec.speed)
        .map_err(|e| RadError::Scenario(e.to_string()))?;
    let mut transitions = Vec::new();
    let mut wp = 0;
    let mut terminal = false;
    while wp < waypoints.len() && !terminal {
        if transitions.len() >= spec.max_len {
            return Err(RadError::Scenario(format!(
                "behavior policy exceeded {} steps",
                spec.max_len
            )));
        }
        let s = env.state().clone();
        let target = waypoints[wp];
        let (dx, dy) = (target[0] - s[0], target[1] - s[1]);
        let dist = dx.hypot(dy);
        let action = if dist <= spec.speed {
            wp += 1;
            [dx, dy]
        } else {
            let (nx, ny): (f64, f64) = (noise.sample(rng), noise.sample(rng));
            let lim = spec.step_size;
            [
                (dx / dist * spec.speed + nx).clamp(-lim, lim),
                (dy / dist * spec.speed + ny).clamp(-lim, lim),
            ]
        };
        let out = env.step(&action).map_err(|e| match e {
            RadError::Env { msg, .. } => RadError::Env {
                step: transitions.len(),
                msg,
            },
            other => other,
        })?;
        terminal = out.terminal;
        transitions.push(Transition {
            state: s,
            action: ActionVec::new(action.to_vec()),
            reward: out.reward,
        });
    }
    // the final state is kept as an absorbing row so it can be retrieved
    transitions.push(Transition {
        state: env.state().clone(),
        action: ActionVec::zeros(2),
        reward: 0.0,
    });
    Ok(Trajectory::new(id, transitions))
}

pub fn gen_stitching_dataset(spec: &StitchingSpec, seed: u64) -> Result<OfflineDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = spec.env(StartMode::InDistribution)?;
    // a single goal far outside the arena keeps family A from terminating
    let mut env_a = nav2d_env(Nav2dParams {
        goal: [f64::INFINITY, f64::INFINITY],
        ..spec.env_params(StartMode::InDistribution)
    })?;
    let mut trajs = Vec::with_capacity(spec.traj_count + spec.branch_count);
    let mut a_route: Vec<[f64; 2]> = spec.corners.first().copied().into_iter().collect();
    a_route.push(spec.midpoint);
    a_route.extend(spec.dead_end);
    for k in 0..spec.traj_count {
        env_a.reset(rng.random());
        let t = waypoint_rollout(&mut env_a, &a_route, spec, k as u64, &mut rng)?;
        if t.transitions.iter().any(|tr| env.in_goal(&tr.state)) {
            return Err(RadError::Scenario("family A passes through the goal".into()));
        }
        trajs.push(t);
    }
    let branch = StartDistribution::Disk {
        center: spec.branch_start,
        radius: spec.start_jitter,
    };
    for k in 0..spec.branch_count {
        env.reset(rng.random());
        let p = branch.sample(&mut rng);
        env.set_state(p);
        let id = (spec.traj_count + k) as u64;
        let mut b_route = vec![spec.gapped_midpoint()];
        b_route.extend(spec.corners.get(1).copied());
        b_route.push(spec.goal);
        let t = waypoint_rollout(&mut env, &b_route, spec, id, &mut rng)?;
        if !env.in_goal(env.state()) {
            return Err(RadError::Scenario(format!("family B trajectory {id} misses the goal")));
        }
        trajs.push(t);
    }
    OfflineDataset::new(trajs, 2, 2, crate::trajectory::DEFAULT_GAMMA)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinewalkSpec {
    pub traj_count: usize,
    pub length: usize,
    pub step_size: f64,
    /// Starts are uniform on `[-start_range, start_range]`.
    pub start_range: f64,
}

impl Default for LinewalkSpec {
    fn default() -> Self {
        Self {
            traj_count: 50,
            length: 40,
            step_size: 0.1,
            start_range: 5.0,
        }
    }
}

/// 1-D constant-velocity walks in a random direction; states are computed
/// as `x0 + t * step` so offsets are exact.
pub fn gen_linewalk_dataset(spec: &LinewalkSpec, seed: u64) -> Result<OfflineDataset> {
    if spec.traj_count == 0 || spec.length < 2 || !(spec.step_size > 0.0) {
        return Err(RadError::Scenario("linewalk needs trajectories of length >= 2 and a positive step".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trajs = (0..spec.traj_count)
        .map(|k| {
            let x0 = rng.random_range(-spec.start_range..=spec.start_range);
            let v = if rng.random::<bool>() { spec.step_size } else { -spec.step_size };
            Trajectory::from_columns(
                k as u64,
                (0..spec.length).map(|t| vec![x0 + v * t as f64]).collect(),
                (0..spec.length).map(|_| vec![v]).collect(),
                vec![0.0; spec.length],
            )
        })
        .collect::<Result<Vec<_>>>()?;
    OfflineDataset::new(trajs, 1, 1, crate::trajectory::DEFAULT_GAMMA)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_action_keeps_state() {
        let mut env = nav2d_env(Nav2dParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let p = [rng.random_range(-9.0..9.0), rng.random_range(-9.0..-2.0)];
            env.set_state(p);
            let out = env.step(&[0.0, 0.0]).unwrap();
            assert_eq!(out.state.to_vec(), p.to_vec());
            assert_eq!(out.reward, STEP_COST);
            assert!(!out.terminal);
        }
    }

    #[test]
    fn entering_goal_terminates() {
        let mut env = nav2d_env(Nav2dParams::default()).unwrap();
        env.set_state([5.2, 0.0]);
        let out = env.step(&[0.5, 0.0]).unwrap();
        assert!(out.terminal);
        assert_eq!(out.reward, GOAL_REWARD);
    }

    #[test]
    fn random_walk_stays_in_arena() {
        let mut env = nav2d_env(Nav2dParams {
            noise: 0.5,
            ..Default::default()
        })
        .unwrap();
        env.reset(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let a = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let s = env.step(&a).unwrap().state;
            assert!(s.iter().all(|v| v.abs() <= 10.0));
        }
    }

    #[test]
    fn walls_block_motion() {
        let mut env = nav2d_env(Nav2dParams {
            walls: vec![Wall {
                min: [0.0, -1.0],
                max: [1.0, 1.0],
            }],
            ..Default::default()
        })
        .unwrap();
        env.set_state([-0.3, 0.0]);
        assert_eq!(env.step(&[0.5, 0.0]).unwrap().state.to_vec(), vec![-0.3, 0.0]);
        // diagonal into the wall keeps the free component
        assert_eq!(env.step(&[0.5, 0.25]).unwrap().state.to_vec(), vec![-0.3, 0.25]);
    }

    #[test]
    fn env_is_deterministic_under_seed() {
        let params = Nav2dParams {
            noise: 0.2,
            start: StartDistribution::Disk {
                center: [0.0, 0.0],
                radius: 2.0,
            },
            ..Default::default()
        };
        let run = || {
            let mut env = nav2d_env(params.clone()).unwrap();
            let mut states = vec![env.reset(17)];
            for k in 0..30 {
                states.push(env.step(&[0.1 * (k % 3) as f64, -0.2]).unwrap().state);
            }
            states
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn stitching_families_separate() {
        let spec = StitchingSpec::default();
        for seed in 0..10 {
            let data = gen_stitching_dataset(&spec, seed).unwrap();
            let env = spec.env(StartMode::InDistribution).unwrap();
            let mut a_max = f64::NEG_INFINITY;
            let mut b_min = f64::INFINITY;
            for t in data.trajectories() {
                let ret: f64 = t.rewards().sum();
                let last = &t.transitions.last().unwrap().state;
                if spec.is_family_b(t.id) {
                    assert!(env.in_goal(last));
                    // short enough that every state's segment return sees the goal
                    assert!(t.len() < 32, "trajectory {} has {} steps", t.id, t.len());
                    b_min = b_min.min(ret);
                } else {
                    assert!(t.transitions.iter().all(|tr| !env.in_goal(&tr.state)));
                    a_max = a_max.max(ret);
                }
            }
            assert!(b_min > a_max);
        }
    }

    #[test]
    fn zero_gap_makes_families_touch() {
        let spec = StitchingSpec {
            dead_end: None,
            ..Default::default()
        };
        let data = gen_stitching_dataset(&spec, 1).unwrap();
        let ends: Vec<_> = data
            .trajectories()
            .iter()
            .filter(|t| !spec.is_family_b(t.id))
            .map(|t| t.transitions.last().unwrap().state.clone())
            .collect();
        let mut best = f64::INFINITY;
        for t in data.trajectories().iter().filter(|t| spec.is_family_b(t.id)) {
            for tr in &t.transitions {
                for e in &ends {
                    best = best.min((tr.state[0] - e[0]).hypot(tr.state[1] - e[1]));
                }
            }
        }
        assert!(best < 1e-9, "{best}");
    }

    #[test]
    fn family_a_passes_midpoint_on_the_way_to_the_dead_end() {
        let spec = StitchingSpec::default();
        let data = gen_stitching_dataset(&spec, 2).unwrap();
        let m = spec.midpoint;
        for t in data.trajectories().iter().filter(|t| !spec.is_family_b(t.id)) {
            let hit = t.transitions.iter().any(|tr| (tr.state[0] - m[0]).hypot(tr.state[1] - m[1]) < 1e-9);
            assert!(hit);
            let end = &t.transitions.last().unwrap().state;
            let d = spec.dead_end.unwrap();
            assert!((end[0] - d[0]).hypot(end[1] - d[1]) < 1e-9);
        }
    }

    #[test]
    fn infeasible_gap_is_rejected() {
        let spec = StitchingSpec {
            gap: 50.0,
            ..Default::default()
        };
        assert!(matches!(gen_stitching_dataset(&spec, 0), Err(RadError::Scenario(_))));
    }

    #[test]
    fn ood_starts_leave_the_start_disk() {
        let spec = StitchingSpec::default();
        let mut env = spec.env(StartMode::Ood).unwrap();
        for seed in 0..50 {
            let s = env.reset(seed);
            let d = (s[0] - spec.start[0]).hypot(s[1] - spec.start[1]);
            assert!(d >= spec.ood_inner - 1e-12 && d <= spec.ood_outer + 1e-12);
        }
    }

    #[test]
    fn linewalk_offsets_are_exact() {
        let spec = LinewalkSpec::default();
        let data = gen_linewalk_dataset(&spec, 0).unwrap();
        for t in data.trajectories() {
            for w in t.transitions.windows(2) {
                let d = (w[1].state[0] - w[0].state[0]).abs();
                assert!((d - spec.step_size).abs() < 1e-12);
            }
            let x0 = t.state(0)[0];
            let x5 = t.state(5)[0];
            assert!(((x5 - x0).abs() / spec.step_size - 5.0).abs() < 1e-9);
        }
    }

    #[test]
    fn generated_datasets_roundtrip() {
        let data = gen_stitching_dataset(&StitchingSpec::default(), 5).unwrap();
        let back = OfflineDataset::from_jsonl(&data.to_jsonl()).unwrap();
        assert_eq!(back.content_hash(), data.content_hash());
        let data = gen_linewalk_dataset(&LinewalkSpec::default(), 5).unwrap();
        let back = OfflineDataset::from_jsonl(&data.to_jsonl()).unwrap();
        assert_eq!(back.trajectories(), data.trajectories());
    }
}
