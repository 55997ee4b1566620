//! Condition-guided diffusion over short state-action plans.
//!
//! Plans are `H x (ds + da)` matrices in normalized units, state columns
//! first. Conditioning is by inpainting: anchored state entries are clamped
//! to their known values at initialization and after every reverse step, and
//! are excluded from the denoising loss. A learned return guide shifts each
//! reverse-step mean along its input gradient.
//!
//! Noise stream contract for [`sample_plan`]: the initial plan consumes
//! `H * (ds + da)` standard normals in row-major order, then every reverse
//! step `i > 1` consumes another `H * (ds + da)` in row-major order. Step 1
//! draws nothing.

use ndarray::{Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{RadError, Result};
use crate::nn::{Activation, Mlp, NetSpec, OptimizerState, Trainer};
use crate::trajectory::{discounted_suffix_return, OfflineDataset};

/// Default number of denoising steps.
pub const DEFAULT_DIFFUSION_STEPS: usize = 20;
/// Default plan horizon.
pub const DEFAULT_HORIZON: usize = 32;

const MAX_BETA: f64 = 0.999;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    #[default]
    Cosine,
}

/// Per-step coefficients, stored for steps `1..=N` at index `i - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub n_steps: usize,
    pub kind: ScheduleKind,
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    /// `sqrt(alpha_bar_i)`, the signal coefficient.
    pub alphas: Vec<f64>,
    /// `sqrt(1 - alpha_bar_i)`, the noise coefficient.
    pub sigmas: Vec<f64>,
    pub posterior_variances: Vec<f64>,
}

pub fn make_schedule(n_steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if n_steps == 0 {
        return Err(RadError::InvalidArgument("schedule needs at least one step".into()));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            // the usual 1e-4..0.02 over 1000 steps, rescaled to n_steps
            let scale = 1000.0 / n_steps as f64;
            let (lo, hi) = ((1e-4 * scale).min(MAX_BETA), (0.02 * scale).min(MAX_BETA));
            if n_steps == 1 {
                vec![lo]
            } else {
                (0..n_steps)
                    .map(|k| lo + (hi - lo) * k as f64 / (n_steps - 1) as f64)
                    .collect()
            }
        }
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| ((t / n_steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (1..=n_steps)
                .map(|i| (1.0 - f(i as f64) / f((i - 1) as f64)).clamp(1e-8, MAX_BETA))
                .collect()
        }
    };
    let mut alpha_bars = Vec::with_capacity(n_steps);
    let mut prod = 1.0;
    for b in &betas {
        prod *= 1.0 - b;
        alpha_bars.push(prod);
    }
    let alphas = alpha_bars.iter().map(|a| a.sqrt()).collect();
    let sigmas = alpha_bars.iter().map(|a| (1.0 - a).sqrt()).collect();
    let posterior_variances = (0..n_steps)
        .map(|k| {
            let prev = if k == 0 { 1.0 } else { alpha_bars[k - 1] };
            betas[k] * (1.0 - prev) / (1.0 - alpha_bars[k])
        })
        .collect();
    Ok(NoiseSchedule {
        n_steps,
        kind,
        betas,
        alpha_bars,
        alphas,
        sigmas,
        posterior_variances,
    })
}

impl NoiseSchedule {
    fn check(&self, i: usize) {
        assert!(i >= 1 && i <= self.n_steps, "diffusion step {i} outside 1..={}", self.n_steps);
    }

    pub fn beta(&self, i: usize) -> f64 {
        self.check(i);
        self.betas[i - 1]
    }

    /// `alpha_bar_i`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, i: usize) -> f64 {
        if i == 0 {
            1.0
        } else {
            self.check(i);
            self.alpha_bars[i - 1]
        }
    }

    /// Signal coefficient; `alpha_0 = 1`.
    pub fn alpha(&self, i: usize) -> f64 {
        self.alpha_bar(i).sqrt()
    }

    /// Noise coefficient; `sigma_0 = 0`.
    pub fn sigma(&self, i: usize) -> f64 {
        if i == 0 {
            0.0
        } else {
            self.check(i);
            self.sigmas[i - 1]
        }
    }

    pub fn posterior_variance(&self, i: usize) -> f64 {
        self.check(i);
        self.posterior_variances[i - 1]
    }
}

/// A plan of `H` rows, each `(state, action)` in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanMatrix {
    data: Array2<f64>,
    ds: usize,
}

impl PlanMatrix {
    pub fn new(data: Array2<f64>, ds: usize) -> Result<Self> {
        if data.nrows() < 2 {
            return Err(RadError::InvalidArgument("plan horizon must be at least 2".into()));
        }
        if ds == 0 || ds >= data.ncols() {
            return Err(RadError::InvalidArgument(format!(
                "state width {ds} incompatible with {} plan columns",
                data.ncols()
            )));
        }
        Ok(Self { data, ds })
    }

    pub fn zeros(horizon: usize, ds: usize, da: usize) -> Result<Self> {
        Self::new(Array2::zeros((horizon, ds + da)), ds)
    }

    pub fn from_flat(horizon: usize, ds: usize, da: usize, flat: Vec<f64>) -> Result<Self> {
        let data = Array2::from_shape_vec((horizon, ds + da), flat).map_err(|_| {
            RadError::DimensionMismatch {
                expected: horizon * (ds + da),
                got: 0,
            }
        })?;
        Self::new(data, ds)
    }

    pub fn horizon(&self) -> usize {
        self.data.nrows()
    }

    pub fn ds(&self) -> usize {
        self.ds
    }

    pub fn da(&self) -> usize {
        self.data.ncols() - self.ds
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<f64> {
        &mut self.data
    }

    pub fn state(&self, row: usize) -> ArrayView1<'_, f64> {
        self.data.row(row).slice_move(ndarray::s![..self.ds])
    }

    pub fn action(&self, row: usize) -> ArrayView1<'_, f64> {
        self.data.row(row).slice_move(ndarray::s![self.ds..])
    }

    /// Row-major flattening, the network input layout.
    pub fn to_flat(&self) -> Vec<f64> {
        self.data.iter().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub position: usize,
    pub state: Vec<f64>,
}

/// Known states clamped into a plan at fixed rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnchorSet {
    anchors: Vec<Anchor>,
}

impl AnchorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, position: usize, state: Vec<f64>) -> Result<()> {
        if self.anchors.iter().any(|a| a.position == position) {
            return Err(RadError::InvalidArgument(format!(
                "duplicate anchor position {position}"
            )));
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(RadError::InvalidArgument("anchor state is not finite".into()));
        }
        self.anchors.push(Anchor { position, state });
        Ok(())
    }

    /// `{(0, s_t), (i_hat, s_g)}`.
    pub fn start_and_target(s_t: Vec<f64>, s_g: Vec<f64>, i_hat: usize) -> Result<Self> {
        if i_hat == 0 {
            return Err(RadError::InvalidArgument("target anchor cannot sit at row 0".into()));
        }
        let mut set = Self::new();
        set.push(0, s_t)?;
        set.push(i_hat, s_g)?;
        Ok(set)
    }

    pub fn start_only(s_t: Vec<f64>) -> Result<Self> {
        let mut set = Self::new();
        set.push(0, s_t)?;
        Ok(set)
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn positions(&self) -> Vec<usize> {
        self.anchors.iter().map(|a| a.position).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    fn validate(&self, horizon: usize, ds: usize) -> Result<()> {
        for a in &self.anchors {
            if a.position >= horizon {
                return Err(RadError::Index {
                    index: a.position,
                    len: horizon,
                });
            }
            if a.state.len() != ds {
                return Err(RadError::DimensionMismatch {
                    expected: ds,
                    got: a.state.len(),
                });
            }
        }
        Ok(())
    }

    /// 0 at anchored state entries, 1 elsewhere.
    pub fn free_mask(&self, horizon: usize, ds: usize, da: usize) -> Array2<f64> {
        let mut mask = Array2::ones((horizon, ds + da));
        for a in &self.anchors {
            for c in 0..ds {
                mask[[a.position, c]] = 0.0;
            }
        }
        mask
    }

    fn clamp_into(&self, plan: &mut PlanMatrix) {
        for a in &self.anchors {
            for (c, v) in a.state.iter().enumerate() {
                plan.data[[a.position, c]] = *v;
            }
        }
    }
}

/// Replaces the state block of every anchored row; actions and other rows
/// are untouched.
pub fn apply_anchors(tau: &PlanMatrix, anchors: &AnchorSet) -> Result<PlanMatrix> {
    anchors.validate(tau.horizon(), tau.ds())?;
    let mut out = tau.clone();
    anchors.clamp_into(&mut out);
    Ok(out)
}

/// `tau_i = alpha_i * tau_0 + sigma_i * eps`, with `i = 0` giving `tau_0`.
pub fn forward_noise(
    tau0: &PlanMatrix,
    i: usize,
    eps: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<PlanMatrix> {
    if i > sched.n_steps {
        return Err(RadError::Index {
            index: i,
            len: sched.n_steps + 1,
        });
    }
    if eps.dim() != tau0.data.dim() {
        return Err(RadError::DimensionMismatch {
            expected: tau0.data.len(),
            got: eps.len(),
        });
    }
    let (a, s) = (sched.alpha(i), sched.sigma(i));
    let data = ndarray::Zip::from(&tau0.data)
        .and(eps)
        .map_collect(|&x, &e| a * x + s * e);
    PlanMatrix::new(data, tau0.ds)
}

fn standard_normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows, cols));
    for v in m.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    m
}

/// Noise-prediction network plus the schedule it was trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionModel {
    pub net: Mlp,
    pub schedule: NoiseSchedule,
    pub horizon: usize,
    pub ds: usize,
    pub da: usize,
}

impl DiffusionModel {
    pub fn new(config: &DiffusionTrainConfig, ds: usize, da: usize) -> Result<Self> {
        let width = config.horizon * (ds + da);
        let spec = NetSpec::new(width, &config.hidden, width, config.activation, config.step_embed_dim);
        Ok(Self {
            net: Mlp::new(spec, config.seed)?,
            schedule: make_schedule(config.n_steps, config.schedule)?,
            horizon: config.horizon,
            ds,
            da,
        })
    }

    fn check_plan(&self, plan: &PlanMatrix) -> Result<()> {
        if plan.horizon() != self.horizon || plan.ds() != self.ds || plan.da() != self.da {
            return Err(RadError::DimensionMismatch {
                expected: self.horizon * (self.ds + self.da),
                got: plan.data.len(),
            });
        }
        Ok(())
    }

    /// `eps_theta(tau_i, i)`.
    pub fn predict_noise(&self, tau: &PlanMatrix, i: usize) -> Result<Array2<f64>> {
        self.check_plan(tau)?;
        let out = self.net.forward(&tau.to_flat(), Some(i))?;
        Ok(Array2::from_shape_vec(tau.data.dim(), out).expect("output width equals plan size"))
    }
}

/// Learned predictor of the (normalized) return of a noisy plan.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnGuide {
    pub net: Mlp,
    pub horizon: usize,
    pub ds: usize,
    pub da: usize,
    /// Raw segment-return range mapped onto `[0, 1]` during training.
    pub return_min: f64,
    pub return_max: f64,
}

impl ReturnGuide {
    /// `J_phi(tau, i)` in normalized return units.
    pub fn predict(&self, tau: &PlanMatrix, i: usize) -> Result<f64> {
        Ok(self.net.forward(&tau.to_flat(), Some(i))?[0])
    }

    /// Prediction mapped back to raw return units.
    pub fn predict_raw(&self, tau: &PlanMatrix, i: usize) -> Result<f64> {
        Ok(self.return_min + self.predict(tau, i)? * (self.return_max - self.return_min))
    }

    /// `grad_tau J_phi(tau, i)`.
    pub fn gradient(&self, tau: &PlanMatrix, i: usize) -> Result<Array2<f64>> {
        let (_, gx) = self.net.backward(&tau.to_flat(), Some(i), &[1.0])?;
        Ok(Array2::from_shape_vec(tau.data.dim(), gx).expect("input width equals plan size"))
    }

    pub fn scale_return(&self, v: f64) -> f64 {
        scale_return(v, self.return_min, self.return_max)
    }
}

fn scale_return(v: f64, lo: f64, hi: f64) -> f64 {
    if hi - lo <= 1e-12 {
        0.5
    } else {
        (v - lo) / (hi - lo)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub rho: f64,
    /// L2 bound on the guide gradient before scaling by `rho`.
    pub guide_gradient_clip: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            rho: 0.1,
            guide_gradient_clip: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseVariance {
    /// `beta_i`, as in the guided reverse step.
    #[default]
    Beta,
    /// The true posterior variance of `q(tau_{i-1} | tau_i, tau_0)`.
    Posterior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub guidance: GuidanceConfig,
    /// Clamp the implied clean plan to `[-1, 1]` before forming the mean.
    pub clip_denoised: bool,
    pub variance: ReverseVariance,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            guidance: GuidanceConfig::default(),
            clip_denoised: true,
            variance: ReverseVariance::Beta,
        }
    }
}

/// Posterior mean of `tau_{i-1}` given `tau_i` and predicted noise, via the
/// implied clean plan. Without clipping this equals
/// `(tau_i - beta_i / sigma_i * eps) / sqrt(1 - beta_i)`.
pub fn posterior_mean(
    tau: &Array2<f64>,
    eps_hat: &Array2<f64>,
    i: usize,
    sched: &NoiseSchedule,
    clip_denoised: bool,
) -> Array2<f64> {
    let (a, s) = (sched.alpha(i), sched.sigma(i));
    let beta = sched.beta(i);
    let ab = sched.alpha_bar(i);
    let ab_prev = sched.alpha_bar(i - 1);
    let coef_x0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let coef_xt = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    ndarray::Zip::from(tau).and(eps_hat).map_collect(|&x, &e| {
        let mut x0 = (x - s * e) / a;
        if clip_denoised {
            x0 = x0.clamp(-1.0, 1.0);
        }
        coef_x0 * x0 + coef_xt * x
    })
}

/// The guidance term `grad J(tau_i, i)` with anchored entries zeroed and
/// the L2 norm clipped.
pub fn guidance_direction(
    guide: &ReturnGuide,
    tau: &PlanMatrix,
    i: usize,
    anchors: &AnchorSet,
    clip: f64,
) -> Result<Array2<f64>> {
    let mut g = guide.gradient(tau, i)?;
    g *= &anchors.free_mask(tau.horizon(), tau.ds(), tau.da());
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > clip && norm.is_finite() {
        g *= clip / norm;
    }
    Ok(g)
}

/// One guided reverse step `tau_i -> tau_{i-1}`, anchors re-applied.
pub fn denoise_step(
    tau: &PlanMatrix,
    i: usize,
    model: &DiffusionModel,
    guide: Option<&ReturnGuide>,
    cfg: &SamplerConfig,
    anchors: &AnchorSet,
    rng: &mut impl Rng,
) -> Result<PlanMatrix> {
    let sched = &model.schedule;
    if i < 1 || i > sched.n_steps {
        return Err(RadError::Index {
            index: i,
            len: sched.n_steps + 1,
        });
    }
    anchors.validate(tau.horizon(), tau.ds())?;
    let eps_hat = model.predict_noise(tau, i)?;
    let mut mean = posterior_mean(&tau.data, &eps_hat, i, sched, cfg.clip_denoised);
    if let Some(guide) = guide {
        if cfg.guidance.rho != 0.0 {
            let g = guidance_direction(guide, tau, i, anchors, cfg.guidance.guide_gradient_clip)?;
            mean.scaled_add(cfg.guidance.rho, &g);
        }
    }
    if i > 1 {
        let var = match cfg.variance {
            ReverseVariance::Beta => sched.beta(i),
            ReverseVariance::Posterior => sched.posterior_variance(i),
        };
        let z = standard_normal_matrix(rng, tau.horizon(), tau.width());
        mean.scaled_add(var.sqrt(), &z);
    }
    let mut out = PlanMatrix::new(mean, tau.ds)?;
    anchors.clamp_into(&mut out);
    if !out.is_finite() {
        return Err(RadError::Sampling { step: i });
    }
    Ok(out)
}

/// Runs the full reverse chain from Gaussian noise. `observer` sees the plan
/// after initialization (step `N`) and after each reverse step (`i - 1`).
pub fn sample_plan_traced(
    model: &DiffusionModel,
    guide: Option<&ReturnGuide>,
    cfg: &SamplerConfig,
    anchors: &AnchorSet,
    rng: &mut impl Rng,
    mut observer: impl FnMut(usize, &PlanMatrix),
) -> Result<PlanMatrix> {
    anchors.validate(model.horizon, model.ds)?;
    let n = model.schedule.n_steps;
    let init = standard_normal_matrix(rng, model.horizon, model.ds + model.da);
    let mut tau = PlanMatrix::new(init, model.ds)?;
    anchors.clamp_into(&mut tau);
    observer(n, &tau);
    for i in (1..=n).rev() {
        tau = denoise_step(&tau, i, model, guide, cfg, anchors, rng)?;
        observer(i - 1, &tau);
    }
    Ok(tau)
}

pub fn sample_plan(
    model: &DiffusionModel,
    guide: Option<&ReturnGuide>,
    cfg: &SamplerConfig,
    anchors: &AnchorSet,
    rng: &mut impl Rng,
) -> Result<PlanMatrix> {
    sample_plan_traced(model, guide, cfg, anchors, rng, |_, _| {})
}

/// Plan anchored at `{(0, s_t), (i_hat, s_g)}`; states already normalized.
pub fn sample_anchored_plan(
    model: &DiffusionModel,
    guide: Option<&ReturnGuide>,
    cfg: &SamplerConfig,
    s_t: &[f64],
    s_g: &[f64],
    i_hat: usize,
    rng: &mut impl Rng,
) -> Result<PlanMatrix> {
    if i_hat == 0 || i_hat >= model.horizon {
        return Err(RadError::Index {
            index: i_hat,
            len: model.horizon,
        });
    }
    let anchors = AnchorSet::start_and_target(s_t.to_vec(), s_g.to_vec(), i_hat)?;
    sample_plan(model, guide, cfg, &anchors, rng)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortTrajectoryPolicy {
    /// Trajectories shorter than the horizon contribute no windows.
    #[default]
    Skip,
    /// Windows running past the end repeat the last state with a zero action.
    PadLastState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainConfig {
    pub horizon: usize,
    pub n_steps: usize,
    pub schedule: ScheduleKind,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub step_embed_dim: usize,
    pub epochs: usize,
    pub batch: usize,
    /// Gradient steps per epoch; defaults to one pass worth of windows.
    pub steps_per_epoch: Option<usize>,
    pub lr: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub short_trajectories: ShortTrajectoryPolicy,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            horizon: DEFAULT_HORIZON,
            n_steps: DEFAULT_DIFFUSION_STEPS,
            schedule: ScheduleKind::Cosine,
            hidden: vec![512, 512, 512],
            activation: Activation::Mish,
            step_embed_dim: 16,
            epochs: 10,
            batch: 64,
            steps_per_epoch: None,
            lr: 2e-4,
            grad_clip: 10.0,
            seed: 0,
            short_trajectories: ShortTrajectoryPolicy::Skip,
        }
    }
}

impl DiffusionTrainConfig {
    /// Defaults for the return guide: same data pipeline, smaller network.
    pub fn guide_default() -> Self {
        Self {
            hidden: vec![256, 256],
            ..Self::default()
        }
    }
}

/// Every training window of a dataset, normalized and flattened.
pub struct PlanWindows {
    pub data: Array2<f64>,
    /// `(trajectory index, start timestep)` per row.
    pub origins: Vec<(usize, usize)>,
    /// Raw discounted return of each window's `H` steps.
    pub returns: Vec<f64>,
}

pub fn build_windows(
    dataset: &OfflineDataset,
    horizon: usize,
    policy: ShortTrajectoryPolicy,
) -> Result<PlanWindows> {
    if horizon < 2 {
        return Err(RadError::InvalidArgument("horizon must be at least 2".into()));
    }
    let (ds, da) = (dataset.ds(), dataset.da());
    let width = horizon * (ds + da);
    let zero_action = dataset.normalize_action(&vec![0.0; da])?;
    let mut flat = Vec::new();
    let mut origins = Vec::new();
    let mut returns = Vec::new();
    for (ti, traj) in dataset.trajectories().iter().enumerate() {
        let t_len = traj.len();
        let starts = match policy {
            ShortTrajectoryPolicy::Skip if t_len >= horizon => 0..t_len - horizon + 1,
            ShortTrajectoryPolicy::Skip => 0..0,
            ShortTrajectoryPolicy::PadLastState if t_len >= 2 => 0..t_len - 1,
            ShortTrajectoryPolicy::PadLastState => 0..0,
        };
        let states = traj
            .transitions
            .iter()
            .map(|tr| dataset.normalize_state(&tr.state))
            .collect::<Result<Vec<_>>>()?;
        let actions = traj
            .transitions
            .iter()
            .map(|tr| dataset.normalize_action(&tr.action))
            .collect::<Result<Vec<_>>>()?;
        for start in starts {
            for row in 0..horizon {
                let t = start + row;
                if t < t_len {
                    flat.extend_from_slice(&states[t]);
                    flat.extend_from_slice(&actions[t]);
                } else {
                    flat.extend_from_slice(&states[t_len - 1]);
                    flat.extend_from_slice(&zero_action);
                }
            }
            origins.push((ti, start));
            returns.push(discounted_suffix_return(traj, start, dataset.gamma(), Some(horizon))?);
        }
    }
    if origins.is_empty() {
        return Err(RadError::Dataset(format!(
            "no trajectory provides a window of horizon {horizon}"
        )));
    }
    let data = Array2::from_shape_vec((origins.len(), width), flat).expect("rows have fixed width");
    Ok(PlanWindows {
        data,
        origins,
        returns,
    })
}

/// Masked noise-prediction loss for one clean plan, the quantity the
/// denoiser minimizes (mean over unanchored entries).
pub fn denoising_loss(
    model: &DiffusionModel,
    tau0: &PlanMatrix,
    anchors: &AnchorSet,
    i: usize,
    eps: &Array2<f64>,
) -> Result<f64> {
    let noisy = forward_noise(tau0, i, eps, &model.schedule)?;
    let noisy = apply_anchors(&noisy, anchors)?;
    let pred = model.predict_noise(&noisy, i)?;
    let mask = anchors.free_mask(tau0.horizon(), tau0.ds(), tau0.da());
    let mut total = 0.0;
    for ((p, e), m) in pred.iter().zip(eps.iter()).zip(mask.iter()) {
        total += m * (p - e) * (p - e);
    }
    Ok(total / mask.sum().max(1.0))
}

pub struct TrainedDenoiser {
    pub model: DiffusionModel,
    pub optimizer: OptimizerState,
    pub losses: Vec<f64>,
}

pub struct TrainedGuide {
    pub guide: ReturnGuide,
    pub optimizer: OptimizerState,
    pub losses: Vec<f64>,
}

fn steps_per_epoch(cfg: &DiffusionTrainConfig, windows: usize) -> usize {
    cfg.steps_per_epoch
        .unwrap_or_else(|| windows.div_ceil(cfg.batch))
        .max(1)
}

fn check_train_config(cfg: &DiffusionTrainConfig) -> Result<()> {
    if cfg.batch == 0 {
        return Err(RadError::Config("batch size must be positive".into()));
    }
    if cfg.horizon < 2 {
        return Err(RadError::Config("horizon must be at least 2".into()));
    }
    Ok(())
}

/// Trains `eps_theta` with pseudo-target anchors.
///
/// Each sample draws a window `tau_0`, an offset `o ~ U(1, H-1)`, a diffusion
/// step `i ~ U(1, N)` and noise `eps`; forms `tau_i`, clamps
/// `{(0, s_t), (o, s_{t+o})}` into it, and regresses onto `eps` outside the
/// anchored entries.
pub fn train_denoiser(dataset: &OfflineDataset, cfg: &DiffusionTrainConfig) -> Result<TrainedDenoiser> {
    train_denoiser_observed(dataset, cfg, |_, _, _| Ok(()))
}

/// [`train_denoiser`] with a callback after every epoch receiving the epoch
/// index, a snapshot of the model and the epoch-mean loss.
pub fn train_denoiser_observed(
    dataset: &OfflineDataset,
    cfg: &DiffusionTrainConfig,
    mut on_epoch: impl FnMut(usize, &DiffusionModel, f64) -> Result<()>,
) -> Result<TrainedDenoiser> {
    check_train_config(cfg)?;
    let windows = build_windows(dataset, cfg.horizon, cfg.short_trajectories)?;
    let model = DiffusionModel::new(cfg, dataset.ds(), dataset.da())?;
    let (h, ds, da) = (cfg.horizon, dataset.ds(), dataset.da());
    let width = h * (ds + da);
    let sched = model.schedule.clone();
    let mut trainer = Trainer::new(model.net, cfg.lr, cfg.grad_clip);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD1FF_u64);
    let per_epoch = steps_per_epoch(cfg, windows.data.nrows());
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for _ in 0..per_epoch {
            let b = cfg.batch;
            let mut x = Array2::zeros((b, width));
            let mut target = Array2::zeros((b, width));
            let mut mask = Array2::ones((b, width));
            let mut steps = Vec::with_capacity(b);
            for r in 0..b {
                let w = rng.random_range(0..windows.data.nrows());
                let offset = rng.random_range(1..h);
                let i = rng.random_range(1..=sched.n_steps);
                let (a, s) = (sched.alpha(i), sched.sigma(i));
                let clean = windows.data.row(w);
                for c in 0..width {
                    let e: f64 = rng.sample(StandardNormal);
                    x[[r, c]] = a * clean[c] + s * e;
                    target[[r, c]] = e;
                }
                for row in [0, offset] {
                    for c in 0..ds {
                        let idx = row * (ds + da) + c;
                        x[[r, idx]] = clean[idx];
                        mask[[r, idx]] = 0.0;
                    }
                }
                steps.push(i);
            }
            sum += trainer.step(x.view(), Some(&steps), target.view(), Some(mask.view()))?;
        }
        let mean = sum / per_epoch as f64;
        if !mean.is_finite() {
            return Err(RadError::Diverged { epoch });
        }
        losses.push(mean);
        let snapshot = DiffusionModel {
            net: trainer.net.clone(),
            schedule: sched.clone(),
            horizon: h,
            ds,
            da,
        };
        on_epoch(epoch, &snapshot, mean)?;
    }
    Ok(TrainedDenoiser {
        model: DiffusionModel {
            net: trainer.net,
            schedule: sched,
            horizon: h,
            ds,
            da,
        },
        optimizer: trainer.opt,
        losses,
    })
}

/// Trains `J_phi` to regress the `[0, 1]`-scaled discounted return of the
/// clean window from its noised version.
pub fn train_return_guide(dataset: &OfflineDataset, cfg: &DiffusionTrainConfig) -> Result<TrainedGuide> {
    check_train_config(cfg)?;
    let windows = build_windows(dataset, cfg.horizon, cfg.short_trajectories)?;
    let (h, ds, da) = (cfg.horizon, dataset.ds(), dataset.da());
    let width = h * (ds + da);
    let lo = windows.returns.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = windows.returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let targets: Vec<f64> = windows.returns.iter().map(|&v| scale_return(v, lo, hi)).collect();
    let sched = make_schedule(cfg.n_steps, cfg.schedule)?;
    let spec = NetSpec::new(width, &cfg.hidden, 1, cfg.activation, cfg.step_embed_dim);
    let mut trainer = Trainer::new(Mlp::new(spec, cfg.seed)?, cfg.lr, cfg.grad_clip);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6A1D_u64);
    let per_epoch = steps_per_epoch(cfg, windows.data.nrows());
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for _ in 0..per_epoch {
            let b = cfg.batch;
            let mut x = Array2::zeros((b, width));
            let mut y = Array2::zeros((b, 1));
            let mut steps = Vec::with_capacity(b);
            for r in 0..b {
                let w = rng.random_range(0..windows.data.nrows());
                let i = rng.random_range(1..=sched.n_steps);
                let (a, s) = (sched.alpha(i), sched.sigma(i));
                let clean = windows.data.row(w);
                for c in 0..width {
                    let e: f64 = rng.sample(StandardNormal);
                    x[[r, c]] = a * clean[c] + s * e;
                }
                y[[r, 0]] = targets[w];
                steps.push(i);
            }
            sum += trainer.step(x.view(), Some(&steps), y.view(), None)?;
        }
        let mean = sum / per_epoch as f64;
        if !mean.is_finite() {
            return Err(RadError::Diverged { epoch });
        }
        losses.push(mean);
    }
    Ok(TrainedGuide {
        guide: ReturnGuide {
            net: trainer.net,
            horizon: h,
            ds,
            da,
            return_min: lo,
            return_max: hi,
        },
        optimizer: trainer.opt,
        losses,
    })
}

/// Mean absolute per-step displacement of the state block along a plan.
pub fn mean_state_step(plan: &PlanMatrix) -> f64 {
    let diffs = plan
        .data
        .slice(ndarray::s![.., ..plan.ds])
        .axis_windows(Axis(0), 2)
        .into_iter()
        .map(|w| {
            let d = &w.row(1) - &w.row(0);
            d.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .collect::<Vec<_>>();
    diffs.iter().sum::<f64>() / diffs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::Trajectory;

    fn tiny_config(h: usize) -> DiffusionTrainConfig {
        DiffusionTrainConfig {
            horizon: h,
            n_steps: 10,
            hidden: vec![32, 32],
            step_embed_dim: 8,
            batch: 16,
            epochs: 1,
            steps_per_epoch: Some(5),
            lr: 1e-3,
            ..Default::default()
        }
    }

    fn ramp_dataset(n: usize, len: usize) -> OfflineDataset {
        let trajs = (0..n)
            .map(|k| {
                let off = k as f64 * 0.1;
                Trajectory::from_columns(
                    k as u64,
                    (0..len).map(|t| vec![off + 0.2 * t as f64, 1.0 - off]).collect(),
                    (0..len).map(|t| vec![0.2 + 0.01 * t as f64]).collect(),
                    (0..len).map(|t| if t == len - 1 { 1.0 } else { -0.01 }).collect(),
                )
                .unwrap()
            })
            .collect();
        OfflineDataset::new(trajs, 2, 1, 0.99).unwrap()
    }

    #[test]
    fn schedule_invariants() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for n in [1, 2, 5, 20, 100] {
                let s = make_schedule(n, kind).unwrap();
                assert_eq!(s.betas.len(), n);
                for i in 1..=n {
                    assert!(s.beta(i) > 0.0 && s.beta(i) < 1.0);
                    assert!((s.alpha(i).powi(2) + s.sigma(i).powi(2) - 1.0).abs() <= 1e-12);
                    if i > 1 {
                        assert!(s.beta(i) > s.beta(i - 1), "{kind:?} n={n} i={i}");
                        assert!(s.alpha(i) < s.alpha(i - 1));
                    }
                }
            }
        }
        let s = make_schedule(1, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - s.beta(1));
        let s = make_schedule(DEFAULT_DIFFUSION_STEPS, ScheduleKind::Cosine).unwrap();
        assert_eq!(s.n_steps, 20);
        assert!(s.alpha(20) < 0.05);
        assert!(make_schedule(0, ScheduleKind::Cosine).is_err());
    }

    #[test]
    fn forward_noise_limits() {
        let s = make_schedule(20, ScheduleKind::Cosine).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tau0 = PlanMatrix::new(standard_normal_matrix(&mut rng, 4, 3), 2).unwrap();
        let eps = standard_normal_matrix(&mut rng, 4, 3);
        assert_eq!(forward_noise(&tau0, 0, &eps, &s).unwrap(), tau0);
        let zero = Array2::zeros((4, 3));
        let out = forward_noise(&tau0, 7, &zero, &s).unwrap();
        for (o, t) in out.data().iter().zip(tau0.data().iter()) {
            assert_eq!(*o, s.alpha(7) * t);
        }
        assert!(forward_noise(&tau0, 21, &eps, &s).is_err());
    }

    #[test]
    fn anchors_touch_only_state_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tau = PlanMatrix::new(standard_normal_matrix(&mut rng, 8, 5), 3).unwrap();
        assert_eq!(apply_anchors(&tau, &AnchorSet::new()).unwrap(), tau);

        let anchors = AnchorSet::start_and_target(vec![9.0, 8.0, 7.0], vec![1.0, 2.0, 3.0], 5).unwrap();
        let out = apply_anchors(&tau, &anchors).unwrap();
        assert_eq!(out.state(0).to_vec(), vec![9.0, 8.0, 7.0]);
        assert_eq!(out.state(5).to_vec(), vec![1.0, 2.0, 3.0]);
        let changed = out
            .data()
            .iter()
            .zip(tau.data().iter())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, 2 * 3);
        assert_eq!(out.action(0), tau.action(0));

        let mut bad = AnchorSet::new();
        bad.push(8, vec![0.0; 3]).unwrap();
        assert!(matches!(apply_anchors(&tau, &bad), Err(RadError::Index { .. })));
        assert!(bad.push(8, vec![1.0; 3]).is_err());
    }

    #[test]
    fn posterior_mean_matches_noise_form_without_clipping() {
        let s = make_schedule(20, ScheduleKind::Cosine).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 1..=20 {
            let tau = standard_normal_matrix(&mut rng, 4, 3);
            let eps = standard_normal_matrix(&mut rng, 4, 3);
            let via_x0 = posterior_mean(&tau, &eps, i, &s, false);
            let beta = s.beta(i);
            let direct = (&tau - &(&eps * (beta / s.sigma(i)))) / (1.0 - beta).sqrt();
            for (a, b) in via_x0.iter().zip(direct.iter()) {
                assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "step {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn windows_skip_and_pad() {
        let data = ramp_dataset(2, 5);
        assert!(build_windows(&data, 8, ShortTrajectoryPolicy::Skip).is_err());
        let w = build_windows(&data, 8, ShortTrajectoryPolicy::PadLastState).unwrap();
        assert_eq!(w.origins.len(), 2 * 4);
        // last row of the first window repeats the final state
        let row = w.data.row(0);
        let last_state = data.normalize_state(&data.trajectories()[0].transitions[4].state).unwrap();
        assert_eq!(row[7 * 3], last_state[0]);
        let w = build_windows(&data, 3, ShortTrajectoryPolicy::Skip).unwrap();
        assert_eq!(w.origins.len(), 2 * 3);
    }

    #[test]
    fn loss_ignores_noise_at_anchored_entries() {
        let data = ramp_dataset(3, 12);
        let out = train_denoiser(&data, &tiny_config(8)).unwrap();
        let w = build_windows(&data, 8, ShortTrajectoryPolicy::Skip).unwrap();
        let tau0 = PlanMatrix::from_flat(8, 2, 1, w.data.row(2).to_vec()).unwrap();
        let anchors = AnchorSet::start_and_target(tau0.state(0).to_vec(), tau0.state(3).to_vec(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let eps = standard_normal_matrix(&mut rng, 8, 3);
        let mut perturbed = eps.clone();
        for row in [0, 3] {
            for c in 0..2 {
                perturbed[[row, c]] += 5.0 * rng.random::<f64>() - 2.5;
            }
        }
        let a = denoising_loss(&out.model, &tau0, &anchors, 6, &eps).unwrap();
        let b = denoising_loss(&out.model, &tau0, &anchors, 6, &perturbed).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn untrained_loss_is_unit_scale() {
        let data = ramp_dataset(3, 40);
        let cfg = DiffusionTrainConfig {
            epochs: 1,
            steps_per_epoch: Some(1),
            lr: 1e-12,
            ..tiny_config(8)
        };
        let out = train_denoiser(&data, &cfg).unwrap();
        assert!(out.losses[0] > 0.5 && out.losses[0] < 3.0, "{:?}", out.losses);
    }

    #[test]
    fn denoise_step_anchors_and_rho_zero() {
        let data = ramp_dataset(3, 12);
        let model = train_denoiser(&data, &tiny_config(8)).unwrap().model;
        let guide = train_return_guide(&data, &tiny_config(8)).unwrap().guide;
        let anchors = AnchorSet::start_and_target(vec![0.1, -0.2], vec![0.5, 0.4], 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tau = PlanMatrix::new(standard_normal_matrix(&mut rng, 8, 3), 2).unwrap();
        let tau = apply_anchors(&tau, &anchors).unwrap();

        let mut cfg = SamplerConfig::default();
        cfg.guidance.rho = 0.0;
        let unguided = denoise_step(&tau, 1, &model, None, &cfg, &anchors, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let guided0 = denoise_step(&tau, 1, &model, Some(&guide), &cfg, &anchors, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(unguided, guided0);
        // step 1 is noise free, so the output is exactly the mean
        let eps = model.predict_noise(&tau, 1).unwrap();
        let mut mean = posterior_mean(tau.data(), &eps, 1, &model.schedule, true);
        for a in anchors.anchors() {
            for (c, v) in a.state.iter().enumerate() {
                mean[[a.position, c]] = *v;
            }
        }
        assert_eq!(unguided.data(), &mean);
        assert_eq!(unguided.state(0).to_vec(), vec![0.1, -0.2]);
        assert_eq!(unguided.state(4).to_vec(), vec![0.5, 0.4]);

        cfg.guidance.rho = 0.5;
        let guided = denoise_step(&tau, 5, &model, Some(&guide), &cfg, &anchors, &mut rng).unwrap();
        assert_eq!(guided.state(0).to_vec(), vec![0.1, -0.2]);
        assert_eq!(guided.state(4).to_vec(), vec![0.5, 0.4]);
        assert!(denoise_step(&tau, 0, &model, None, &cfg, &anchors, &mut rng).is_err());
    }

    #[test]
    fn guidance_matches_finite_differences() {
        let data = ramp_dataset(3, 12);
        let guide = train_return_guide(&data, &tiny_config(8)).unwrap().guide;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let tau = PlanMatrix::new(standard_normal_matrix(&mut rng, 8, 3), 2).unwrap();
            let i = rng.random_range(1..=10);
            let g = guide.gradient(&tau, i).unwrap();
            let h = 1e-5;
            for idx in 0..24 {
                let (r, c) = (idx / 3, idx % 3);
                let mut p = tau.clone();
                p.data_mut()[[r, c]] += h;
                let mut m = tau.clone();
                m.data_mut()[[r, c]] -= h;
                let fd = (guide.predict(&p, i).unwrap() - guide.predict(&m, i).unwrap()) / (2.0 * h);
                let scale = fd.abs().max(g[[r, c]].abs());
                assert!(scale < 1e-7 || (fd - g[[r, c]]).abs() / scale <= 1e-4);
            }
        }
    }

    #[test]
    fn sample_plan_is_seeded_and_anchored() {
        let data = ramp_dataset(3, 12);
        let model = train_denoiser(&data, &tiny_config(8)).unwrap().model;
        let guide = train_return_guide(&data, &tiny_config(8)).unwrap().guide;
        let cfg = SamplerConfig::default();
        let s_t = [0.3, -0.1];
        let s_g = [0.8, 0.2];
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_anchored_plan(&model, Some(&guide), &cfg, &s_t, &s_g, 6, &mut rng).unwrap()
        };
        let a = run(9);
        assert_eq!(a, run(9));
        assert_ne!(a, run(10));
        assert_eq!(a.state(0).to_vec(), s_t.to_vec());
        assert_eq!(a.state(6).to_vec(), s_g.to_vec());

        let anchors = AnchorSet::start_and_target(s_t.to_vec(), s_g.to_vec(), 6).unwrap();
        let mut seen = Vec::new();
        sample_plan_traced(&model, Some(&guide), &cfg, &anchors, &mut ChaCha8Rng::seed_from_u64(9), |i, p| {
            assert_eq!(p.state(0).to_vec(), s_t.to_vec());
            assert_eq!(p.state(6).to_vec(), s_g.to_vec());
            seen.push(i);
        })
        .unwrap();
        assert_eq!(seen, (0..=10).rev().collect::<Vec<_>>());
        assert!(sample_anchored_plan(&model, None, &cfg, &s_t, &s_g, 8, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn guide_return_scaling() {
        let data = ramp_dataset(4, 12);
        let out = train_return_guide(&data, &tiny_config(8)).unwrap();
        let w = build_windows(&data, 8, ShortTrajectoryPolicy::Skip).unwrap();
        let lo = w.returns.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = w.returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.guide.scale_return(lo), 0.0);
        assert_eq!(out.guide.scale_return(hi), 1.0);
    }

    #[test]
    fn forward_noise_moments() {
        let s = make_schedule(20, ScheduleKind::Cosine).unwrap();
        let i = 5;
        let tau0 = PlanMatrix::from_flat(2, 1, 1, vec![0.8, -0.6, 1.0, -0.9]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut sum = Array2::<f64>::zeros((2, 2));
        let mut sq = Array2::<f64>::zeros((2, 2));
        for _ in 0..n {
            let eps = standard_normal_matrix(&mut rng, 2, 2);
            let x = forward_noise(&tau0, i, &eps, &s).unwrap();
            sum += x.data();
            sq += &x.data().mapv(|v| v * v);
        }
        for (idx, t) in tau0.data().indexed_iter() {
            let mean = sum[idx] / n as f64;
            let var = sq[idx] / n as f64 - mean * mean;
            let want_mean = s.alpha(i) * t;
            let want_var = s.sigma(i).powi(2);
            assert!(((mean - want_mean) / want_mean).abs() <= 0.01, "{mean} vs {want_mean}");
            assert!(((var - want_var) / want_var).abs() <= 0.01, "{var} vs {want_var}");
        }
    }

    #[test]
    fn overfits_single_trajectory() {
        let data = ramp_dataset(1, 8);
        let cfg = DiffusionTrainConfig {
            epochs: 20,
            steps_per_epoch: Some(100),
            hidden: vec![64, 64],
            ..tiny_config(8)
        };
        let out = train_denoiser(&data, &cfg).unwrap();
        let first = out.losses[0];
        let last = *out.losses.last().unwrap();
        assert!(last < 0.5 * first, "{:?}", out.losses);
    }

    #[test]
    fn guide_learns_constant_return() {
        let trajs = (0..3)
            .map(|k| {
                Trajectory::from_columns(
                    k,
                    (0..10).map(|t| vec![t as f64 * 0.1, k as f64]).collect(),
                    (0..10).map(|_| vec![0.1]).collect(),
                    vec![0.0; 10],
                )
                .unwrap()
            })
            .collect();
        let data = OfflineDataset::new(trajs, 2, 1, 0.99).unwrap();
        let cfg = DiffusionTrainConfig {
            epochs: 10,
            steps_per_epoch: Some(50),
            ..tiny_config(6)
        };
        let guide = train_return_guide(&data, &cfg).unwrap().guide;
        let w = build_windows(&data, 6, ShortTrajectoryPolicy::Skip).unwrap();
        for r in 0..w.data.nrows() {
            let tau = PlanMatrix::from_flat(6, 2, 1, w.data.row(r).to_vec()).unwrap();
            assert!((guide.predict(&tau, 1).unwrap() - 0.5).abs() <= 0.05);
            assert!(guide.predict_raw(&tau, 1).unwrap().abs() <= 0.05);
        }
    }

    #[test]
    fn guide_separates_two_return_clusters() {
        let trajs = (0..6)
            .map(|k| {
                let good = k % 2 == 0;
                let y = if good { 1.0 } else { -1.0 };
                Trajectory::from_columns(
                    k,
                    (0..12).map(|t| vec![t as f64 * 0.1, y]).collect(),
                    (0..12).map(|_| vec![0.1]).collect(),
                    vec![if good { 1.0 } else { -1.0 }; 12],
                )
                .unwrap()
            })
            .collect();
        let data = OfflineDataset::new(trajs, 2, 1, 0.99).unwrap();
        let cfg = DiffusionTrainConfig {
            epochs: 20,
            steps_per_epoch: Some(50),
            ..tiny_config(6)
        };
        let out = train_return_guide(&data, &cfg).unwrap();
        assert!(*out.losses.last().unwrap() < 0.5 * out.losses[0], "{:?}", out.losses);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn schedule_is_variance_preserving(n in 1usize..200, cosine in any::<bool>()) {
                let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::Linear };
                let s = make_schedule(n, kind).unwrap();
                for i in 1..=n {
                    prop_assert!((s.alpha(i).powi(2) + s.sigma(i).powi(2) - 1.0).abs() <= 1e-12);
                    prop_assert!(s.beta(i) > 0.0 && s.beta(i) < 1.0);
                }
            }

            #[test]
            fn anchors_survive_every_step(seed in 0u64..1000, pos in 1usize..6) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let s_t: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
                let s_g: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
                let anchors = AnchorSet::start_and_target(s_t.clone(), s_g.clone(), pos).unwrap();
                let spec = NetSpec::new(18, &[8], 18, Activation::Mish, 4);
                let model = DiffusionModel {
                    net: Mlp::new(spec, seed).unwrap(),
                    schedule: make_schedule(5, ScheduleKind::Cosine).unwrap(),
                    horizon: 6,
                    ds: 2,
                    da: 1,
                };
                let mut ok = true;
                sample_plan_traced(&model, None, &SamplerConfig::default(), &anchors, &mut rng, |_, p| {
                    ok &= p.state(0).to_vec() == s_t && p.state(pos).to_vec() == s_g;
                })
                .unwrap();
                prop_assert!(ok);
            }

            #[test]
            fn masked_loss_ignores_anchored_noise(seed in 0u64..500, bump in -5.0f64..5.0) {
                let spec = NetSpec::new(12, &[8], 12, Activation::Tanh, 4);
                let model = DiffusionModel {
                    net: Mlp::new(spec, seed).unwrap(),
                    schedule: make_schedule(5, ScheduleKind::Cosine).unwrap(),
                    horizon: 4,
                    ds: 2,
                    da: 1,
                };
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let tau0 = PlanMatrix::new(standard_normal_matrix(&mut rng, 4, 3), 2).unwrap();
                let anchors = AnchorSet::start_and_target(tau0.state(0).to_vec(), tau0.state(2).to_vec(), 2).unwrap();
                let eps = standard_normal_matrix(&mut rng, 4, 3);
                let mut bumped = eps.clone();
                bumped[[2, 1]] += bump;
                prop_assert_eq!(
                    denoising_loss(&model, &tau0, &anchors, 3, &eps).unwrap(),
                    denoising_loss(&model, &tau0, &anchors, 3, &bumped).unwrap()
                );
            }
        }
    }
}
