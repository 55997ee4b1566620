//! Step estimation: a small MLP predicting how many steps separate the
//! current state from a target state.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RadError, Result};
use crate::nn::{Activation, Mlp, NetSpec, OptimizerState, Trainer};
use crate::trajectory::{NormStats, OfflineDataset, StateVec};

#[derive(Clone, Debug, PartialEq)]
pub struct StepTrainingPair {
    pub s_t: StateVec,
    pub s_target: StateVec,
    pub offset: usize,
    pub traj_id: u64,
    pub t: usize,
}

/// Draws `(s_t, s_{t+i}, i)` pairs: `(trajectory, t)` uniform over all
/// positions with a successor, then `i ~ U(1, min(H - 1, T - 1 - t))`.
pub fn sample_step_pairs(
    dataset: &OfflineDataset,
    horizon: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<StepTrainingPair>> {
    if horizon < 2 {
        return Err(RadError::InvalidArgument("horizon must be at least 2".into()));
    }
    // cumulative count of valid start positions per trajectory
    let mut cumulative = Vec::with_capacity(dataset.trajectories().len());
    let mut total = 0usize;
    for traj in dataset.trajectories() {
        total += traj.len().saturating_sub(1);
        cumulative.push(total);
    }
    if total == 0 {
        return Err(RadError::Dataset(
            "step pairs need a trajectory of length at least 2".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let u = rng.random_range(0..total);
        let ti = cumulative.partition_point(|&c| c <= u);
        let before = if ti == 0 { 0 } else { cumulative[ti - 1] };
        let traj = &dataset.trajectories()[ti];
        let t = u - before;
        let max_offset = (horizon - 1).min(traj.len() - 1 - t);
        let offset = rng.random_range(1..=max_offset);
        pairs.push(StepTrainingPair {
            s_t: traj.state(t).clone(),
            s_target: traj.state(t + offset).clone(),
            offset,
            traj_id: traj.id,
            t,
        });
    }
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrainConfig {
    pub horizon: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for StepTrainConfig {
    fn default() -> Self {
        Self {
            horizon: 32,
            epochs: 50,
            batch: 64,
            lr: 1e-3,
            grad_clip: 10.0,
            hidden: vec![128, 128, 128],
            activation: Activation::Relu,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepEstimator {
    pub net: Mlp,
    pub horizon: usize,
    /// When set, both states are normalized before entering the network.
    pub input_norm: Option<NormStats>,
}

/// Rounds half away from zero, then clamps into `[1, H - 1]`. Non-finite
/// outputs map to 1.
pub fn round_and_clamp(raw: f64, horizon: usize) -> usize {
    let hi = horizon.saturating_sub(1).max(1);
    if !raw.is_finite() {
        return if raw == f64::INFINITY { hi } else { 1 };
    }
    let r = raw.round();
    if r < 1.0 {
        1
    } else if r > hi as f64 {
        hi
    } else {
        r as usize
    }
}

impl StepEstimator {
    pub fn new(ds: usize, config: &StepTrainConfig, input_norm: Option<NormStats>) -> Result<Self> {
        let spec = NetSpec::new(2 * ds, &config.hidden, 1, config.activation, 0);
        Ok(Self {
            net: Mlp::new(spec, config.seed)?,
            horizon: config.horizon,
            input_norm,
        })
    }

    fn encode(&self, s_t: &[f64], s_g: &[f64]) -> Result<Vec<f64>> {
        let ds = self.net.spec.input_dim / 2;
        if s_t.len() != ds || s_g.len() != ds {
            return Err(RadError::DimensionMismatch {
                expected: ds,
                got: if s_t.len() != ds { s_t.len() } else { s_g.len() },
            });
        }
        let mut x = Vec::with_capacity(2 * ds);
        match &self.input_norm {
            Some(n) => {
                x.extend(n.normalize(s_t)?);
                x.extend(n.normalize(s_g)?);
            }
            None => {
                x.extend_from_slice(s_t);
                x.extend_from_slice(s_g);
            }
        }
        Ok(x)
    }

    /// Unrounded network output.
    pub fn raw_output(&self, s_t: &[f64], s_g: &[f64]) -> Result<f64> {
        Ok(self.net.forward(&self.encode(s_t, s_g)?, None)?[0])
    }

    pub fn estimate_steps(&self, s_t: &[f64], s_g: &[f64]) -> Result<usize> {
        Ok(round_and_clamp(self.raw_output(s_t, s_g)?, self.horizon))
    }
}

pub struct TrainedStepEstimator {
    pub estimator: StepEstimator,
    pub optimizer: OptimizerState,
    pub losses: Vec<f64>,
}

/// Minimizes `E[(f(s_t, s_g) - i)^2]` with Adam; one loss entry per epoch.
pub fn train_step_estimator(
    pairs: &[StepTrainingPair],
    config: &StepTrainConfig,
    input_norm: Option<NormStats>,
) -> Result<TrainedStepEstimator> {
    let first = pairs
        .first()
        .ok_or_else(|| RadError::Dataset("no step training pairs".into()))?;
    let ds = first.s_t.dim();
    if config.batch == 0 {
        return Err(RadError::Config("batch size must be positive".into()));
    }
    let estimator = StepEstimator::new(ds, config, input_norm)?;
    let inputs = pairs
        .iter()
        .map(|p| estimator.encode(&p.s_t, &p.s_target))
        .collect::<Result<Vec<_>>>()?;
    let horizon = estimator.horizon;
    let input_norm = estimator.input_norm.clone();
    let mut trainer = Trainer::new(estimator.net, config.lr, config.grad_clip);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_57E9);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch) {
            let x = Array2::from_shape_fn((chunk.len(), 2 * ds), |(r, c)| inputs[chunk[r]][c]);
            let y = Array2::from_shape_fn((chunk.len(), 1), |(r, _)| pairs[chunk[r]].offset as f64);
            let loss = trainer.step(x.view(), None, y.view(), None)?;
            if !loss.is_finite() {
                return Err(RadError::Diverged { epoch });
            }
            sum += loss;
            batches += 1;
        }
        losses.push(sum / batches as f64);
    }
    Ok(TrainedStepEstimator {
        estimator: StepEstimator {
            net: trainer.net,
            horizon,
            input_norm,
        },
        optimizer: trainer.opt,
        losses,
    })
}
