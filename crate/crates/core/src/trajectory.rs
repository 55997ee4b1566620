//! States, actions, trajectories and the offline dataset they live in.
//!
//! Everything downstream (retrieval database, step estimator, diffusion
//! training) reads from an [`OfflineDataset`], which is immutable once
//! constructed. Returns are computed on demand from the raw rewards.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{RadError, Result};

/// Default discount factor.
pub const DEFAULT_GAMMA: f64 = 0.99;

/// Dimensions whose observed range is at most this wide are treated as
/// constant and normalize to 0.
pub const CONSTANT_DIM_EPS: f64 = 1e-12;

macro_rules! real_vector {
    ($name:ident) => {
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub Vec<f64>);

        impl $name {
            pub fn new(values: Vec<f64>) -> Self {
                Self(values)
            }

            pub fn zeros(dim: usize) -> Self {
                Self(vec![0.0; dim])
            }

            pub fn dim(&self) -> usize {
                self.0.len()
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|v| v.is_finite())
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }
        }

        impl Deref for $name {
            type Target = [f64];

            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(values: Vec<f64>) -> Self {
                Self(values)
            }
        }

        impl From<&[f64]> for $name {
            fn from(values: &[f64]) -> Self {
                Self(values.to_vec())
            }
        }
    };
}

real_vector!(StateVec);
real_vector!(ActionVec);

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: StateVec,
    pub action: ActionVec,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: u64,
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn new(id: u64, transitions: Vec<Transition>) -> Self {
        Self { id, transitions }
    }

    /// Builds a trajectory from parallel state/action/reward columns.
    pub fn from_columns(
        id: u64,
        states: Vec<Vec<f64>>,
        actions: Vec<Vec<f64>>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        if states.len() != actions.len() || states.len() != rewards.len() {
            return Err(RadError::Schema(format!(
                "trajectory {id}: {} states, {} actions, {} rewards",
                states.len(),
                actions.len(),
                rewards.len()
            )));
        }
        let transitions = states
            .into_iter()
            .zip(actions)
            .zip(rewards)
            .map(|((s, a), r)| Transition {
                state: StateVec(s),
                action: ActionVec(a),
                reward: r,
            })
            .collect();
        Ok(Self { id, transitions })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn state(&self, t: usize) -> &StateVec {
        &self.transitions[t].state
    }

    pub fn action(&self, t: usize) -> &ActionVec {
        &self.transitions[t].action
    }

    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.transitions.iter().map(|tr| tr.reward)
    }

    /// Time-shifted suffix returns for every timestep, by backward recursion.
    pub fn suffix_returns(&self, gamma: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        let mut acc = 0.0;
        for (t, tr) in self.transitions.iter().enumerate().rev() {
            acc = tr.reward + gamma * acc;
            out[t] = acc;
        }
        out
    }
}

/// How the discount exponent is counted inside a suffix return.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReturnConvention {
    /// `sum_j gamma^(j - t) r_j`: comparable across timesteps.
    #[default]
    TimeShifted,
    /// `sum_j gamma^j r_j`: exponent counted from the trajectory start.
    Absolute,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(RadError::InvalidArgument(format!(
            "gamma must lie in (0, 1), got {gamma}"
        )))
    }
}

/// Discounted return from timestep `t`, optionally truncated to `horizon` steps.
pub fn discounted_suffix_return(
    traj: &Trajectory,
    t: usize,
    gamma: f64,
    horizon: Option<usize>,
) -> Result<f64> {
    suffix_return_with(traj, t, gamma, horizon, ReturnConvention::TimeShifted)
}

pub fn suffix_return_with(
    traj: &Trajectory,
    t: usize,
    gamma: f64,
    horizon: Option<usize>,
    convention: ReturnConvention,
) -> Result<f64> {
    if t >= traj.len() {
        return Err(RadError::Index {
            index: t,
            len: traj.len(),
        });
    }
    check_gamma(gamma)?;
    let end = match horizon {
        Some(0) => {
            return Err(RadError::InvalidArgument(
                "return horizon must be at least 1".into(),
            ))
        }
        Some(h) => traj.len().min(t.saturating_add(h)),
        None => traj.len(),
    };
    let mut discount = match convention {
        ReturnConvention::TimeShifted => 1.0,
        ReturnConvention::Absolute => gamma.powi(t as i32),
    };
    let mut total = 0.0;
    for tr in &traj.transitions[t..end] {
        total += discount * tr.reward;
        discount *= gamma;
    }
    Ok(total)
}

/// Return of the full trajectory, `R(tau) = sum_t gamma^t r_t`.
pub fn trajectory_return(traj: &Trajectory, gamma: f64) -> Result<f64> {
    discounted_suffix_return(traj, 0, gamma, None)
}

/// Per-dimension min/max bounds with an affine map onto `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormStats {
    pub fn from_rows<'a>(dim: usize, rows: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        for row in rows {
            for (d, &v) in row.iter().enumerate() {
                min[d] = min[d].min(v);
                max[d] = max[d].max(v);
            }
        }
        Self { min, max }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn is_constant(&self, d: usize) -> bool {
        self.max[d] - self.min[d] <= CONSTANT_DIM_EPS
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(RadError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn normalize(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(x.iter()
            .enumerate()
            .map(|(d, &v)| {
                if self.is_constant(d) {
                    0.0
                } else {
                    2.0 * (v - self.min[d]) / (self.max[d] - self.min[d]) - 1.0
                }
            })
            .collect())
    }

    /// Inverse of [`normalize`](Self::normalize); constant dims map back to their value.
    pub fn denormalize(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(x.iter()
            .enumerate()
            .map(|(d, &v)| {
                if self.is_constant(d) {
                    self.min[d]
                } else {
                    (v + 1.0) * 0.5 * (self.max[d] - self.min[d]) + self.min[d]
                }
            })
            .collect())
    }
}

/// Normalization statistics for the state and action spaces of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetNorm {
    pub states: NormStats,
    pub actions: NormStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    trajectories: Vec<Trajectory>,
    ds: usize,
    da: usize,
    gamma: f64,
    norm: DatasetNorm,
}

impl OfflineDataset {
    pub fn new(trajectories: Vec<Trajectory>, ds: usize, da: usize, gamma: f64) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(RadError::Schema("dataset has no trajectories".into()));
        }
        if ds == 0 || da == 0 {
            return Err(RadError::Schema("state and action dims must be positive".into()));
        }
        check_gamma(gamma).map_err(|e| RadError::Schema(e.to_string()))?;
        let mut ids = HashSet::new();
        for traj in &trajectories {
            if !ids.insert(traj.id) {
                return Err(RadError::Schema(format!("duplicate trajectory id {}", traj.id)));
            }
            if traj.is_empty() {
                return Err(RadError::Schema(format!("trajectory {} is empty", traj.id)));
            }
            for (t, tr) in traj.transitions.iter().enumerate() {
                if tr.state.dim() != ds || tr.action.dim() != da {
                    return Err(RadError::Schema(format!(
                        "trajectory {} step {t}: expected ds={ds}, da={da}, got ds={}, da={}",
                        traj.id,
                        tr.state.dim(),
                        tr.action.dim()
                    )));
                }
                if !tr.state.is_finite() || !tr.action.is_finite() || !tr.reward.is_finite() {
                    return Err(RadError::Schema(format!(
                        "trajectory {} step {t}: non-finite value",
                        traj.id
                    )));
                }
            }
        }
        let states = NormStats::from_rows(
            ds,
            trajectories
                .iter()
                .flat_map(|tr| tr.transitions.iter().map(|x| &x.state[..])),
        );
        let actions = NormStats::from_rows(
            da,
            trajectories
                .iter()
                .flat_map(|tr| tr.transitions.iter().map(|x| &x.action[..])),
        );
        Ok(Self {
            trajectories,
            ds,
            da,
            gamma,
            norm: DatasetNorm { states, actions },
        })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn ds(&self) -> usize {
        self.ds
    }

    pub fn da(&self) -> usize {
        self.da
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn norm(&self) -> &DatasetNorm {
        &self.norm
    }

    pub fn num_states(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn trajectory_by_id(&self, id: u64) -> Option<&Trajectory> {
        self.trajectories.iter().find(|t| t.id == id)
    }

    pub fn normalize_state(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.norm.states.normalize(s)
    }

    pub fn denormalize_state(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.norm.states.denormalize(s)
    }

    pub fn normalize_action(&self, a: &[f64]) -> Result<Vec<f64>> {
        self.norm.actions.normalize(a)
    }

    pub fn denormalize_action(&self, a: &[f64]) -> Result<Vec<f64>> {
        self.norm.actions.denormalize(a)
    }

    /// JSON-lines serialization: a header line, then one trajectory per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{{\"ds\":{},\"da\":{},\"gamma\":{}}}",
            self.ds,
            self.da,
            fmt_f64(self.gamma)
        );
        for traj in &self.trajectories {
            out.push_str("{\"id\":");
            let _ = write!(out, "{}", traj.id);
            out.push_str(",\"states\":");
            write_rows(&mut out, traj.transitions.iter().map(|t| &t.state[..]));
            out.push_str(",\"actions\":");
            write_rows(&mut out, traj.transitions.iter().map(|t| &t.action[..]));
            out.push_str(",\"rewards\":");
            write_row(&mut out, traj.rewards());
            out.push_str("}\n");
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        Self::parse_lines(text.lines().map(|l| Ok(l.to_string())))
    }

    fn parse_lines(lines: impl Iterator<Item = Result<String>>) -> Result<Self> {
        let mut header: Option<DatasetHeader> = None;
        let mut trajectories = Vec::new();
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let Some(h) = &header else {
                let parsed: DatasetHeader = serde_json::from_str(&line).map_err(|e| {
                    RadError::Parse {
                        line: line_no,
                        msg: format!("bad header: {e}"),
                    }
                })?;
                header = Some(parsed);
                continue;
            };
            let rec: TrajectoryRecord =
                serde_json::from_str(&line).map_err(|e| RadError::Parse {
                    line: line_no,
                    msg: e.to_string(),
                })?;
            for (t, s) in rec.states.iter().enumerate() {
                if s.len() != h.ds {
                    return Err(RadError::Schema(format!(
                        "line {line_no}: state {t} has dim {}, header says {}",
                        s.len(),
                        h.ds
                    )));
                }
            }
            for (t, a) in rec.actions.iter().enumerate() {
                if a.len() != h.da {
                    return Err(RadError::Schema(format!(
                        "line {line_no}: action {t} has dim {}, header says {}",
                        a.len(),
                        h.da
                    )));
                }
            }
            let traj = Trajectory::from_columns(rec.id, rec.states, rec.actions, rec.rewards)
                .map_err(|e| RadError::Schema(format!("line {line_no}: {e}")))?;
            trajectories.push(traj);
        }
        let header = header.ok_or_else(|| RadError::Schema("missing header line".into()))?;
        Self::new(trajectories, header.ds, header.da, header.gamma)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| RadError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| RadError::io(path, e))?;
        let lines = BufReader::new(file)
            .lines()
            .map(|l| l.map_err(|e| RadError::io(path, e)));
        Self::parse_lines(lines)
    }

    /// SHA-256 of the canonical JSON-lines serialization, hex encoded.
    pub fn content_hash(&self) -> String {
        sha256_hex(self.to_jsonl().as_bytes())
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<OfflineDataset> {
    OfflineDataset::load(path)
}

pub fn save_dataset(dataset: &OfflineDataset, path: impl AsRef<Path>) -> Result<()> {
    dataset.save(path)
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(out, "{b:02x}");
    }
    out
}

#[derive(Deserialize)]
struct DatasetHeader {
    ds: usize,
    da: usize,
    gamma: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    id: u64,
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    rewards: Vec<f64>,
}

/// 17 significant digits, which round-trips every finite f64.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_row(out: &mut String, values: impl Iterator<Item = f64>) {
    out.push('[');
    for (i, v) in values.enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&fmt_f64(v));
    }
    out.push(']');
}

fn write_rows<'a>(out: &mut String, rows: impl Iterator<Item = &'a [f64]>) {
    out.push('[');
    for (i, row) in rows.enumerate() {
        if i > 0 {
            out.push(',');
        }
        write_row(out, row.iter().copied());
    }
    out.push(']');
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn traj_with_rewards(id: u64, rewards: &[f64]) -> Trajectory {
        let n = rewards.len();
        Trajectory::from_columns(
            id,
            (0..n).map(|t| vec![t as f64, 1.0]).collect(),
            (0..n).map(|_| vec![0.5]).collect(),
            rewards.to_vec(),
        )
        .unwrap()
    }

    fn loop_oracle(rewards: &[f64], t: usize, gamma: f64) -> f64 {
        let mut total = 0.0;
        for (j, r) in rewards.iter().enumerate().skip(t) {
            total += gamma.powi((j - t) as i32) * r;
        }
        total
    }

    #[test]
    fn suffix_return_examples() {
        let tr = traj_with_rewards(0, &[1.0, 1.0, 1.0]);
        let v = discounted_suffix_return(&tr, 0, 0.99, None).unwrap();
        assert!((v - 2.9701).abs() < 1e-12);

        let single = traj_with_rewards(1, &[5.0]);
        for gamma in [0.1, 0.5, 0.99] {
            assert_eq!(discounted_suffix_return(&single, 0, gamma, None).unwrap(), 5.0);
        }
    }

    #[test]
    fn suffix_return_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rewards: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
        let tr = traj_with_rewards(0, &rewards);
        let v = discounted_suffix_return(&tr, 7, 0.9, None).unwrap();
        assert!((v - loop_oracle(&rewards, 7, 0.9)).abs() < 1e-12);
    }

    #[test]
    fn suffix_return_horizon_truncates() {
        let tr = traj_with_rewards(0, &[1.0, 2.0, 3.0, 4.0]);
        let v = discounted_suffix_return(&tr, 1, 0.5, Some(2)).unwrap();
        assert!((v - (2.0 + 0.5 * 3.0)).abs() < 1e-15);
        // Horizon past the end just sums to the end.
        let v = discounted_suffix_return(&tr, 2, 0.5, Some(100)).unwrap();
        assert!((v - (3.0 + 0.5 * 4.0)).abs() < 1e-15);
    }

    #[test]
    fn suffix_return_errors() {
        let tr = traj_with_rewards(0, &[1.0, 2.0]);
        assert!(matches!(
            discounted_suffix_return(&tr, 2, 0.9, None),
            Err(RadError::Index { index: 2, len: 2 })
        ));
        assert!(discounted_suffix_return(&tr, 0, 1.0, None).is_err());
        assert!(discounted_suffix_return(&tr, 0, 0.9, Some(0)).is_err());
    }

    #[test]
    fn absolute_convention_scales_by_gamma_to_the_t() {
        let tr = traj_with_rewards(0, &[1.0, 2.0, 3.0, 4.0]);
        let shifted = discounted_suffix_return(&tr, 2, 0.9, None).unwrap();
        let abs = suffix_return_with(&tr, 2, 0.9, None, ReturnConvention::Absolute).unwrap();
        assert!((abs - 0.81 * shifted).abs() < 1e-12);
    }

    #[test]
    fn trajectory_return_examples() {
        assert_eq!(trajectory_return(&traj_with_rewards(0, &[0.0; 6]), 0.9).unwrap(), 0.0);
        let mut r = vec![0.0; 8];
        r[0] = 1.0;
        assert_eq!(trajectory_return(&traj_with_rewards(0, &r), 0.37).unwrap(), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rewards: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tr = traj_with_rewards(0, &rewards);
        assert_eq!(
            trajectory_return(&tr, 0.95).unwrap(),
            discounted_suffix_return(&tr, 0, 0.95, None).unwrap()
        );
    }

    proptest! {
        #[test]
        fn bellman_recursion_holds(
            rewards in prop::collection::vec(-10.0f64..10.0, 2..60),
            gamma in 0.01f64..0.999,
        ) {
            let tr = traj_with_rewards(0, &rewards);
            for t in 0..rewards.len() - 1 {
                let v = discounted_suffix_return(&tr, t, gamma, None).unwrap();
                let next = discounted_suffix_return(&tr, t + 1, gamma, None).unwrap();
                prop_assert!((v - (rewards[t] + gamma * next)).abs() <= 1e-10);
            }
        }

        #[test]
        fn return_is_monotone_in_each_reward(
            rewards in prop::collection::vec(-5.0f64..5.0, 1..30),
            idx in 0usize..30,
            bump in 1e-3f64..3.0,
            gamma in 0.5f64..0.999,
        ) {
            let idx = idx % rewards.len();
            let base = trajectory_return(&traj_with_rewards(0, &rewards), gamma).unwrap();
            let mut raised = rewards.clone();
            raised[idx] += bump;
            let after = trajectory_return(&traj_with_rewards(0, &raised), gamma).unwrap();
            prop_assert!(after > base);
        }

        #[test]
        fn normalization_round_trips(
            lo in prop::collection::vec(-50.0f64..0.0, 3),
            span in prop::collection::vec(0.1f64..40.0, 3),
            fracs in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 3), 1..20),
        ) {
            let hi: Vec<f64> = lo.iter().zip(&span).map(|(l, s)| l + s).collect();
            let stats = NormStats { min: lo.clone(), max: hi.clone() };
            for f in fracs {
                let x: Vec<f64> = (0..3).map(|d| lo[d] + f[d] * span[d]).collect();
                let n = stats.normalize(&x).unwrap();
                prop_assert!(n.iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
                let back = stats.denormalize(&n).unwrap();
                for d in 0..3 {
                    prop_assert!((back[d] - x[d]).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn normalization_examples() {
        let stats = NormStats {
            min: vec![-2.0, 0.0, 3.0],
            max: vec![2.0, 10.0, 3.0],
        };
        assert_eq!(stats.normalize(&[-2.0, 0.0, 3.0]).unwrap(), vec![-1.0, -1.0, 0.0]);
        assert_eq!(stats.normalize(&[0.0, 5.0, 3.0]).unwrap(), vec![0.0, 0.0, 0.0]);
        assert_eq!(stats.denormalize(&[0.3, 0.3, 0.3]).unwrap()[2], 3.0);
        assert!(matches!(
            stats.normalize(&[1.0]),
            Err(RadError::DimensionMismatch { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn thousand_random_vectors_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stats = NormStats {
            min: vec![-3.0, 0.5, 100.0, -1e3],
            max: vec![7.0, 0.75, 250.0, 1e3],
        };
        for _ in 0..1000 {
            let x: Vec<f64> = (0..4)
                .map(|d| rng.random_range(stats.min[d]..=stats.max[d]))
                .collect();
            let back = stats.denormalize(&stats.normalize(&x).unwrap()).unwrap();
            for d in 0..4 {
                assert!((back[d] - x[d]).abs() <= 1e-9);
            }
        }
    }

    fn small_dataset() -> OfflineDataset {
        let a = traj_with_rewards(3, &[0.1, -0.2, 0.3]);
        let b = traj_with_rewards(9, &[1.0 / 3.0, 2.0e-17]);
        OfflineDataset::new(vec![a, b], 2, 1, 0.99).unwrap()
    }

    #[test]
    fn dataset_stats_cover_all_values() {
        let ds = small_dataset();
        let st = &ds.norm().states;
        for tr in ds.trajectories() {
            for x in &tr.transitions {
                for d in 0..2 {
                    assert!(st.min[d] <= x.state[d] && x.state[d] <= st.max[d]);
                }
            }
        }
        // state dim 1 is constant (always 1.0) and maps to 0
        assert!(st.is_constant(1));
        assert_eq!(ds.normalize_state(&[1.0, 1.0]).unwrap()[1], 0.0);
    }

    #[test]
    fn jsonl_round_trip_is_lossless() {
        let ds = small_dataset();
        let text = ds.to_jsonl();
        assert!(text.starts_with("{\"ds\":2,\"da\":1,\"gamma\":"));
        let back = OfflineDataset::from_jsonl(&text).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.content_hash(), ds.content_hash());
    }

    #[test]
    fn empty_dataset_is_schema_error() {
        assert!(matches!(
            OfflineDataset::new(vec![], 2, 1, 0.99),
            Err(RadError::Schema(_))
        ));
        let text = "{\"ds\":2,\"da\":1,\"gamma\":0.99}\n";
        assert!(matches!(OfflineDataset::from_jsonl(text), Err(RadError::Schema(_))));
    }

    #[test]
    fn mismatched_columns_is_schema_error() {
        let text = "{\"ds\":1,\"da\":1,\"gamma\":0.99}\n\
                    {\"id\":0,\"states\":[[0.0],[1.0]],\"actions\":[[0.0]],\"rewards\":[0.0,0.0]}\n";
        assert!(matches!(OfflineDataset::from_jsonl(text), Err(RadError::Schema(_))));
        let text = "{\"ds\":2,\"da\":1,\"gamma\":0.99}\n\
                    {\"id\":0,\"states\":[[0.0]],\"actions\":[[0.0]],\"rewards\":[0.0]}\n";
        assert!(matches!(OfflineDataset::from_jsonl(text), Err(RadError::Schema(_))));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"ds\":1,\"da\":1,\"gamma\":0.99}\n\
                    {\"id\":0,\"states\":[[0.0]],\"actions\":[[0.0]],\"rewards\":[0.0]}\n\
                    {\"id\":1,\"states\":[[0.0]],\n";
        match OfflineDataset::from_jsonl(text) {
            Err(RadError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let a = traj_with_rewards(1, &[0.0]);
        let b = traj_with_rewards(1, &[0.0]);
        assert!(OfflineDataset::new(vec![a, b], 2, 1, 0.9).is_err());
    }
}
