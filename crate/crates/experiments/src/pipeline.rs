use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rad_core::checkpoint::{config_hash, Checkpoint};
use rad_core::diffusion::{
    make_schedule, train_denoiser_observed, train_return_guide, DiffusionModel, ReturnGuide,
    ScheduleKind,
};
use rad_core::envs::{Env, Nav2d};
use rad_core::planner::{run_episode, Ablation, EpisodeRecord, Planner, PlannerConfig, PlannerModels};
use rad_core::retrieval::StateDatabase;
use rad_core::step::{sample_step_pairs, train_step_estimator, StepEstimator};
use rad_core::trajectory::{load_dataset, save_dataset, OfflineDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::{ExperimentError, Result, Stage, StageContext};
use crate::metrics::{
    aggregate_row, read_csv, seed_row, write_csv, write_jsonl, write_metrics, EpisodeSummary,
    MetricsRow, RowContext, ScoreRef,
};

/// Seed of evaluation episode `e` under run seed `seed`; shared by every
/// variant so comparisons see the same start states.
pub fn episode_seed(seed: u64, e: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(e as u64)
}

/// Hash of the evaluation seed list, logged per variant for auditing.
pub fn eval_seed_hash(seeds: &[u64], episodes: usize) -> Result<String> {
    let all: Vec<u64> = seeds
        .iter()
        .flat_map(|&s| (0..episodes).map(move |e| episode_seed(s, e)))
        .collect();
    Ok(config_hash(&all)?)
}

fn component_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ tag
}

fn short(hash: &str) -> &str {
    &hash[..16.min(hash.len())]
}

/// Appends to `run.log` and mirrors each line to the `log` facade.
#[derive(Clone, Debug)]
pub struct RunLog {
    path: PathBuf,
}

impl RunLog {
    pub fn new(path: PathBuf) -> Self {
        Self { path }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn line(&self, msg: impl AsRef<str>) -> Result<()> {
        let msg = msg.as_ref();
        log::info!("{msg}");
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| ExperimentError::io(&self.path, e))?;
        writeln!(f, "{msg}").map_err(|e| ExperimentError::io(&self.path, e))
    }
}

/// One learning-curve sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub env: String,
    pub epoch: usize,
    pub variant: String,
    pub seed: u64,
    pub mean_return: f64,
    pub success_rate: f64,
}

pub const CURVE_HEADER: [&str; 6] = ["env", "epoch", "variant", "seed", "mean_return", "success_rate"];

/// Everything trained for one seed.
#[derive(Clone)]
pub struct SeedModels {
    pub seed: u64,
    pub dataset: Arc<OfflineDataset>,
    pub models: PlannerModels,
    pub curves: Vec<CurvePoint>,
}

/// Episodes and metrics of one evaluated variant.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantResult {
    pub variant: String,
    pub rows: Vec<MetricsRow>,
    pub aggregate: MetricsRow,
    pub episodes: Vec<EpisodeSummary>,
    pub eval_seed_hash: String,
}

impl VariantResult {
    /// Seed rows followed by the aggregate row.
    pub fn all_rows(&self) -> Vec<MetricsRow> {
        let mut v = self.rows.clone();
        v.push(self.aggregate.clone());
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub env: String,
    pub mean_return: f64,
    pub std_return: f64,
    pub success_rate: f64,
    pub normalized_score: f64,
    pub eval_seed_hash: String,
}

pub const ABLATION_BAR_HEADER: [&str; 7] = [
    "variant",
    "env",
    "mean_return",
    "std_return",
    "success_rate",
    "normalized_score",
    "eval_seed_hash",
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub envs: Vec<String>,
    pub rows: Vec<AblationRow>,
    pub variants: Vec<VariantResult>,
}

impl AblationTable {
    pub fn row(&self, ablation: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == ablation.name())
    }
}

/// Grid of retrieval settings; each panel varies one parameter with the
/// other held at its fixed value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub k: Vec<usize>,
    pub delta: Vec<f64>,
    pub fixed_k: usize,
    pub fixed_delta: f64,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            k: vec![6, 30, 60, 120],
            delta: vec![0.0, 0.5, 0.8, 0.9],
            fixed_k: 6,
            fixed_delta: 0.9,
        }
    }
}

impl SweepGrid {
    /// `(panel, k, delta)` in output order.
    pub fn cells(&self) -> Vec<(&'static str, usize, f64)> {
        let mut v: Vec<_> = self.k.iter().map(|&k| ("k", k, self.fixed_delta)).collect();
        v.extend(self.delta.iter().map(|&d| ("delta", self.fixed_k, d)));
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub env: String,
    pub panel: String,
    /// The parameter held constant in this panel, e.g. `delta=0.9`.
    pub fixed: String,
    pub k: usize,
    pub delta: f64,
    pub mean_return: f64,
    pub std_return: f64,
    pub success_rate: f64,
    pub normalized_score: f64,
    pub retrieval_miss_rate: f64,
}

pub const SWEEP_HEADER: [&str; 10] = [
    "env",
    "panel",
    "fixed",
    "k",
    "delta",
    "mean_return",
    "std_return",
    "success_rate",
    "normalized_score",
    "retrieval_miss_rate",
];

/// Runs stages for one config, caching artifacts under `out_dir` by hash.
pub struct Runner {
    pub config: ExperimentConfig,
    hash: String,
    log: RunLog,
}

impl Runner {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let hash = config.hash()?;
        for sub in ["", "data", "db", "checkpoints", "curves", "baselines"] {
            let dir = config.out_dir.join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| ExperimentError::io(&dir, e))?;
        }
        let log = RunLog::new(config.out_dir.join("run.log"));
        log.line(format!("config hash {hash}"))?;
        Ok(Self { config, hash, log })
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    fn env_name(&self) -> &'static str {
        self.config.env.as_str()
    }

    fn key<T: Serialize>(&self, value: &T) -> Result<String> {
        Ok(config_hash(value)?)
    }

    fn data_key(&self, seed: u64) -> Result<String> {
        let source = match &self.config.dataset {
            Some(p) => json!({ "path": p }),
            None => json!({ "scenario": self.config.scenario, "seed": seed }),
        };
        self.key(&json!({ "source": source, "gamma": self.config.gamma }))
    }

    pub fn dataset_path(&self, seed: u64) -> Result<PathBuf> {
        if let Some(p) = &self.config.dataset {
            return Ok(p.clone());
        }
        let key = self.data_key(seed)?;
        Ok(self.out("data").join(format!("seed{seed}-{}.jsonl", short(&key))))
    }

    fn cached(&self, what: &str, path: &Path) -> Result<bool> {
        let hit = path.exists();
        if hit {
            self.log.line(format!("cache hit: {what} {}", path.display()))?;
        }
        Ok(hit)
    }

    pub fn dataset(&self, seed: u64) -> Result<Arc<OfflineDataset>> {
        let path = self.dataset_path(seed)?;
        let art = [path.clone()];
        if self.config.dataset.is_some() || self.cached("dataset", &path)? {
            return Ok(Arc::new(load_dataset(&path).stage(Stage::GenData, &art)?));
        }
        let data = rad_core::envs::gen_stitching_dataset(&self.config.scenario, seed)
            .stage(Stage::GenData, &art)?;
        let data = if (data.gamma() - self.config.gamma).abs() > 0.0 {
            OfflineDataset::new(data.trajectories().to_vec(), data.ds(), data.da(), self.config.gamma)
                .stage(Stage::GenData, &art)?
        } else {
            data
        };
        save_dataset(&data, &path).stage(Stage::GenData, &art)?;
        self.log.line(format!(
            "gen-data seed {seed}: {} trajectories, {} states -> {}",
            data.trajectories().len(),
            data.num_states(),
            path.display()
        ))?;
        Ok(Arc::new(data))
    }

    pub fn database(&self, seed: u64, data: &Arc<OfflineDataset>) -> Result<Arc<StateDatabase>> {
        let key = self.key(&json!({ "data": self.data_key(seed)?, "content": data.content_hash() }))?;
        let path = self.out("db").join(format!("seed{seed}-{}.bin", short(&key)));
        let art = [path.clone()];
        if self.cached("database", &path)? {
            return Ok(Arc::new(StateDatabase::load(&path, data.clone()).stage(Stage::BuildDb, &art)?));
        }
        let db = StateDatabase::build(data.clone());
        db.save(&path).stage(Stage::BuildDb, &art)?;
        self.log.line(format!("build-db seed {seed}: {} entries -> {}", db.len(), path.display()))?;
        Ok(Arc::new(db))
    }

    fn checkpoint_path(&self, seed: u64, role: &str, key: &str) -> Result<PathBuf> {
        let dir = self.out("checkpoints").join(format!("seed{seed}"));
        std::fs::create_dir_all(&dir).map_err(|e| ExperimentError::io(&dir, e))?;
        Ok(dir.join(format!("{role}-{}.json", short(key))))
    }

    pub fn step_estimator(&self, seed: u64, data: &OfflineDataset) -> Result<StepEstimator> {
        let cfg = self.config.step_config(component_seed(seed, 3));
        let key = self.key(&json!({
            "data": data.content_hash(), "cfg": cfg, "pairs": self.config.step.pairs,
            "norm": self.config.step.normalize_inputs,
        }))?;
        let path = self.checkpoint_path(seed, "step", &key)?;
        let art = [path.clone()];
        if self.cached("step estimator", &path)? {
            let ck = Checkpoint::load(&path).stage(Stage::TrainStep, &art)?;
            return ck.to_step_estimator(None).stage(Stage::TrainStep, &art);
        }
        let pairs = sample_step_pairs(data, self.config.horizon, self.config.step.pairs, component_seed(seed, 4))
            .stage(Stage::TrainStep, &art)?;
        let norm = self.config.step.normalize_inputs.then(|| data.norm().states.clone());
        let trained = train_step_estimator(&pairs, &cfg, norm).stage(Stage::TrainStep, &art)?;
        Checkpoint::step_estimator(&trained.estimator, Some(&trained.optimizer), &key)
            .save(&path)
            .stage(Stage::TrainStep, &art)?;
        self.log.line(format!(
            "train step seed {seed}: final loss {:.5} -> {}",
            trained.losses.last().copied().unwrap_or(f64::NAN),
            path.display()
        ))?;
        Ok(trained.estimator)
    }

    pub fn return_guide(&self, seed: u64, data: &OfflineDataset) -> Result<ReturnGuide> {
        let cfg = self.config.guide_config(component_seed(seed, 2));
        let key = self.key(&json!({ "data": data.content_hash(), "cfg": cfg }))?;
        let path = self.checkpoint_path(seed, "guide", &key)?;
        let art = [path.clone()];
        if self.cached("return guide", &path)? {
            let ck = Checkpoint::load(&path).stage(Stage::TrainGuide, &art)?;
            return ck.to_return_guide(None).stage(Stage::TrainGuide, &art);
        }
        let trained = train_return_guide(data, &cfg).stage(Stage::TrainGuide, &art)?;
        let sched = make_schedule(cfg.n_steps, ScheduleKind::Cosine).stage(Stage::TrainGuide, &art)?;
        Checkpoint::return_guide(&trained.guide, &sched, Some(&trained.optimizer), &key)
            .save(&path)
            .stage(Stage::TrainGuide, &art)?;
        self.log.line(format!(
            "train guide seed {seed}: final loss {:.5} -> {}",
            trained.losses.last().copied().unwrap_or(f64::NAN),
            path.display()
        ))?;
        Ok(trained.guide)
    }

    /// Trains or loads the denoiser; with `curves` set, evaluates the
    /// partially trained model every `curve_every` epochs.
    pub fn denoiser(
        &self,
        seed: u64,
        data: &OfflineDataset,
        curves: Option<(&PlannerModels, &mut Vec<CurvePoint>)>,
    ) -> Result<DiffusionModel> {
        let cfg = self.config.denoiser_config(component_seed(seed, 1));
        let key = self.key(&json!({ "data": data.content_hash(), "cfg": cfg }))?;
        let path = self.checkpoint_path(seed, "denoiser", &key)?;
        let art = [path.clone()];
        if curves.is_none() && self.cached("denoiser", &path)? {
            let ck = Checkpoint::load(&path).stage(Stage::TrainDiffusion, &art)?;
            return ck.to_denoiser(None).stage(Stage::TrainDiffusion, &art);
        }
        let every = self.config.curve_every;
        let epochs = cfg.epochs;
        let mut curves = curves;
        let trained = train_denoiser_observed(data, &cfg, |epoch, model, _| {
            let Some((base, points)) = curves.as_mut() else {
                return Ok(());
            };
            let done = epoch + 1;
            if every == 0 || (done % every != 0 && done != epochs) {
                return Ok(());
            }
            let models = PlannerModels { denoiser: Arc::new(model.clone()), ..(*base).clone() };
            for ab in [Ablation::Full, Ablation::NoRetrievalRandomTarget] {
                let pc = PlannerConfig { ablation: ab, ..self.config.planner() };
                let recs = self
                    .rollouts(&models, pc, seed, self.config.curve_episodes)
                    .map_err(|e| rad_core::RadError::Config(e.to_string()))?;
                let n = recs.len() as f64;
                points.push(CurvePoint {
                    env: self.env_name().into(),
                    epoch: done,
                    variant: ab.name().into(),
                    seed,
                    mean_return: recs.iter().map(|r| r.total_return).sum::<f64>() / n,
                    success_rate: recs.iter().filter(|r| r.success).count() as f64 / n,
                });
            }
            Ok(())
        })
        .stage(Stage::TrainDiffusion, &art)?;
        Checkpoint::denoiser(&trained.model, Some(&trained.optimizer), &key)
            .save(&path)
            .stage(Stage::TrainDiffusion, &art)?;
        self.log.line(format!(
            "train diffusion seed {seed}: loss {:.5} -> {:.5} -> {}",
            trained.losses.first().copied().unwrap_or(f64::NAN),
            trained.losses.last().copied().unwrap_or(f64::NAN),
            path.display()
        ))?;
        Ok(trained.model)
    }

    pub fn curve_path(&self, seed: u64) -> PathBuf {
        self.out("curves").join(format!("seed{seed}-{}.csv", short(&self.hash)))
    }

    /// Every trained component for `seed`, from cache where possible.
    pub fn seed_models(&self, seed: u64) -> Result<SeedModels> {
        let dataset = self.dataset(seed)?;
        let db = self.database(seed, &dataset)?;
        let step = Arc::new(self.step_estimator(seed, &dataset)?);
        let guide = Arc::new(self.return_guide(seed, &dataset)?);
        // the real denoiser replaces this placeholder below
        let placeholder = Arc::new(DiffusionModel::new(&self.config.denoiser_config(seed), dataset.ds(), dataset.da())?);
        let mut models = PlannerModels { denoiser: placeholder, guide: Some(guide), step, db };
        let mut curves = Vec::new();
        let curve_path = self.curve_path(seed);
        let denoiser = if self.config.curve_every > 0 && !self.cached("curves", &curve_path)? {
            let d = self.denoiser(seed, &dataset, Some((&models, &mut curves)))?;
            write_csv(&curve_path, &curves, &CURVE_HEADER)?;
            d
        } else {
            if self.config.curve_every > 0 {
                curves = read_csv(&curve_path)?;
            }
            self.denoiser(seed, &dataset, None)?
        };
        models.denoiser = Arc::new(denoiser);
        Ok(SeedModels { seed, dataset, models, curves })
    }

    fn eval_env(&self) -> Result<Nav2d> {
        Ok(self.config.scenario.env(self.config.start_mode)?)
    }

    /// Closed-loop episodes of one planner config under the shared seeds.
    pub fn rollouts(
        &self,
        models: &PlannerModels,
        pc: PlannerConfig,
        seed: u64,
        episodes: usize,
    ) -> Result<Vec<EpisodeRecord>> {
        let mut planner = Planner::new(models.clone(), pc, seed)?;
        let mut env = self.eval_env()?;
        (0..episodes)
            .map(|e| {
                Ok(run_episode(
                    &mut planner,
                    &mut env,
                    self.config.max_steps,
                    episode_seed(seed, e),
                    self.config.gamma,
                )?)
            })
            .collect()
    }

    /// Mean returns of the random and scripted reference policies.
    pub fn baselines(&self, seed: u64) -> Result<ScoreRef> {
        let c = &self.config;
        let key = self.key(&json!({
            "scenario": c.scenario, "start": c.start_mode, "episodes": c.episodes,
            "max_steps": c.max_steps, "seed": seed,
        }))?;
        let path = self.out("baselines").join(format!("seed{seed}-{}.json", short(&key)));
        let art = [path.clone()];
        if self.cached("baselines", &path)? {
            let text = std::fs::read_to_string(&path).map_err(|e| ExperimentError::io(&path, e))?;
            return serde_json::from_str(&text).stage(Stage::Baselines, &art);
        }
        let mut env = self.eval_env().stage(Stage::Baselines, &art)?;
        let waypoints = scripted_waypoints(&c.scenario);
        let (mut random, mut oracle) = (0.0, 0.0);
        for e in 0..c.episodes {
            let es = episode_seed(seed, e);
            random += random_policy_return(&mut env, es, c.max_steps).stage(Stage::Baselines, &art)?;
            oracle += scripted_policy_return(&mut env, es, c.max_steps, &waypoints)
                .stage(Stage::Baselines, &art)?;
        }
        let n = c.episodes as f64;
        let score = ScoreRef { random: random / n, oracle: oracle / n };
        let text = serde_json::to_string(&score).stage(Stage::Baselines, &art)?;
        std::fs::write(&path, text).map_err(|e| ExperimentError::io(&path, e))?;
        self.log.line(format!(
            "baselines seed {seed}: random {:.4} scripted {:.4}",
            score.random, score.oracle
        ))?;
        Ok(score)
    }

    /// Evaluates one planner config on every seed.
    pub fn evaluate_variant(
        &self,
        trained: &[SeedModels],
        pc: &PlannerConfig,
        variant: &str,
        episodes: usize,
    ) -> Result<VariantResult> {
        let mut rows = Vec::new();
        let mut all = Vec::new();
        for sm in trained {
            let score = self.baselines(sm.seed)?;
            let recs = self.rollouts(&sm.models, pc.clone(), sm.seed, episodes)?;
            let eps: Vec<EpisodeSummary> = recs
                .iter()
                .enumerate()
                .map(|(e, r)| EpisodeSummary::from_record(r, &self.hash, variant, sm.seed, e))
                .collect();
            let ctx = RowContext {
                config_hash: &self.hash,
                env: self.env_name(),
                variant,
                k: pc.retrieval.k,
                delta: pc.retrieval.delta,
            };
            rows.push(seed_row(&ctx, sm.seed, &eps, score));
            all.extend(eps);
        }
        let aggregate = aggregate_row(&rows).expect("at least one seed");
        let seeds: Vec<u64> = trained.iter().map(|s| s.seed).collect();
        let eval_seed_hash = eval_seed_hash(&seeds, episodes)?;
        self.log.line(format!(
            "eval {variant} k={} delta={}: mean return {:.4} success {:.3} eval seeds {}",
            pc.retrieval.k, pc.retrieval.delta, aggregate.mean_return, aggregate.success_rate, eval_seed_hash
        ))?;
        Ok(VariantResult { variant: variant.into(), rows, aggregate, episodes: all, eval_seed_hash })
    }

    pub fn train_all(&self) -> Result<Vec<SeedModels>> {
        self.config.seeds.iter().map(|&s| self.seed_models(s)).collect()
    }
}

fn wrap_eval<T>(stage: Stage, r: Result<T>, artifacts: &[PathBuf]) -> Result<T> {
    match r {
        Err(e @ ExperimentError::Stage { .. }) => Err(e),
        other => other.stage(stage, artifacts),
    }
}

/// Full pipeline for the configured variant: per-seed rows plus one
/// aggregate row, written to `metrics.csv` and `episodes.jsonl`.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    let runner = Runner::new(config.clone())?;
    let trained = runner.train_all()?;
    let metrics = runner.out("metrics.csv");
    let episodes = runner.out("episodes.jsonl");
    let art = [metrics.clone(), episodes.clone()];
    let res = wrap_eval(
        Stage::Eval,
        runner.evaluate_variant(&trained, &config.planner(), config.ablation.name(), config.episodes),
        &art,
    )?;
    let rows = res.all_rows();
    write_metrics(&metrics, &rows)?;
    write_jsonl(&episodes, &res.episodes)?;
    if config.curve_every > 0 {
        let curves: Vec<CurvePoint> = trained.iter().flat_map(|t| t.curves.clone()).collect();
        write_curves(&curves, &config.out_dir.join("curves.csv"))?;
    }
    Ok(rows)
}

/// Full planner and the three ablations under identical seeds.
pub fn run_ablations(config: &ExperimentConfig) -> Result<AblationTable> {
    let runner = Runner::new(config.clone())?;
    let trained = runner.train_all()?;
    let art = [runner.out("ablation.csv"), runner.out("ablation_metrics.csv")];
    let mut variants = Vec::new();
    for ab in Ablation::ALL {
        let pc = PlannerConfig { ablation: ab, ..config.planner() };
        let r = runner.evaluate_variant(&trained, &pc, ab.name(), config.episodes);
        variants.push(wrap_eval(Stage::Ablate, r, &art)?);
    }
    let env = config.env.as_str().to_string();
    let rows: Vec<AblationRow> = variants
        .iter()
        .map(|v| AblationRow {
            variant: v.variant.clone(),
            env: env.clone(),
            mean_return: v.aggregate.mean_return,
            std_return: v.aggregate.std_return,
            success_rate: v.aggregate.success_rate,
            normalized_score: v.aggregate.normalized_score,
            eval_seed_hash: v.eval_seed_hash.clone(),
        })
        .collect();
    // one method row per variant, one return column per env
    let wide: Vec<(String, f64)> = rows.iter().map(|r| (r.variant.clone(), r.mean_return)).collect();
    write_csv(&art[0], &wide, &["variant", &env])?;
    let all: Vec<MetricsRow> = variants.iter().flat_map(|v| v.all_rows()).collect();
    write_metrics(&art[1], &all)?;
    let eps: Vec<EpisodeSummary> = variants.iter().flat_map(|v| v.episodes.clone()).collect();
    write_jsonl(&runner.out("ablation_episodes.jsonl"), &eps)?;
    write_bars(&rows, &runner.out("ablation_bars.csv"))?;
    Ok(AblationTable { envs: vec![env], rows, variants })
}

/// Evaluates every grid cell with the trained models of `config`.
pub fn run_sweep(config: &ExperimentConfig, grid: &SweepGrid) -> Result<Vec<SweepCell>> {
    let runner = Runner::new(config.clone())?;
    let trained = runner.train_all()?;
    let path = runner.out("sweep.csv");
    let art = [path.clone()];
    let mut cells = Vec::new();
    for (panel, k, delta) in grid.cells() {
        let mut pc = config.planner();
        pc.retrieval.k = k;
        pc.retrieval.delta = delta;
        let label = format!("{}_k{k}_delta{delta}", config.ablation.name());
        let r = wrap_eval(Stage::Sweep, runner.evaluate_variant(&trained, &pc, &label, config.episodes), &art)?;
        let fixed = match panel {
            "k" => format!("delta={}", grid.fixed_delta),
            _ => format!("k={}", grid.fixed_k),
        };
        cells.push(SweepCell {
            env: config.env.as_str().into(),
            panel: panel.into(),
            fixed,
            k,
            delta,
            mean_return: r.aggregate.mean_return,
            std_return: r.aggregate.std_return,
            success_rate: r.aggregate.success_rate,
            normalized_score: r.aggregate.normalized_score,
            retrieval_miss_rate: r.aggregate.retrieval_miss_rate,
        });
    }
    write_csv(&path, &cells, &SWEEP_HEADER)?;
    Ok(cells)
}

/// Writes `curves.csv` and `ablation_bars.csv` into `dir`; empty inputs
/// give header-only files.
pub fn emit_plot_data(curves: &[CurvePoint], ablation: &[AblationRow], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    write_curves(curves, &dir.join("curves.csv"))?;
    write_bars(ablation, &dir.join("ablation_bars.csv"))
}

/// Curve rows sorted by env, seed, epoch and variant.
fn write_curves(curves: &[CurvePoint], path: &Path) -> Result<()> {
    let mut sorted = curves.to_vec();
    sorted.sort_by(|a, b| {
        (&a.env, a.seed, a.epoch, &a.variant).cmp(&(&b.env, b.seed, b.epoch, &b.variant))
    });
    let r = write_csv(path, &sorted, &CURVE_HEADER);
    wrap_eval(Stage::PlotData, r, &[path.to_path_buf()])
}

fn write_bars(rows: &[AblationRow], path: &Path) -> Result<()> {
    let r = write_csv(path, rows, &ABLATION_BAR_HEADER);
    wrap_eval(Stage::PlotData, r, &[path.to_path_buf()])
}

/// Route of the scripted reference policy: the family-A turn, the
/// junction, the family-B turn if any, then the goal.
pub fn scripted_waypoints(spec: &rad_core::envs::StitchingSpec) -> Vec<[f64; 2]> {
    let mut w: Vec<[f64; 2]> = spec.corners.first().copied().into_iter().collect();
    w.push(spec.midpoint);
    w.extend(spec.corners.get(1).copied());
    w.push(spec.goal);
    w
}

fn random_policy_return(env: &mut Nav2d, seed: u64, max_steps: usize) -> Result<f64> {
    let (lo, hi) = env.action_bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    env.reset(seed);
    let mut total = 0.0;
    for _ in 0..max_steps {
        let a: Vec<f64> = lo.iter().zip(&hi).map(|(&l, &h)| rng.random_range(l..=h)).collect();
        let out = env.step(&a)?;
        total += out.reward;
        if out.terminal {
            break;
        }
    }
    Ok(total)
}

fn scripted_policy_return(env: &mut Nav2d, seed: u64, max_steps: usize, waypoints: &[[f64; 2]]) -> Result<f64> {
    let (lo, hi) = env.action_bounds();
    let step = hi[0].min(-lo[0]);
    let mut s = env.reset(seed).to_vec();
    let mut wp = 0;
    let mut total = 0.0;
    for _ in 0..max_steps {
        let target = waypoints[wp.min(waypoints.len() - 1)];
        let (dx, dy) = (target[0] - s[0], target[1] - s[1]);
        let dist = dx.hypot(dy);
        if dist <= step && wp + 1 < waypoints.len() {
            wp += 1;
        }
        let scale = if dist > step { step / dist } else { 1.0 };
        let a = [(dx * scale).clamp(lo[0], hi[0]), (dy * scale).clamp(lo[1], hi[1])];
        let out = env.step(&a)?;
        total += out.reward;
        s = out.state.to_vec();
        if out.terminal {
            break;
        }
    }
    Ok(total)
}
