use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use rad_core::envs::{gen_linewalk_dataset, gen_stitching_dataset, LinewalkSpec};
use rad_core::planner::{run_episode, Planner};
use rad_core::trajectory::save_dataset;
use rad_experiments::metrics::read_csv;
use rad_experiments::pipeline::{episode_seed, AblationRow, CurvePoint};
use rad_experiments::{
    emit_plot_data, run_ablations, run_pipeline, run_sweep, ExperimentConfig, ExperimentError,
    Runner, Stage, SweepGrid,
};
use rad_experiments::error::StageContext;

/// Retrieval-guided diffusion planning experiments.
#[derive(Parser)]
#[command(name = "rad", version)]
struct Cli {
    /// JSON config; fields left out take their defaults. `RAD_*`
    /// environment variables override it.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Component {
    Diffusion,
    Guide,
    Step,
    All,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Scenario {
    Stitching,
    Linewalk,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or validate) the offline dataset of every seed, or write a
    /// single dataset to `--out`.
    GenData {
        #[arg(long, value_enum, default_value = "stitching")]
        scenario: Scenario,
        /// Seed of the single dataset written to `--out`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// How far family B misses the junction.
        #[arg(long)]
        gap: Option<f64>,
        #[arg(long)]
        traj_count: Option<usize>,
    },
    /// Build the retrieval database of every seed.
    BuildDb,
    /// Train one component, or all of them, for every seed.
    Train {
        #[arg(long, value_enum, default_value = "all")]
        component: Component,
    },
    /// Run one episode and write its full record as JSON.
    Plan {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        episode: usize,
    },
    /// Train as needed and evaluate the configured variant.
    Eval,
    /// Evaluate the full planner and its three ablations.
    Ablate,
    /// Evaluate the retrieval grid.
    Sweep {
        /// Comma-separated top-k values, varied at the fixed delta.
        #[arg(long, value_delimiter = ',', default_values_t = vec![6, 30, 60, 120])]
        k: Vec<usize>,
        /// Comma-separated thresholds, varied at the fixed k.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.5, 0.8, 0.9])]
        delta: Vec<f64>,
        #[arg(long, default_value_t = 6)]
        fixed_k: usize,
        #[arg(long, default_value_t = 0.9)]
        fixed_delta: f64,
    },
    /// Collect learning curves and ablation bars into plot-ready CSVs.
    PlotData,
}

fn load_config(path: Option<&PathBuf>) -> anyhow::Result<ExperimentConfig> {
    let base = match path {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    let cfg = base.with_env_overrides()?;
    cfg.validate()?;
    Ok(cfg)
}

fn gen_single(
    cfg: &ExperimentConfig,
    scenario: Scenario,
    seed: u64,
    out: &Path,
    traj_count: Option<usize>,
) -> anyhow::Result<()> {
    let art = [out.to_path_buf()];
    let data = match scenario {
        Scenario::Stitching => gen_stitching_dataset(&cfg.scenario, seed).stage(Stage::GenData, &art)?,
        Scenario::Linewalk => {
            let mut spec = LinewalkSpec::default();
            if let Some(n) = traj_count {
                spec.traj_count = n;
            }
            gen_linewalk_dataset(&spec, seed).stage(Stage::GenData, &art)?
        }
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).stage(Stage::GenData, &art)?;
    }
    save_dataset(&data, out).stage(Stage::GenData, &art)?;
    println!("{} trajectories -> {}", data.trajectories().len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(cli.config.as_ref()).context("loading config")?;
    match cli.command {
        Command::GenData { scenario, seed, out, gap, traj_count } => {
            if scenario == Scenario::Linewalk && (gap.is_some() || out.is_none()) {
                anyhow::bail!("linewalk takes no --gap and needs --out");
            }
            if let Some(g) = gap {
                cfg.scenario.gap = g;
            }
            if let Some(n) = traj_count {
                cfg.scenario.traj_count = n;
            }
            if let Some(out) = out {
                let seed = seed.unwrap_or(cfg.seeds[0]);
                return gen_single(&cfg, scenario, seed, &out, traj_count);
            }
            cfg.validate()?;
            let runner = Runner::new(cfg)?;
            for &s in &runner.config.seeds {
                let d = runner.dataset(s)?;
                println!("seed {s}: {} trajectories {}", d.trajectories().len(), runner.dataset_path(s)?.display());
            }
        }
        Command::BuildDb => {
            let runner = Runner::new(cfg)?;
            for &s in &runner.config.seeds {
                let d = runner.dataset(s)?;
                println!("seed {s}: {} entries", runner.database(s, &d)?.len());
            }
        }
        Command::Train { component } => {
            let runner = Runner::new(cfg)?;
            for &s in &runner.config.seeds {
                let d = runner.dataset(s)?;
                match component {
                    Component::Diffusion => drop(runner.denoiser(s, &d, None)?),
                    Component::Guide => drop(runner.return_guide(s, &d)?),
                    Component::Step => drop(runner.step_estimator(s, &d)?),
                    Component::All => drop(runner.seed_models(s)?),
                }
            }
            println!("trained; see {}", runner.log().path().display());
        }
        Command::Plan { seed, episode } => {
            let runner = Runner::new(cfg)?;
            let seed = seed.unwrap_or(runner.config.seeds[0]);
            let sm = runner.seed_models(seed)?;
            let mut planner = Planner::new(sm.models, runner.config.planner(), seed)?;
            let mut env = runner.config.scenario.env(runner.config.start_mode)?;
            let es = episode_seed(seed, episode);
            let rec = run_episode(&mut planner, &mut env, runner.config.max_steps, es, runner.config.gamma)?;
            let path = runner.out(&format!("plan-seed{seed}-ep{episode}.json"));
            std::fs::write(&path, serde_json::to_string_pretty(&rec)?)
                .with_context(|| format!("writing {}", path.display()))?;
            println!(
                "seed {seed} episode {episode}: return {:.4} success {} steps {} -> {}",
                rec.total_return,
                rec.success,
                rec.len(),
                path.display()
            );
        }
        Command::Eval => {
            for r in run_pipeline(&cfg)? {
                println!(
                    "{} seed {}: return {:.4} ± {:.4} success {:.3} score {:.1}",
                    r.variant, r.seed, r.mean_return, r.std_return, r.success_rate, r.normalized_score
                );
            }
        }
        Command::Ablate => {
            let table = run_ablations(&cfg)?;
            for r in &table.rows {
                println!(
                    "{:<28} return {:.4} ± {:.4} success {:.3} seeds {}",
                    r.variant,
                    r.mean_return,
                    r.std_return,
                    r.success_rate,
                    &r.eval_seed_hash[..12]
                );
            }
        }
        Command::Sweep { k, delta, fixed_k, fixed_delta } => {
            let grid = SweepGrid { k, delta, fixed_k, fixed_delta };
            for c in run_sweep(&cfg, &grid)? {
                println!(
                    "{:<5} k={:<4} delta={:<4} ({}) return {:.4} success {:.3} miss {:.3}",
                    c.panel, c.k, c.delta, c.fixed, c.mean_return, c.success_rate, c.retrieval_miss_rate
                );
            }
        }
        Command::PlotData => {
            let runner = Runner::new(cfg)?;
            let mut curves: Vec<CurvePoint> = Vec::new();
            for &s in &runner.config.seeds {
                let p = runner.curve_path(s);
                if p.exists() {
                    curves.extend(read_csv::<CurvePoint>(&p)?);
                }
            }
            let bars_path = runner.out("ablation_bars.csv");
            let bars: Vec<AblationRow> = if bars_path.exists() { read_csv(&bars_path)? } else { Vec::new() };
            emit_plot_data(&curves, &bars, &runner.config.out_dir)?;
            println!("{} curve rows, {} ablation rows", curves.len(), bars.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let stage = e
                .chain()
                .find_map(|c| c.downcast_ref::<ExperimentError>().and_then(|x| x.stage()))
                .map(|s| s.name())
                .unwrap_or("config");
            eprintln!("error in stage {stage}: {e:#}");
            ExitCode::FAILURE
        }
    }
}
