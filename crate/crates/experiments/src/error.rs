use std::fmt;
use std::path::PathBuf;

use rad_core::RadError;
use thiserror::Error;

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    GenData,
    BuildDb,
    TrainDiffusion,
    TrainGuide,
    TrainStep,
    Baselines,
    Eval,
    Ablate,
    Sweep,
    PlotData,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::BuildDb => "build-db",
            Stage::TrainDiffusion => "train-diffusion",
            Stage::TrainGuide => "train-guide",
            Stage::TrainStep => "train-step",
            Stage::Baselines => "baselines",
            Stage::Eval => "eval",
            Stage::Ablate => "ablate",
            Stage::Sweep => "sweep",
            Stage::PlotData => "plot-data",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Validation(String),

    #[error("stage {stage} failed (artifacts: {}): {source}", display_paths(.artifacts))]
    Stage {
        stage: Stage,
        artifacts: Vec<PathBuf>,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] RadError),
}

fn display_paths(paths: &[PathBuf]) -> String {
    if paths.is_empty() {
        return "none".into();
    }
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
}

impl ExperimentError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ExperimentError::Io { path: path.into(), source }
    }

    /// The failing stage, when the error came from one.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            ExperimentError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

/// Tags an error with the stage it happened in and the paths to resume from.
pub trait StageContext<T> {
    fn stage(self, stage: Stage, artifacts: &[PathBuf]) -> Result<T>;
}

impl<T, E> StageContext<T> for std::result::Result<T, E>
where
    E: std::error::Error + Send + Sync + 'static,
{
    fn stage(self, stage: Stage, artifacts: &[PathBuf]) -> Result<T> {
        self.map_err(|e| ExperimentError::Stage {
            stage,
            artifacts: artifacts.to_vec(),
            source: Box::new(e),
        })
    }
}
