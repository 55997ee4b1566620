use std::io::Write;
use std::path::Path;

use rad_core::planner::EpisodeRecord;
use serde::{Deserialize, Serialize};

use crate::error::{ExperimentError, Result};

/// Value of the `seed` column on aggregate rows.
pub const AGGREGATE: &str = "aggregate";

/// One evaluated episode, as written to `episodes.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub config_hash: String,
    pub variant: String,
    pub seed: u64,
    pub episode: usize,
    pub episode_seed: u64,
    pub total_return: f64,
    pub discounted_return: f64,
    pub success: bool,
    pub length: usize,
    pub plans: usize,
    pub retrieval_misses: usize,
    /// Sums over steps that had a retrieved target.
    pub similarity_sum: f64,
    pub i_hat_sum: f64,
    pub retrieved_steps: usize,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl EpisodeSummary {
    pub fn from_record(
        rec: &EpisodeRecord,
        config_hash: &str,
        variant: &str,
        seed: u64,
        episode: usize,
    ) -> Self {
        let mut s = Self {
            config_hash: config_hash.to_string(),
            variant: variant.to_string(),
            seed,
            episode,
            episode_seed: rec.seed,
            total_return: rec.total_return,
            discounted_return: rec.discounted_return,
            success: rec.success,
            length: rec.len(),
            plans: 0,
            retrieval_misses: 0,
            similarity_sum: 0.0,
            i_hat_sum: 0.0,
            retrieved_steps: 0,
            start: rec.states.first().cloned().unwrap_or_default(),
            end: rec.states.last().cloned().unwrap_or_default(),
        };
        for d in rec.diagnostics.iter().filter(|d| d.replanned) {
            s.plans += 1;
            if d.retrieval_miss {
                s.retrieval_misses += 1;
            }
            if let (Some(sim), Some(i)) = (d.similarity, d.i_hat) {
                s.similarity_sum += sim;
                s.i_hat_sum += i as f64;
                s.retrieved_steps += 1;
            }
        }
        s
    }
}

/// Per-seed or aggregate evaluation result; one `metrics.csv` line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub config_hash: String,
    pub env: String,
    pub variant: String,
    /// Seed number, or [`AGGREGATE`].
    pub seed: String,
    pub episodes: usize,
    pub mean_return: f64,
    /// Over episodes for a seed row, over seed means for the aggregate row.
    pub std_return: f64,
    pub success_rate: f64,
    pub normalized_score: f64,
    pub mean_length: f64,
    pub retrieval_miss_rate: f64,
    pub mean_similarity: f64,
    pub mean_i_hat: f64,
    pub k: usize,
    pub delta: f64,
}

impl MetricsRow {
    pub fn is_aggregate(&self) -> bool {
        self.seed == AGGREGATE
    }
}

/// Mean and sample standard deviation, summed left to right; `std` is 0 for
/// fewer than two values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Maps a return onto the scale where `random` is 0 and `oracle` is 100.
pub fn normalized_score(value: f64, random: f64, oracle: f64) -> f64 {
    let span = oracle - random;
    if span.abs() < 1e-12 {
        return 0.0;
    }
    100.0 * (value - random) / span
}

/// Reference returns for score normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRef {
    pub random: f64,
    pub oracle: f64,
}

pub struct RowContext<'a> {
    pub config_hash: &'a str,
    pub env: &'a str,
    pub variant: &'a str,
    pub k: usize,
    pub delta: f64,
}

/// Summarizes one seed's episodes.
pub fn seed_row(ctx: &RowContext, seed: u64, eps: &[EpisodeSummary], score: ScoreRef) -> MetricsRow {
    let returns: Vec<f64> = eps.iter().map(|e| e.total_return).collect();
    let (mean, std) = mean_std(&returns);
    let n = eps.len() as f64;
    let plans: usize = eps.iter().map(|e| e.plans).sum();
    let misses: usize = eps.iter().map(|e| e.retrieval_misses).sum();
    let retrieved: usize = eps.iter().map(|e| e.retrieved_steps).sum();
    MetricsRow {
        config_hash: ctx.config_hash.to_string(),
        env: ctx.env.to_string(),
        variant: ctx.variant.to_string(),
        seed: seed.to_string(),
        episodes: eps.len(),
        mean_return: mean,
        std_return: std,
        success_rate: eps.iter().filter(|e| e.success).count() as f64 / n,
        normalized_score: normalized_score(mean, score.random, score.oracle),
        mean_length: eps.iter().map(|e| e.length as f64).sum::<f64>() / n,
        retrieval_miss_rate: ratio(misses as f64, plans as f64),
        mean_similarity: ratio(eps.iter().map(|e| e.similarity_sum).sum(), retrieved as f64),
        mean_i_hat: ratio(eps.iter().map(|e| e.i_hat_sum).sum(), retrieved as f64),
        k: ctx.k,
        delta: ctx.delta,
    }
}

/// Mean of every column over the seed rows, in seed-row order; `std_return`
/// is the spread of the seed means.
pub fn aggregate_row(rows: &[MetricsRow]) -> Option<MetricsRow> {
    let first = rows.first()?;
    let col = |f: fn(&MetricsRow) -> f64| mean_std(&rows.iter().map(f).collect::<Vec<_>>()).0;
    let (mean, std) = mean_std(&rows.iter().map(|r| r.mean_return).collect::<Vec<_>>());
    Some(MetricsRow {
        seed: AGGREGATE.into(),
        episodes: rows.iter().map(|r| r.episodes).sum(),
        mean_return: mean,
        std_return: std,
        success_rate: col(|r| r.success_rate),
        normalized_score: col(|r| r.normalized_score),
        mean_length: col(|r| r.mean_length),
        retrieval_miss_rate: col(|r| r.retrieval_miss_rate),
        mean_similarity: col(|r| r.mean_similarity),
        mean_i_hat: col(|r| r.mean_i_hat),
        ..first.clone()
    })
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| ExperimentError::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> ExperimentError {
    let kind = std::io::ErrorKind::InvalidData;
    ExperimentError::io(path, std::io::Error::new(kind, e.to_string()))
}

pub const METRICS_HEADER: [&str; 15] = [
    "config_hash",
    "env",
    "variant",
    "seed",
    "episodes",
    "mean_return",
    "std_return",
    "success_rate",
    "normalized_score",
    "mean_length",
    "retrieval_miss_rate",
    "mean_similarity",
    "mean_i_hat",
    "k",
    "delta",
];

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_csv(path, rows, &METRICS_HEADER)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    read_csv(path)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| ExperimentError::io(path, e))?,
    );
    for it in items {
        let line = serde_json::to_string(it).map_err(|e| ExperimentError::Core(e.into()))?;
        writeln!(f, "{line}").map_err(|e| ExperimentError::io(path, e))?;
    }
    f.flush().map_err(|e| ExperimentError::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| ExperimentError::Core(e.into())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(seed: u64, mean: f64, success: f64) -> MetricsRow {
        MetricsRow {
            config_hash: "h".into(),
            env: "stitching".into(),
            variant: "full".into(),
            seed: seed.to_string(),
            episodes: 50,
            mean_return: mean,
            std_return: 0.1,
            success_rate: success,
            normalized_score: 2.0 * mean,
            mean_length: 40.0,
            retrieval_miss_rate: 0.0,
            mean_similarity: 0.99,
            mean_i_hat: 5.0,
            k: 6,
            delta: 0.9,
        }
    }

    #[test]
    fn sample_std_of_known_values() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m, 5.0);
        assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
    }

    #[test]
    fn normalized_score_anchors() {
        assert_eq!(normalized_score(-1.0, -1.0, 0.5), 0.0);
        assert_eq!(normalized_score(0.5, -1.0, 0.5), 100.0);
        assert_eq!(normalized_score(-0.25, -1.0, 0.5), 50.0);
    }

    #[test]
    fn metrics_csv_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut rows = vec![row(0, 0.1 + 0.2, 0.3), row(1, -1.0 / 3.0, 0.5)];
        rows.push(aggregate_row(&rows).unwrap());
        write_metrics(&path, &rows).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), rows);
    }

    #[test]
    fn empty_csv_has_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics(&path, &[]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("config_hash,env,variant,seed"));
    }

    proptest! {
        #[test]
        fn aggregate_is_recomputable_from_seed_rows(
            means in proptest::collection::vec(-5.0f64..5.0, 1..6),
        ) {
            let rows: Vec<_> = means.iter().enumerate().map(|(i, &m)| row(i as u64, m, 0.5)).collect();
            let agg = aggregate_row(&rows).unwrap();
            let n = means.len() as f64;
            let mean = means.iter().sum::<f64>() / n;
            let var = if means.len() > 1 {
                means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else { 0.0 };
            prop_assert!((agg.mean_return - mean).abs() <= 1e-12);
            prop_assert!((agg.std_return - var.sqrt()).abs() <= 1e-12);
            prop_assert!(agg.is_aggregate());
            prop_assert_eq!(agg.episodes, 50 * means.len());
        }
    }
}
