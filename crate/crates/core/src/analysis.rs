//! Novelty/diversity measurement over embedded datasets and parameter sweeps.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingMatrix;
use crate::knn::PointSet;
use crate::metrics::{diversity_protocol, novelty_protocol, MetricError, MetricReport};
use crate::projection::{project_jointly, ProjectionConfig, ProjectionError};

pub const DEFAULT_K: usize = 4;
pub const DEFAULT_SUBSAMPLE: usize = 150;
pub const DEFAULT_TRIALS: usize = 250;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error("{0}")]
    Usage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Novelty,
    Diversity,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Novelty => "novelty",
            Metric::Diversity => "diversity",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasureSettings {
    pub projection: ProjectionConfig,
    pub k: usize,
    /// Diversity subsample size; defaults to 150 or the smallest dataset size.
    pub subsample: Option<usize>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for MeasureSettings {
    fn default() -> Self {
        Self {
            projection: ProjectionConfig::default(),
            k: DEFAULT_K,
            subsample: None,
            trials: DEFAULT_TRIALS,
            seed: 0,
        }
    }
}

fn run_seeds(p: &ProjectionConfig) -> Vec<u64> {
    (0..p.runs).map(|r| p.run_seed(r)).collect()
}

fn column(runs: &[Vec<EmbeddingMatrix>], i: usize) -> Vec<PointSet> {
    runs.iter().map(|run| run[i].points()).collect()
}

fn novelty_reports(
    runs: &[Vec<EmbeddingMatrix>],
    names: &[String],
    k: usize,
    seeds: &[u64],
) -> Result<Vec<MetricReport>, AnalysisError> {
    // dataset 0 is the baseline
    let base = column(runs, 0);
    (1..names.len())
        .map(|i| {
            let est = novelty_protocol(&column(runs, i), &base, k)?;
            Ok(MetricReport::novelty(&names[i], &names[0], &est, seeds.to_vec()))
        })
        .collect()
}

fn diversity_reports(
    runs: &[Vec<EmbeddingMatrix>],
    names: &[String],
    settings: &MeasureSettings,
    k: usize,
    seeds: &[u64],
) -> Result<Vec<MetricReport>, AnalysisError> {
    let smallest = runs[0].iter().map(EmbeddingMatrix::len).min().unwrap_or(0);
    let subsample = settings.subsample.unwrap_or(DEFAULT_SUBSAMPLE.min(smallest));
    (0..names.len())
        .map(|i| {
            let est = diversity_protocol(&column(runs, i), subsample, settings.trials, k, settings.seed)?;
            let mut all = seeds.to_vec();
            all.push(settings.seed);
            Ok(MetricReport::diversity(&names[i], &est, all))
        })
        .collect()
}

/// Novelty of each candidate against `baseline`, all projected jointly.
pub fn measure_novelty(
    candidates: &[EmbeddingMatrix],
    baseline: &EmbeddingMatrix,
    settings: &MeasureSettings,
) -> Result<Vec<MetricReport>, AnalysisError> {
    if candidates.is_empty() {
        return Err(AnalysisError::Usage("novelty needs at least one candidate dataset".into()));
    }
    let mut all = vec![baseline.clone()];
    all.extend_from_slice(candidates);
    let names: Vec<String> = all.iter().map(|m| m.dataset_name.clone()).collect();
    let runs = project_jointly(&all, &settings.projection)?;
    novelty_reports(&runs, &names, settings.k, &run_seeds(&settings.projection))
}

/// Subsampled entropy of each dataset, all projected jointly.
pub fn measure_diversity(datasets: &[EmbeddingMatrix], settings: &MeasureSettings) -> Result<Vec<MetricReport>, AnalysisError> {
    if datasets.is_empty() {
        return Err(AnalysisError::Usage("diversity needs at least one dataset".into()));
    }
    let names: Vec<String> = datasets.iter().map(|m| m.dataset_name.clone()).collect();
    let runs = project_jointly(datasets, &settings.projection)?;
    diversity_reports(&runs, &names, settings, settings.k, &run_seeds(&settings.projection))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    K,
    NNeighbors,
    MinDist,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::K => "k",
            SweepParam::NNeighbors => "n-neighbors",
            SweepParam::MinDist => "min-dist",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub dataset: String,
    pub metric: String,
    pub estimate: f64,
    pub ci95: f64,
}

/// Re-measure over a grid of one parameter. For novelty the first dataset is
/// the baseline. Varying k reuses one set of projections.
pub fn sweep(
    param: SweepParam,
    grid: &[f64],
    metric: Metric,
    datasets: &[EmbeddingMatrix],
    settings: &MeasureSettings,
) -> Result<Vec<SweepRow>, AnalysisError> {
    if grid.is_empty() {
        return Err(AnalysisError::EmptyGrid);
    }
    if metric == Metric::Novelty && datasets.len() < 2 {
        return Err(AnalysisError::Usage("novelty sweep needs a baseline and at least one candidate".into()));
    }
    let names: Vec<String> = datasets.iter().map(|m| m.dataset_name.clone()).collect();
    let evaluate = |runs: &[Vec<EmbeddingMatrix>], k: usize, seeds: &[u64]| match metric {
        Metric::Novelty => novelty_reports(runs, &names, k, seeds),
        Metric::Diversity => diversity_reports(runs, &names, settings, k, seeds),
    };
    let shared = match param {
        SweepParam::K => Some(project_jointly(datasets, &settings.projection)?),
        _ => None,
    };
    let mut rows = Vec::new();
    for &value in grid {
        let reports = match param {
            SweepParam::K => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(AnalysisError::Usage(format!("k must be a positive integer, got {value}")));
                }
                evaluate(shared.as_ref().expect("projected once"), value as usize, &run_seeds(&settings.projection))?
            }
            SweepParam::NNeighbors | SweepParam::MinDist => {
                let mut proj = settings.projection.clone();
                if param == SweepParam::NNeighbors {
                    if value < 2.0 || value.fract() != 0.0 {
                        return Err(AnalysisError::Usage(format!("n-neighbors must be an integer >= 2, got {value}")));
                    }
                    proj.n_neighbors = value as usize;
                } else {
                    proj.min_dist = value;
                }
                let runs = project_jointly(datasets, &proj)?;
                evaluate(&runs, settings.k, &run_seeds(&proj))?
            }
        };
        rows.extend(reports.into_iter().map(|r| SweepRow {
            param: param.as_str().into(),
            value,
            dataset: r.dataset,
            metric: r.metric,
            estimate: r.value,
            ci95: r.ci95,
        }));
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["param", "value", "dataset", "metric", "estimate", "ci95"])?;
    for r in rows {
        w.write_record([
            r.param.clone(),
            format!("{}", r.value),
            r.dataset.clone(),
            r.metric.clone(),
            format!("{}", r.estimate),
            format!("{}", r.ci95),
        ])?;
    }
    w.flush()?;
    Ok(())
}
