//! Python bindings: estimators, projection-based measurements, dedup,
//! k-FN selection, dataset IO and the offline generation pipeline.
//!
//! ```python
//! import benchsynth
//! benchsynth.kl_divergence(x, y, k=4)
//! benchsynth.measure("diversity", [("a", rows_a), ("b", rows_b)])
//! ```

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use benchsynth::analysis::{measure_diversity, measure_novelty, MeasureSettings};
use benchsynth::config::PipelineConfig;
use benchsynth::corpus;
use benchsynth::dedup::{self, DedupConfig};
use benchsynth::embedding::{BagOfWordsEmbedder, EmbeddingMatrix, EmbeddingProvider, EmbeddingRow, HashEmbedder};
use benchsynth::evolve;
use benchsynth::knn::{PointSet, Search};
use benchsynth::metrics;
use benchsynth::pipeline::{self, Services};
use benchsynth::projection::{ProjectionConfig, ProjectionMethod};
use benchsynth::verify;

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Hand structured results to Python as plain dicts and lists.
fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_error)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn point_set(rows: &[Vec<f64>]) -> PyResult<PointSet> {
    PointSet::from_rows(rows).map_err(value_error)
}

fn search(brute: bool) -> Search {
    if brute {
        Search::BruteForce
    } else {
        Search::KdTree
    }
}

/// k-NN estimate of KL(candidate || baseline) in nats.
#[pyfunction]
#[pyo3(signature = (candidate, baseline, k=4, brute=false))]
fn kl_divergence(candidate: Vec<Vec<f64>>, baseline: Vec<Vec<f64>>, k: usize, brute: bool) -> PyResult<f64> {
    metrics::kl_divergence_with(&point_set(&candidate)?, &point_set(&baseline)?, k, search(brute)).map_err(value_error)
}

/// Kozachenko-Leonenko differential entropy in nats.
#[pyfunction]
#[pyo3(signature = (points, k=4, brute=false))]
fn differential_entropy(points: Vec<Vec<f64>>, k: usize, brute: bool) -> PyResult<f64> {
    metrics::differential_entropy_with(&point_set(&points)?, k, search(brute)).map_err(value_error)
}

/// Subsampled entropy over `trials` draws of `subsample` points.
#[pyfunction]
#[pyo3(signature = (points, subsample, trials=250, k=4, seed=0))]
fn diversity<'py>(py: Python<'py>, points: Vec<Vec<f64>>, subsample: usize, trials: usize, k: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let est = metrics::diversity_protocol(&[point_set(&points)?], subsample, trials, k, seed).map_err(value_error)?;
    to_py(py, &est)
}

fn projection_method(name: &str, reducer: Option<Vec<String>>, coordinates: Option<PathBuf>) -> PyResult<ProjectionMethod> {
    Ok(match name {
        "linear-pca" => ProjectionMethod::LinearPca,
        "random-projection" => ProjectionMethod::RandomProjection,
        "external-reducer" => ProjectionMethod::ExternalReducer {
            command: reducer.ok_or_else(|| value_error("external-reducer needs reducer=[...]"))?,
        },
        "precomputed-import" => ProjectionMethod::PrecomputedImport {
            path: coordinates.ok_or_else(|| value_error("precomputed-import needs coordinates=path"))?,
        },
        other => return Err(value_error(format!("unknown projection method {other:?}"))),
    })
}

/// Project datasets jointly and measure them. `datasets` is a list of
/// `(name, rows)`; for novelty the first entry is the baseline.
#[pyfunction]
#[pyo3(signature = (
    metric, datasets, k=4, dim=10, runs=10, method="random-projection", seed=0,
    subsample=None, trials=250, n_neighbors=80, min_dist=0.1, reducer=None, coordinates=None
))]
#[allow(clippy::too_many_arguments)]
fn measure<'py>(
    py: Python<'py>,
    metric: &str,
    datasets: Vec<(String, Vec<Vec<f64>>)>,
    k: usize,
    dim: usize,
    runs: usize,
    method: &str,
    seed: u64,
    subsample: Option<usize>,
    trials: usize,
    n_neighbors: usize,
    min_dist: f64,
    reducer: Option<Vec<String>>,
    coordinates: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let matrices: Vec<EmbeddingMatrix> = datasets
        .into_iter()
        .map(|(name, rows)| {
            let d = rows.first().map_or(0, Vec::len);
            let rows = rows
                .into_iter()
                .enumerate()
                .map(|(i, vector)| EmbeddingRow { id: format!("{name}-{i}"), vector })
                .collect();
            EmbeddingMatrix::new(name, "python", d, rows)
        })
        .collect();
    let settings = MeasureSettings {
        projection: ProjectionConfig {
            method: projection_method(method, reducer, coordinates)?,
            target_dim: dim,
            n_neighbors,
            min_dist,
            runs,
            seed,
        },
        k,
        subsample,
        trials,
        seed,
    };
    let reports = match metric {
        "novelty" => {
            let (baseline, candidates) = matrices.split_first().ok_or_else(|| value_error("no datasets"))?;
            measure_novelty(candidates, baseline, &settings)
        }
        "diversity" => measure_diversity(&matrices, &settings),
        other => return Err(value_error(format!("metric must be novelty or diversity, got {other:?}"))),
    }
    .map_err(value_error)?;
    to_py(py, &reports)
}

/// Embed statements with one of the offline providers.
#[pyfunction]
#[pyo3(signature = (texts, provider="bag-of-words", dim=256))]
fn embed(texts: Vec<String>, provider: &str, dim: usize) -> PyResult<Vec<Vec<f64>>> {
    let p: Box<dyn EmbeddingProvider> = match provider {
        "bag-of-words" => Box::new(BagOfWordsEmbedder::new(dim)),
        "hash" => Box::new(HashEmbedder::new(dim)),
        other => return Err(value_error(format!("unknown provider {other:?}"))),
    };
    p.embed(&texts).map_err(value_error)
}

/// Jaccard similarity of word-shingle sets.
#[pyfunction]
#[pyo3(signature = (a, b, width=3))]
fn jaccard(a: &str, b: &str, width: usize) -> f64 {
    dedup::jaccard(&dedup::shingle(a, width), &dedup::shingle(b, width))
}

/// MinHash-LSH near-duplicate filter. Returns retained indices and the
/// removal log.
#[pyfunction]
#[pyo3(signature = (texts, threshold=0.75, seed=1))]
fn deduplicate<'py>(py: Python<'py>, texts: Vec<String>, threshold: f64, seed: u64) -> PyResult<(Vec<usize>, Bound<'py, PyAny>)> {
    let ids: Vec<String> = (0..texts.len()).map(|i| i.to_string()).collect();
    let config = DedupConfig { threshold, seed, ..DedupConfig::default() };
    let (kept, log) = dedup::dedup_texts(&ids, &texts, &config).map_err(value_error)?;
    Ok((kept, to_py(py, &log)?))
}

/// Indices of the `keep` candidates least similar to any reference vector.
#[pyfunction]
fn kfn_select(candidates: Vec<Vec<f64>>, reference: Vec<Vec<f64>>, keep: usize) -> Vec<usize> {
    evolve::kfn_select(&candidates, &reference, keep)
}

/// Solution and tests from a tagged model response, or None.
#[pyfunction]
fn parse_response(text: &str) -> Option<(String, String)> {
    verify::parse_tagged_response(text)
}

#[pyfunction]
fn count_tests(tests: &str) -> usize {
    verify::count_tests(tests)
}

/// Records of a JSONL dataset as dicts.
#[pyfunction]
fn load_dataset<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let m = corpus::load_dataset(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
    to_py(py, &m.records)
}

/// Run the generation pipeline from a config file and write its artifacts
/// to `out`. Returns the run report.
#[pyfunction]
#[pyo3(signature = (config, seeds, out, seed=None))]
fn generate<'py>(py: Python<'py>, config: PathBuf, seeds: PathBuf, out: PathBuf, seed: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = PipelineConfig::load(&config).map_err(value_error)?;
    if let Some(s) = seed {
        cfg.evolve.seed = s;
    }
    let seeds = corpus::load_dataset(&seeds).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let gateway = cfg.build_gateway().map_err(value_error)?;
    let sandbox = cfg.sandbox.build();
    let embedder = if cfg.evolve.kfn_enabled { Some(cfg.embedding.build().map_err(value_error)?) } else { None };
    let services = Services {
        gateway: &gateway,
        sandbox: sandbox.as_ref(),
        embedder,
        checkpoint_dir: Some(out.join("checkpoints")),
    };
    let result = pipeline::generate(&cfg, &seeds, &services).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    pipeline::write_outputs(&result, &out, cfg.verify.include_failed).map_err(|e| PyIOError::new_err(e.to_string()))?;
    to_py(py, &result.report)
}

#[pymodule(name = "benchsynth")]
fn benchsynth_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(differential_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(diversity, m)?)?;
    m.add_function(wrap_pyfunction!(measure, m)?)?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(jaccard, m)?)?;
    m.add_function(wrap_pyfunction!(deduplicate, m)?)?;
    m.add_function(wrap_pyfunction!(kfn_select, m)?)?;
    m.add_function(wrap_pyfunction!(parse_response, m)?)?;
    m.add_function(wrap_pyfunction!(count_tests, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    Ok(())
}
