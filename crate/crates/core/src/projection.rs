//! Joint dimensionality reduction of several datasets' embeddings.
//!
//! Every run stacks all inputs into one point set, reduces it in a single
//! call, splits the result back by row counts and renormalizes each row.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::embedding::{normalize, EmbeddingError, EmbeddingMatrix, EmbeddingRow};

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("invalid projection config: {0}")]
    Config(String),
    #[error("inputs disagree: {0}")]
    Mismatch(String),
    #[error("coordinates missing for id {id} (dataset {dataset})")]
    MissingId { dataset: String, id: String },
    #[error("coordinate dimension mismatch for {id}: {got} vs {expected}")]
    DimensionMismatch { id: String, got: usize, expected: usize },
    #[error("external reducer {command:?} unavailable: {reason}. Use method linear-pca or precomputed coordinates instead")]
    ReducerUnavailable { command: String, reason: String },
    #[error("external reducer failed: {0}")]
    ReducerFailed(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProjectionMethod {
    /// Coordinates computed elsewhere (JSONL of `{id, vector}`).
    PrecomputedImport { path: PathBuf },
    /// Centered PCA; deterministic, so every run is identical.
    LinearPca,
    /// Gaussian random projection seeded per run.
    RandomProjection,
    /// Subprocess speaking the reducer JSON contract on stdin/stdout.
    ExternalReducer { command: Vec<String> },
}

impl ProjectionMethod {
    pub fn name(&self) -> &'static str {
        match self {
            ProjectionMethod::PrecomputedImport { .. } => "precomputed-import",
            ProjectionMethod::LinearPca => "linear-pca",
            ProjectionMethod::RandomProjection => "random-projection",
            ProjectionMethod::ExternalReducer { .. } => "external-reducer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub method: ProjectionMethod,
    pub target_dim: usize,
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub runs: usize,
    pub seed: u64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            method: ProjectionMethod::LinearPca,
            target_dim: 10,
            n_neighbors: 80,
            min_dist: 0.1,
            runs: 10,
            seed: 0,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<(), ProjectionError> {
        if self.target_dim < 2 {
            return Err(ProjectionError::Config(format!("target dim {} < 2", self.target_dim)));
        }
        if self.runs < 1 {
            return Err(ProjectionError::Config("runs must be >= 1".into()));
        }
        if self.n_neighbors < 2 {
            return Err(ProjectionError::Config(format!("n_neighbors {} < 2", self.n_neighbors)));
        }
        Ok(())
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        self.seed.wrapping_add(run as u64)
    }
}

/// Centered PCA onto the top `target` principal axes.
pub fn pca(points: &DMatrix<f64>, target: usize) -> Result<DMatrix<f64>, ProjectionError> {
    let (n, d) = points.shape();
    if target > d {
        return Err(ProjectionError::Config(format!("target dim {target} exceeds input dim {d}")));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, target));
    }
    let mean = points.row_mean();
    let mut centered = points.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut basis = DMatrix::zeros(d, target);
    for (j, &c) in order.iter().take(target).enumerate() {
        let mut v = eig.eigenvectors.column(c).into_owned();
        // fix the sign so the largest-magnitude entry is positive
        let pivot = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(1.0);
        if pivot < 0.0 {
            v = -v;
        }
        basis.set_column(j, &v);
    }
    Ok(centered * basis)
}

pub fn random_projection(points: &DMatrix<f64>, target: usize, seed: u64) -> DMatrix<f64> {
    let d = points.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (target as f64).sqrt();
    let r = DMatrix::from_fn(d, target, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    });
    points * r
}

#[derive(Serialize)]
struct ReducerRequest<'a> {
    points: &'a [Vec<f64>],
    n_neighbors: usize,
    min_dist: f64,
    dim: usize,
    seed: u64,
}

#[derive(Deserialize)]
struct ReducerResponse {
    points: Vec<Vec<f64>>,
}

/// Run the external reducer once.
pub fn run_external_reducer(
    command: &[String],
    points: &[Vec<f64>],
    config: &ProjectionConfig,
    seed: u64,
) -> Result<Vec<Vec<f64>>, ProjectionError> {
    let (prog, args) = command
        .split_first()
        .ok_or_else(|| ProjectionError::Config("external reducer command is empty".into()))?;
    let unavailable = |reason: String| ProjectionError::ReducerUnavailable { command: command.join(" "), reason };
    let mut child = Command::new(prog)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| unavailable(e.to_string()))?;
    let request = serde_json::to_vec(&ReducerRequest {
        points,
        n_neighbors: config.n_neighbors,
        min_dist: config.min_dist,
        dim: config.target_dim,
        seed,
    })
    .expect("request serializes");
    {
        let mut stdin = child.stdin.take().expect("stdin piped");
        stdin
            .write_all(&request)
            .map_err(|e| ProjectionError::ReducerFailed(format!("writing request: {e}")))?;
    }
    let out = child
        .wait_with_output()
        .map_err(|e| ProjectionError::ReducerFailed(e.to_string()))?;
    if !out.status.success() {
        let stderr = String::from_utf8_lossy(&out.stderr);
        return Err(ProjectionError::ReducerFailed(format!("exit {}: {}", out.status, stderr.trim())));
    }
    let resp: ReducerResponse = serde_json::from_slice(&out.stdout)
        .map_err(|e| ProjectionError::ReducerFailed(format!("bad response: {e}")))?;
    if resp.points.len() != points.len() || resp.points.iter().any(|p| p.len() != config.target_dim) {
        return Err(ProjectionError::ReducerFailed(format!(
            "expected {} points of dim {}",
            points.len(),
            config.target_dim
        )));
    }
    Ok(resp.points)
}

fn check_inputs(matrices: &[EmbeddingMatrix]) -> Result<(), ProjectionError> {
    if let Some(first) = matrices.first() {
        for m in matrices {
            if m.model_id != first.model_id {
                return Err(ProjectionError::Mismatch(format!(
                    "embedding models differ: {} vs {}",
                    first.model_id, m.model_id
                )));
            }
            if m.dim != first.dim {
                return Err(ProjectionError::Mismatch(format!("dims differ: {} vs {}", first.dim, m.dim)));
            }
        }
    }
    Ok(())
}

fn split_rows(
    inputs: &[EmbeddingMatrix],
    reduced: &[Vec<f64>],
    dim: usize,
    tag: &str,
) -> Result<Vec<EmbeddingMatrix>, ProjectionError> {
    let mut offset = 0;
    let mut out = Vec::with_capacity(inputs.len());
    for m in inputs {
        let rows = m
            .rows
            .iter()
            .zip(&reduced[offset..offset + m.len()])
            .map(|(r, v)| EmbeddingRow { id: r.id.clone(), vector: v.clone() })
            .collect();
        offset += m.len();
        let projected = EmbeddingMatrix::new(m.dataset_name.clone(), format!("{}|{tag}", m.model_id), dim, rows);
        out.push(normalize(&projected)?);
    }
    Ok(out)
}

/// Reduce all inputs together once per run. Returns `[run][dataset]`.
pub fn project_jointly(
    matrices: &[EmbeddingMatrix],
    config: &ProjectionConfig,
) -> Result<Vec<Vec<EmbeddingMatrix>>, ProjectionError> {
    config.validate()?;
    check_inputs(matrices)?;
    let tag = format!("{}-d{}", config.method.name(), config.target_dim);

    if let ProjectionMethod::PrecomputedImport { path } = &config.method {
        let ids: Vec<(String, Vec<String>)> = matrices
            .iter()
            .map(|m| (m.dataset_name.clone(), m.ids().map(str::to_owned).collect()))
            .collect();
        let runs = import_coordinates(path, &ids)?;
        return Ok(runs
            .into_iter()
            .map(|run| {
                run.into_iter()
                    .zip(matrices)
                    .map(|(mut m, src)| {
                        m.model_id = format!("{}|{tag}", src.model_id);
                        m
                    })
                    .collect()
            })
            .collect());
    }

    let rows: Vec<Vec<f64>> = matrices.iter().flat_map(|m| m.rows.iter().map(|r| r.vector.clone())).collect();
    let in_dim = matrices.first().map(|m| m.dim).unwrap_or(config.target_dim);
    let stacked = DMatrix::from_fn(rows.len(), in_dim, |i, j| rows[i][j]);
    let to_rows = |m: DMatrix<f64>| -> Vec<Vec<f64>> { m.row_iter().map(|r| r.iter().copied().collect()).collect() };

    match &config.method {
        ProjectionMethod::LinearPca => {
            let reduced = to_rows(pca(&stacked, config.target_dim)?);
            let once = split_rows(matrices, &reduced, config.target_dim, &tag)?;
            Ok(vec![once; config.runs])
        }
        ProjectionMethod::RandomProjection => (0..config.runs)
            .into_par_iter()
            .map(|r| {
                let reduced = to_rows(random_projection(&stacked, config.target_dim, config.run_seed(r)));
                split_rows(matrices, &reduced, config.target_dim, &tag)
            })
            .collect(),
        ProjectionMethod::ExternalReducer { command } => (0..config.runs)
            .into_par_iter()
            .map(|r| {
                let reduced = run_external_reducer(command, &rows, config, config.run_seed(r))?;
                split_rows(matrices, &reduced, config.target_dim, &tag)
            })
            .collect(),
        ProjectionMethod::PrecomputedImport { .. } => unreachable!("handled above"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateRow {
    pub id: String,
    pub vector: Vec<f64>,
    /// Disambiguates ids shared between datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(default)]
    pub run: usize,
}

/// Vectors keyed by (dataset, id).
type KeyedRows = HashMap<(Option<String>, String), Vec<f64>>;

/// Assemble renormalized matrices from a coordinates file. Returns
/// `[run][dataset]`; `datasets` pairs each dataset name with its ids in order.
pub fn import_coordinates(
    path: impl AsRef<Path>,
    datasets: &[(String, Vec<String>)],
) -> Result<Vec<Vec<EmbeddingMatrix>>, ProjectionError> {
    let path = path.as_ref();
    let io = |message: String| ProjectionError::Io { path: path.to_path_buf(), message };
    let text = fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
    let mut by_run: HashMap<usize, KeyedRows> = HashMap::new();
    let mut dim: Option<usize> = None;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: CoordinateRow = serde_json::from_str(line).map_err(|e| io(format!("line {}: {e}", n + 1)))?;
        let expected = *dim.get_or_insert(row.vector.len());
        if row.vector.len() != expected {
            return Err(ProjectionError::DimensionMismatch { id: row.id, got: row.vector.len(), expected });
        }
        by_run.entry(row.run).or_default().insert((row.dataset, row.id), row.vector);
    }
    let dim = dim.unwrap_or(0);
    let mut runs: Vec<usize> = by_run.keys().copied().collect();
    runs.sort_unstable();
    if runs.is_empty() {
        runs.push(0);
    }
    runs.iter()
        .map(|run| {
            let table = by_run.get(run);
            datasets
                .iter()
                .map(|(name, ids)| {
                    let rows = ids
                        .iter()
                        .map(|id| {
                            let v = table
                                .and_then(|t| t.get(&(Some(name.clone()), id.clone())).or_else(|| t.get(&(None, id.clone()))))
                                .ok_or_else(|| ProjectionError::MissingId { dataset: name.clone(), id: id.clone() })?;
                            Ok(EmbeddingRow { id: id.clone(), vector: v.clone() })
                        })
                        .collect::<Result<Vec<_>, ProjectionError>>()?;
                    Ok(normalize(&EmbeddingMatrix::new(name.clone(), "imported", dim, rows))?)
                })
                .collect()
        })
        .collect()
}

/// Write `[run][dataset]` coordinates in the import format.
pub fn export_coordinates(runs: &[Vec<EmbeddingMatrix>], path: impl AsRef<Path>) -> Result<(), ProjectionError> {
    let path = path.as_ref();
    let mut out = String::new();
    for (run, mats) in runs.iter().enumerate() {
        for m in mats {
            for r in &m.rows {
                let row = json!({"id": r.id, "vector": r.vector, "dataset": m.dataset_name, "run": run});
                out.push_str(&row.to_string());
                out.push('\n');
            }
        }
    }
    fs::write(path, out).map_err(|e| ProjectionError::Io { path: path.to_path_buf(), message: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::squared_distance;
    use rand::Rng;

    fn matrix(name: &str, n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..n)
            .map(|i| EmbeddingRow {
                id: format!("{name}-{i}"),
                vector: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        normalize(&EmbeddingMatrix::new(name, "model", d, rows)).unwrap()
    }

    #[test]
    fn two_datasets_to_dim_10() {
        let a = matrix("a", 60, 768, 1);
        let b = matrix("b", 40, 768, 2);
        let cfg = ProjectionConfig { runs: 2, ..ProjectionConfig::default() };
        let runs = project_jointly(&[a.clone(), b.clone()], &cfg).unwrap();
        assert_eq!(runs.len(), 2);
        for run in &runs {
            assert_eq!((run[0].len(), run[1].len()), (60, 40));
            assert_eq!(run[0].dataset_name, "a");
            assert_eq!(run[1].rows[0].id, "b-0");
            for m in run {
                assert_eq!(m.dim, 10);
                m.check().unwrap();
                assert!(m.unit_norm);
            }
        }
    }

    #[test]
    fn full_rank_pca_preserves_distances() {
        let a = matrix("a", 30, 6, 3);
        let rows: Vec<Vec<f64>> = a.rows.iter().map(|r| r.vector.clone()).collect();
        let x = DMatrix::from_fn(30, 6, |i, j| rows[i][j]);
        let y = pca(&x, 6).unwrap();
        for i in 0..30 {
            for j in 0..i {
                let before = squared_distance(&rows[i], &rows[j]).sqrt();
                let yi: Vec<f64> = y.row(i).iter().copied().collect();
                let yj: Vec<f64> = y.row(j).iter().copied().collect();
                let after = squared_distance(&yi, &yj).sqrt();
                assert!((before - after).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn full_rank_pca_on_centered_data_preserves_cosines() {
        // rows come in +/- pairs, so the mean is exactly zero and PCA is a pure rotation
        let base = matrix("a", 20, 5, 4);
        let mut rows = Vec::new();
        for r in &base.rows {
            rows.push(r.clone());
            rows.push(EmbeddingRow { id: format!("{}-neg", r.id), vector: r.vector.iter().map(|v| -v).collect() });
        }
        let m = EmbeddingMatrix { rows, ..base };
        let cfg = ProjectionConfig { target_dim: 5, runs: 1, ..ProjectionConfig::default() };
        let out = &project_jointly(std::slice::from_ref(&m), &cfg).unwrap()[0][0];
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        for i in 0..m.len() {
            for j in 0..i {
                let before = dot(&m.rows[i].vector, &m.rows[j].vector);
                let after = dot(&out.rows[i].vector, &out.rows[j].vector);
                assert!((before - after).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn random_projection_runs_differ() {
        let a = matrix("a", 50, 64, 5);
        let cfg = ProjectionConfig { method: ProjectionMethod::RandomProjection, runs: 3, ..ProjectionConfig::default() };
        let runs = project_jointly(std::slice::from_ref(&a), &cfg).unwrap();
        assert_ne!(runs[0][0].rows[0].vector, runs[1][0].rows[0].vector);
        let again = project_jointly(&[a], &cfg).unwrap();
        assert_eq!(runs, again);
    }

    #[test]
    fn rejects_mixed_models_and_bad_config() {
        let a = matrix("a", 10, 8, 1);
        let mut b = matrix("b", 10, 8, 2);
        b.model_id = "other".into();
        assert!(matches!(project_jointly(&[a.clone(), b], &ProjectionConfig::default()), Err(ProjectionError::Mismatch(_))));
        let cfg = ProjectionConfig { target_dim: 1, ..ProjectionConfig::default() };
        assert!(project_jointly(std::slice::from_ref(&a), &cfg).is_err());
        let cfg = ProjectionConfig { target_dim: 9, ..ProjectionConfig::default() };
        assert!(project_jointly(&[a], &cfg).is_err());
    }

    #[test]
    fn missing_reducer_points_to_alternatives() {
        let a = matrix("a", 10, 8, 1);
        let cfg = ProjectionConfig {
            method: ProjectionMethod::ExternalReducer { command: vec!["/nonexistent/reducer".into()] },
            target_dim: 3,
            ..ProjectionConfig::default()
        };
        let err = project_jointly(&[a], &cfg).unwrap_err();
        assert!(err.to_string().contains("linear-pca"), "{err}");
    }

    #[test]
    fn coordinate_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("coords.jsonl");
        let a = matrix("a", 12, 16, 1);
        let b = matrix("b", 8, 16, 2);
        let cfg = ProjectionConfig { target_dim: 4, runs: 1, ..ProjectionConfig::default() };
        let runs = project_jointly(&[a.clone(), b.clone()], &cfg).unwrap();
        export_coordinates(&runs, &path).unwrap();
        let ids = vec![
            ("a".to_string(), a.ids().map(str::to_owned).collect::<Vec<_>>()),
            ("b".to_string(), b.ids().map(str::to_owned).collect::<Vec<_>>()),
        ];
        let back = import_coordinates(&path, &ids).unwrap();
        assert_eq!(back.len(), 1);
        for (x, y) in back[0].iter().zip(&runs[0]) {
            assert_eq!(x.rows.len(), y.rows.len());
            for (p, q) in x.rows.iter().zip(&y.rows) {
                for (u, v) in p.vector.iter().zip(&q.vector) {
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
        let mut missing = ids.clone();
        missing[1].1.push("b-999".into());
        match import_coordinates(&path, &missing) {
            Err(ProjectionError::MissingId { id, .. }) => assert_eq!(id, "b-999"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn import_rejects_mixed_dims() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(&path, "{\"id\":\"a\",\"vector\":[1,0]}\n{\"id\":\"b\",\"vector\":[1,0,0]}\n").unwrap();
        assert!(matches!(
            import_coordinates(&path, &[("d".into(), vec!["a".into()])]),
            Err(ProjectionError::DimensionMismatch { .. })
        ));
    }
}
