//! Sentence embeddings for problem statements.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::RwLock;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::DatasetManifest;
use crate::gateway::{http, ProviderError};
use crate::metrics::PointSet;

#[derive(Debug, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("embedding provider failed for {} statement(s) ({}): {message}", failed_ids.len(), preview(failed_ids))]
    Provider { failed_ids: Vec<String>, message: String },
    #[error("degenerate input: zero vector for {id}")]
    ZeroVector { id: String },
    #[error("empty statement for {id}")]
    EmptyStatement { id: String },
    #[error("provider returned {got} vectors of dim {dim:?} for a batch of {expected} (expected dim {expected_dim})")]
    Shape {
        expected: usize,
        got: usize,
        dim: Option<usize>,
        expected_dim: usize,
    },
    #[error("cache io: {0}")]
    Cache(String),
}

fn preview(ids: &[String]) -> String {
    let mut s = ids.iter().take(5).cloned().collect::<Vec<_>>().join(", ");
    if ids.len() > 5 {
        s.push_str(", ...");
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub id: String,
    pub vector: Vec<f64>,
}

/// Row-aligned embedding vectors for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    pub dataset_name: String,
    pub model_id: String,
    pub dim: usize,
    pub rows: Vec<EmbeddingRow>,
    pub unit_norm: bool,
}

impl EmbeddingMatrix {
    pub fn new(dataset_name: impl Into<String>, model_id: impl Into<String>, dim: usize, rows: Vec<EmbeddingRow>) -> Self {
        Self {
            dataset_name: dataset_name.into(),
            model_id: model_id.into(),
            dim,
            rows,
            unit_norm: false,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.rows.iter().map(|r| r.id.as_str())
    }

    pub fn points(&self) -> PointSet {
        let mut data = Vec::with_capacity(self.rows.len() * self.dim);
        for r in &self.rows {
            data.extend_from_slice(&r.vector);
        }
        PointSet::new(self.dim, data).expect("matrix rows match dim")
    }

    /// Check the unit-norm flag and row dimensions.
    pub fn check(&self) -> Result<(), String> {
        for r in &self.rows {
            if r.vector.len() != self.dim {
                return Err(format!("row {} has dim {} (expected {})", r.id, r.vector.len(), self.dim));
            }
            if self.unit_norm {
                let n = l2(&r.vector);
                if (n - 1.0).abs() > 1e-6 {
                    return Err(format!("row {} has norm {n} but matrix is flagged unit-norm", r.id));
                }
            }
        }
        Ok(())
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scale every row to unit L2 norm.
pub fn normalize(matrix: &EmbeddingMatrix) -> Result<EmbeddingMatrix, EmbeddingError> {
    let mut out = matrix.clone();
    for row in &mut out.rows {
        let n = l2(&row.vector);
        if n == 0.0 || !n.is_finite() {
            return Err(EmbeddingError::ZeroVector { id: row.id.clone() });
        }
        for x in &mut row.vector {
            *x /= n;
        }
    }
    out.unit_norm = true;
    Ok(out)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (l2(a) * l2(b))
}

pub trait EmbeddingProvider: Send + Sync {
    fn model_id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError>;
}

fn seed_from(parts: &[&str]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    h.finalize().into()
}

fn gaussian_vector(seed: [u8; 32], dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::from_seed(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = l2(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Offline provider: each statement maps to a seeded pseudo-random unit vector.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    model_id: String,
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { model_id: format!("hash-{dim}"), dim }
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        Ok(texts
            .iter()
            .map(|t| unit(gaussian_vector(seed_from(&[&self.model_id, t]), self.dim)))
            .collect())
    }
}

/// Offline provider where statements sharing words get similar vectors:
/// the sum of per-token pseudo-random directions, normalized.
#[derive(Debug, Clone)]
pub struct BagOfWordsEmbedder {
    model_id: String,
    dim: usize,
}

impl BagOfWordsEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { model_id: format!("bow-{dim}"), dim }
    }
}

impl EmbeddingProvider for BagOfWordsEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        Ok(texts
            .iter()
            .map(|t| {
                let mut acc = vec![0.0; self.dim];
                let lower = t.to_lowercase();
                let mut any = false;
                for tok in lower.split(|c: char| !c.is_alphanumeric()).filter(|s| !s.is_empty()) {
                    any = true;
                    for (a, x) in acc.iter_mut().zip(gaussian_vector(seed_from(&[&self.model_id, tok]), self.dim)) {
                        *a += x;
                    }
                }
                if !any {
                    acc = gaussian_vector(seed_from(&[&self.model_id, t]), self.dim);
                }
                unit(acc)
            })
            .collect())
    }
}

/// Remote embedding endpoint.
///
/// Request body: `{"model": id, "input": [text, ...]}`. Accepts either a bare
/// `[[f, ...], ...]` response or an OpenAI-style `{"data": [{"embedding": [...]}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpEmbedderConfig {
    pub url: String,
    pub model_id: String,
    pub dim: usize,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
}

fn default_timeout() -> f64 {
    60.0
}

pub struct HttpEmbedder {
    config: HttpEmbedderConfig,
}

impl HttpEmbedder {
    pub fn new(config: HttpEmbedderConfig) -> Self {
        Self { config }
    }
}

pub fn parse_embedding_response(resp: &Value) -> Option<Vec<Vec<f64>>> {
    let rows: &Vec<Value> = match resp {
        Value::Array(rows) => rows,
        Value::Object(map) => map.get("data")?.as_array()?,
        _ => return None,
    };
    rows.iter()
        .map(|row| {
            let arr = match row {
                Value::Array(a) => a,
                Value::Object(o) => o.get("embedding")?.as_array()?,
                _ => return None,
            };
            arr.iter().map(Value::as_f64).collect()
        })
        .collect()
}

impl EmbeddingProvider for HttpEmbedder {
    fn model_id(&self) -> &str {
        &self.config.model_id
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let key = http::api_key(self.config.api_key_env.as_deref())?;
        let body = json!({"model": self.config.model_id, "input": texts});
        let resp = http::post_json(
            &self.config.url,
            key.as_deref(),
            &body,
            Duration::from_secs_f64(self.config.timeout_s),
        )?;
        parse_embedding_response(&resp)
            .ok_or_else(|| ProviderError::fatal(format!("{}: unrecognized embedding response", self.config.url)))
    }
}

/// Content-addressed vector cache, in memory and optionally on disk.
///
/// Keys are hex SHA-256 digests of `(model id, statement)`; each on-disk
/// entry is `<dir>/<key>.json` holding a JSON array.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    dir: Option<PathBuf>,
    memory: RwLock<HashMap<String, Vec<f64>>>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| EmbeddingError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir: Some(dir), memory: RwLock::default() })
    }

    pub fn key(model_id: &str, statement: &str) -> String {
        hex::encode(seed_from(&[model_id, statement]))
    }

    pub fn get(&self, key: &str) -> Option<Vec<f64>> {
        if let Some(v) = self.memory.read().unwrap().get(key) {
            return Some(v.clone());
        }
        let path = self.dir.as_ref()?.join(format!("{key}.json"));
        let v: Vec<f64> = serde_json::from_str(&fs::read_to_string(path).ok()?).ok()?;
        self.memory.write().unwrap().insert(key.to_string(), v.clone());
        Some(v)
    }

    pub fn put(&self, key: &str, vector: &[f64]) -> Result<(), EmbeddingError> {
        if let Some(dir) = &self.dir {
            let final_path = dir.join(format!("{key}.json"));
            let tmp = dir.join(format!("{key}.{}.tmp", std::process::id()));
            let text = serde_json::to_string(vector).expect("vector serializes");
            fs::write(&tmp, text)
                .and_then(|_| fs::rename(&tmp, &final_path))
                .map_err(|e| EmbeddingError::Cache(format!("{}: {e}", final_path.display())))?;
        }
        self.memory.write().unwrap().insert(key.to_string(), vector.to_vec());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.memory.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbedOptions {
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    pub retry_delay: Duration,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_in_flight: 4,
            max_attempts: 3,
            retry_delay: Duration::from_millis(500),
        }
    }
}

fn embed_batch_with_retry(
    provider: &dyn EmbeddingProvider,
    texts: &[String],
    opts: &EmbedOptions,
) -> Result<Vec<Vec<f64>>, ProviderError> {
    let mut attempt = 0;
    loop {
        attempt += 1;
        match provider.embed(texts) {
            Err(e) if e.transient && attempt < opts.max_attempts => {
                std::thread::sleep(opts.retry_delay * attempt);
            }
            other => return other,
        }
    }
}

/// Embed `(id, text)` pairs, consulting and filling the cache.
pub fn embed_texts(
    dataset_name: &str,
    items: &[(String, String)],
    provider: &dyn EmbeddingProvider,
    cache: &EmbeddingCache,
    opts: &EmbedOptions,
) -> Result<EmbeddingMatrix, EmbeddingError> {
    let model = provider.model_id().to_string();
    let dim = provider.dim();
    if let Some((id, _)) = items.iter().find(|(_, t)| t.trim().is_empty()) {
        return Err(EmbeddingError::EmptyStatement { id: id.clone() });
    }

    let keys: Vec<String> = items.iter().map(|(_, t)| EmbeddingCache::key(&model, t)).collect();
    // unique uncached texts, first occurrence order
    let mut pending: Vec<(String, String)> = Vec::new();
    let mut pending_ids: HashMap<String, Vec<String>> = HashMap::new();
    for ((id, text), key) in items.iter().zip(&keys) {
        if cache.get(key).is_some() {
            continue;
        }
        let ids = pending_ids.entry(key.clone()).or_default();
        if ids.is_empty() {
            pending.push((key.clone(), text.clone()));
        }
        ids.push(id.clone());
    }

    let batches: Vec<&[(String, String)]> = pending.chunks(opts.batch_size.max(1)).collect();
    for group in batches.chunks(opts.max_in_flight.max(1)) {
        let results: Vec<Result<Vec<Vec<f64>>, ProviderError>> = std::thread::scope(|s| {
            let handles: Vec<_> = group
                .iter()
                .map(|batch| {
                    let texts: Vec<String> = batch.iter().map(|(_, t)| t.clone()).collect();
                    s.spawn(move || embed_batch_with_retry(provider, &texts, opts))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("embedding worker panicked")).collect()
        });
        for (batch, result) in group.iter().zip(results) {
            let failed = || -> Vec<String> {
                batch.iter().flat_map(|(k, _)| pending_ids[k].iter().cloned()).collect()
            };
            let vectors = result.map_err(|e| EmbeddingError::Provider { failed_ids: failed(), message: e.message })?;
            if vectors.len() != batch.len() || vectors.iter().any(|v| v.len() != dim) {
                return Err(EmbeddingError::Shape {
                    expected: batch.len(),
                    got: vectors.len(),
                    dim: vectors.iter().map(Vec::len).find(|&d| d != dim),
                    expected_dim: dim,
                });
            }
            for ((key, _), v) in batch.iter().zip(&vectors) {
                cache.put(key, v)?;
            }
        }
    }

    let rows = items
        .iter()
        .zip(&keys)
        .map(|((id, _), key)| EmbeddingRow {
            id: id.clone(),
            vector: cache.get(key).expect("cached above"),
        })
        .collect();
    normalize(&EmbeddingMatrix::new(dataset_name, model, dim, rows))
}

/// One L2-normalized vector per record statement.
pub fn embed_dataset(
    manifest: &DatasetManifest,
    provider: &dyn EmbeddingProvider,
    cache: &EmbeddingCache,
    opts: &EmbedOptions,
) -> Result<EmbeddingMatrix, EmbeddingError> {
    let items: Vec<(String, String)> = manifest
        .records
        .iter()
        .map(|r| (r.id.clone(), r.statement.clone()))
        .collect();
    embed_texts(&manifest.name, &items, provider, cache, opts)
}
