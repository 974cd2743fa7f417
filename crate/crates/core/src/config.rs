//! Pipeline configuration file: TOML with one section per module.
//!
//! ```toml
//! [evolve]
//! preset = "mbpp-guided"   # optional; keys below override it
//! total_problems = 40
//!
//! [llm]
//! provider = "mock"
//! script = "mock.json"
//! ```
//!
//! Unknown keys are rejected. Relative paths resolve against the directory
//! of the config file.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dedup::DedupConfig;
use crate::embedding::{BagOfWordsEmbedder, EmbeddingCache, EmbeddingError, EmbeddingProvider, HashEmbedder, HttpEmbedder, HttpEmbedderConfig};
use crate::evolve::GenerationConfig;
use crate::gateway::{CompletionProvider, Gateway, HttpProvider, MockProvider, ProviderConfig, RetryPolicy, SyntheticProvider};
use crate::sandbox::{AssumePassSandbox, RunnerClient, Sandbox};
use crate::verify::DEFAULT_TIMEOUT_S;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// Model answering solution/feedback prompts; defaults to the generator.
    pub model: Option<String>,
    pub timeout_s: f64,
    /// Also export non-passing problems next to the final dataset.
    pub include_failed: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { model: None, timeout_s: DEFAULT_TIMEOUT_S, include_failed: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessConfig {
    pub rephrase: bool,
    pub label_topics: bool,
    pub rephrase_model: Option<String>,
    pub topic_model: String,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self { rephrase: true, label_topics: true, rephrase_model: None, topic_model: "gpt-4o-mini".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LlmProvider {
    /// Scripted responses from `script`.
    Mock,
    /// Offline answers derived from the prompt text.
    Synthetic,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmConfig {
    pub provider: LlmProvider,
    /// Mock script (JSON) for `provider = "mock"`.
    pub script: Option<PathBuf>,
    pub endpoint: String,
    pub api_key_env: Option<String>,
    pub timeout_s: f64,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    pub requests_per_second: Option<f64>,
    pub usage_log: Option<PathBuf>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            provider: LlmProvider::Mock,
            script: None,
            endpoint: "https://api.openai.com/v1".into(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            timeout_s: 120.0,
            max_in_flight: 8,
            max_attempts: 5,
            requests_per_second: None,
            usage_log: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    Hash,
    BagOfWords,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    pub provider: EmbeddingKind,
    pub dim: usize,
    pub url: Option<String>,
    pub model_id: Option<String>,
    pub api_key_env: Option<String>,
    pub cache_dir: Option<PathBuf>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self { provider: EmbeddingKind::BagOfWords, dim: 256, url: None, model_id: None, api_key_env: None, cache_dir: None }
    }
}

impl EmbeddingConfig {
    pub fn build(&self) -> Result<Arc<dyn EmbeddingProvider>, ConfigError> {
        Ok(match self.provider {
            EmbeddingKind::Hash => Arc::new(HashEmbedder::new(self.dim)),
            EmbeddingKind::BagOfWords => Arc::new(BagOfWordsEmbedder::new(self.dim)),
            EmbeddingKind::Http => {
                let url = self.url.clone().ok_or_else(|| ConfigError::Invalid("embedding.url is required for http".into()))?;
                let model_id = self
                    .model_id
                    .clone()
                    .ok_or_else(|| ConfigError::Invalid("embedding.model_id is required for http".into()))?;
                Arc::new(HttpEmbedder::new(HttpEmbedderConfig {
                    url,
                    model_id,
                    dim: self.dim,
                    api_key_env: self.api_key_env.clone(),
                    timeout_s: 60.0,
                }))
            }
        })
    }

    pub fn cache(&self) -> Result<EmbeddingCache, EmbeddingError> {
        match &self.cache_dir {
            Some(dir) => EmbeddingCache::on_disk(dir),
            None => Ok(EmbeddingCache::in_memory()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SandboxKind {
    /// External runner process speaking JSON lines.
    Runner,
    /// Reports every `test_*` function as passing without running anything.
    /// Only useful for dry runs of the plumbing.
    AssumePass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SandboxConfig {
    pub kind: SandboxKind,
    pub command: Vec<String>,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self { kind: SandboxKind::Runner, command: vec!["python3".into(), "-m".into(), "sandbox_runner".into()] }
    }
}

impl SandboxConfig {
    pub fn build(&self) -> Arc<dyn Sandbox> {
        match self.kind {
            SandboxKind::Runner => Arc::new(RunnerClient::new(self.command.clone())),
            SandboxKind::AssumePass => Arc::new(AssumePassSandbox),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub evolve: GenerationConfig,
    pub dedup: DedupConfig,
    pub verify: VerifyConfig,
    pub postprocess: PostprocessConfig,
    pub llm: LlmConfig,
    pub embedding: EmbeddingConfig,
    pub sandbox: SandboxConfig,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(toml::Value::Table(evolve)) = table.get_mut("evolve") {
            if let Some(preset) = evolve.remove("preset") {
                let name = preset.as_str().ok_or_else(|| ConfigError::Invalid("evolve.preset must be a string".into()))?;
                let base = GenerationConfig::preset(name).ok_or_else(|| ConfigError::UnknownPreset(name.into()))?;
                let toml::Value::Table(mut merged) =
                    toml::Value::try_from(&base).map_err(|e| ConfigError::Invalid(e.to_string()))?
                else {
                    unreachable!("config serializes to a table")
                };
                merged.remove("dedup");
                for (k, v) in std::mem::take(evolve) {
                    merged.insert(k, v);
                }
                *evolve = merged;
            }
        }
        let mut config: PipelineConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
        config.evolve.dedup = config.dedup;
        config.evolve.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Read { path: path.into(), message: e.to_string() })?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(inner) = p.as_mut() {
                if inner.is_relative() {
                    *inner = base.join(&*inner);
                }
            }
        };
        resolve(&mut config.llm.script);
        resolve(&mut config.llm.usage_log);
        resolve(&mut config.embedding.cache_dir);
        Ok(config)
    }

    /// Hex SHA-256 over the whole configuration.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn verify_model(&self) -> String {
        self.verify.model.clone().unwrap_or_else(|| self.evolve.generator_model.clone())
    }

    pub fn rephrase_model(&self) -> String {
        self.postprocess.rephrase_model.clone().unwrap_or_else(|| self.evolve.generator_model.clone())
    }

    pub fn build_gateway(&self) -> Result<Gateway, ConfigError> {
        let provider: Arc<dyn CompletionProvider> = match self.llm.provider {
            LlmProvider::Mock => {
                let path = self.llm.script.as_ref().ok_or_else(|| ConfigError::Invalid("llm.script is required for the mock provider".into()))?;
                Arc::new(MockProvider::load(path).map_err(|m| ConfigError::Read { path: path.clone(), message: m })?)
            }
            LlmProvider::Synthetic => Arc::new(SyntheticProvider),
            LlmProvider::Http => Arc::new(HttpProvider::new(ProviderConfig {
                endpoint: self.llm.endpoint.clone(),
                model_id: self.evolve.generator_model.clone(),
                api_key_env: self.llm.api_key_env.clone(),
                timeout_s: self.llm.timeout_s,
            })),
        };
        let retry = RetryPolicy { max_attempts: self.llm.max_attempts.max(1), ..RetryPolicy::default() };
        let retry = if self.llm.provider != LlmProvider::Http {
            RetryPolicy { base_delay: Duration::ZERO, ..retry }
        } else {
            retry
        };
        let mut gw = Gateway::new(provider).with_retry(retry).with_in_flight_limit(self.llm.max_in_flight.max(1));
        if let Some(rps) = self.llm.requests_per_second {
            gw = gw.with_rate_limit(rps);
        }
        if let Some(path) = &self.llm.usage_log {
            gw = gw.with_usage_log(path).map_err(|e| ConfigError::Read { path: path.clone(), message: e.to_string() })?;
        }
        Ok(gw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolve::Difficulty;

    #[test]
    fn preset_with_overrides() {
        let c = PipelineConfig::parse(
            r#"
            [evolve]
            preset = "mbpp-hard-guided"
            total_problems = 40
            colonies = 2

            [dedup]
            threshold = 0.8
            "#,
        )
        .unwrap();
        assert_eq!(c.evolve.total_problems, 40);
        assert_eq!(c.evolve.colonies, 2);
        assert_eq!((c.evolve.colony_seed_size, c.evolve.crossover_outputs, c.evolve.crossover_batch, c.evolve.feedback_iterations), (15, 3, 4, 3));
        assert!(c.evolve.kfn_enabled);
        assert_eq!(c.evolve.mutation_difficulties, vec![Difficulty::Harder]);
        assert_eq!(c.evolve.dedup.threshold, 0.8);
    }

    #[test]
    fn guided_preset_file_matches_preset() {
        let c = PipelineConfig::parse("[evolve]\npreset = \"mbpp-guided\"\n").unwrap();
        assert_eq!(c.evolve, GenerationConfig::preset("mbpp-guided").unwrap());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::parse("[evolve]\ntotal = 3\n").is_err());
        assert!(PipelineConfig::parse("[nonsense]\na = 1\n").is_err());
        assert!(PipelineConfig::parse("[evolve]\ndedup = {}\n").is_err());
        assert!(matches!(PipelineConfig::parse("[evolve]\npreset = \"x\"\n"), Err(ConfigError::UnknownPreset(_))));
        assert!(PipelineConfig::parse("[evolve]\ncrossover_batch = 1\n").is_err());
    }

    #[test]
    fn fingerprint_changes_with_any_section() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.verify.timeout_s = 3.0;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[llm]\nscript = \"mock.json\"\n[embedding]\ncache_dir = \"cache\"\n").unwrap();
        let c = PipelineConfig::load(&path).unwrap();
        assert_eq!(c.llm.script.unwrap(), dir.path().join("mock.json"));
        assert_eq!(c.embedding.cache_dir.unwrap(), dir.path().join("cache"));
    }
}
