//! Completion client shared by every generator call in the pipeline.
//!
//! The [`Gateway`] wraps a [`CompletionProvider`] with bounded retries,
//! an in-flight limit, an optional minimum spacing between calls, and a
//! usage log. All network traffic in the crate goes through [`http`].

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

/// Purpose of a completion call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Mutation,
    Crossover,
    Solution,
    Feedback,
    Postprocess,
    Topic,
    Evaluate,
}

impl Tag {
    pub fn default_temperature(self) -> f64 {
        match self {
            Tag::Mutation | Tag::Crossover | Tag::Solution | Tag::Feedback => 0.7,
            Tag::Postprocess | Tag::Topic | Tag::Evaluate => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Mutation => "mutation",
            Tag::Crossover => "crossover",
            Tag::Solution => "solution",
            Tag::Feedback => "feedback",
            Tag::Postprocess => "postprocess",
            Tag::Topic => "topic",
            Tag::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub model_id: String,
    pub temperature: f64,
    pub max_output: u32,
    pub tag: Tag,
}

impl CompletionRequest {
    pub fn new(tag: Tag, model_id: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            model_id: model_id.into(),
            temperature: tag.default_temperature(),
            max_output: 2048,
            tag,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Completion {
    /// Completion with whitespace-token usage estimates.
    pub fn estimated(prompt: &str, text: String) -> Self {
        Self {
            prompt_tokens: prompt.split_whitespace().count() as u64,
            completion_tokens: text.split_whitespace().count() as u64,
            text,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("{message}")]
pub struct ProviderError {
    pub message: String,
    /// Worth retrying (rate limit, 5xx, transport).
    pub transient: bool,
}

impl ProviderError {
    pub fn transient(message: impl Into<String>) -> Self {
        Self { message: message.into(), transient: true }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        Self { message: message.into(), transient: false }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("invalid request ({tag:?}): {reason}")]
    InvalidRequest { tag: Tag, reason: String },
    #[error("completion failed for {tag:?} [{context}] after {attempts} attempt(s): {message}")]
    Exhausted {
        tag: Tag,
        context: String,
        attempts: u32,
        message: String,
    },
}

pub trait CompletionProvider: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, ProviderError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self { max_attempts: 1, ..Self::default() }
    }

    pub fn delay_for(&self, attempt: u32) -> Duration {
        let factor = 1u32 << attempt.saturating_sub(1).min(16);
        (self.base_delay * factor).min(self.max_delay)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub tag: Tag,
    pub model_id: String,
    pub context: String,
    pub attempts: u32,
    pub ok: bool,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub calls: u64,
    pub failed_calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

struct InFlight {
    limit: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut n = self.current.lock().unwrap();
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        InFlightGuard { owner: self }
    }
}

struct InFlightGuard<'a> {
    owner: &'a InFlight,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.owner.current.lock().unwrap() -= 1;
        self.owner.freed.notify_one();
    }
}

/// Thread-safe completion client.
pub struct Gateway {
    provider: Arc<dyn CompletionProvider>,
    retry: RetryPolicy,
    in_flight: InFlight,
    min_interval: Option<Duration>,
    next_slot: Mutex<Option<Instant>>,
    usage: Mutex<Vec<UsageRecord>>,
    log: Option<Mutex<fs::File>>,
}

impl Gateway {
    pub fn new(provider: Arc<dyn CompletionProvider>) -> Self {
        Self {
            provider,
            retry: RetryPolicy::default(),
            in_flight: InFlight {
                limit: 8,
                current: Mutex::new(0),
                freed: Condvar::new(),
            },
            min_interval: None,
            next_slot: Mutex::new(None),
            usage: Mutex::new(Vec::new()),
            log: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_in_flight_limit(mut self, limit: usize) -> Self {
        self.in_flight.limit = limit.max(1);
        self
    }

    /// Space call starts at least `1/rps` seconds apart.
    pub fn with_rate_limit(mut self, requests_per_second: f64) -> Self {
        if requests_per_second > 0.0 {
            self.min_interval = Some(Duration::from_secs_f64(1.0 / requests_per_second));
        }
        self
    }

    /// Append one JSON line per call to `path`.
    pub fn with_usage_log(mut self, path: impl AsRef<Path>) -> std::io::Result<Self> {
        let f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        self.log = Some(Mutex::new(f));
        Ok(self)
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        self.complete_for(request, "")
    }

    /// Like [`Gateway::complete`], with a context label (usually a problem id)
    /// carried into errors and the usage log.
    pub fn complete_for(&self, request: &CompletionRequest, context: &str) -> Result<String, GatewayError> {
        if request.prompt.is_empty() {
            return Err(GatewayError::InvalidRequest { tag: request.tag, reason: "empty prompt".into() });
        }
        if request.temperature.is_nan() || request.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest {
                tag: request.tag,
                reason: format!("temperature {} < 0", request.temperature),
            });
        }

        let _slot = self.in_flight.acquire();
        let started = Instant::now();
        let mut attempts = 0;
        let result = loop {
            attempts += 1;
            self.wait_for_rate_slot();
            match self.provider.complete(request) {
                Ok(c) => break Ok(c),
                Err(e) if e.transient && attempts < self.retry.max_attempts => {
                    log::debug!("transient {:?} failure (attempt {attempts}): {}", request.tag, e.message);
                    std::thread::sleep(self.retry.delay_for(attempts));
                }
                Err(e) => break Err(e),
            }
        };

        let record = UsageRecord {
            tag: request.tag,
            model_id: request.model_id.clone(),
            context: context.to_string(),
            attempts,
            ok: result.is_ok(),
            prompt_tokens: result.as_ref().map(|c| c.prompt_tokens).unwrap_or(0),
            completion_tokens: result.as_ref().map(|c| c.completion_tokens).unwrap_or(0),
            elapsed_ms: started.elapsed().as_millis() as u64,
        };
        if let Some(log) = &self.log {
            let line = serde_json::to_string(&record).expect("usage record serializes");
            if let Err(e) = writeln!(log.lock().unwrap(), "{line}") {
                log::warn!("usage log write failed: {e}");
            }
        }
        self.usage.lock().unwrap().push(record);

        result.map(|c| c.text).map_err(|e| GatewayError::Exhausted {
            tag: request.tag,
            context: context.to_string(),
            attempts,
            message: e.message,
        })
    }

    fn wait_for_rate_slot(&self) {
        let Some(interval) = self.min_interval else { return };
        let wait = {
            let mut next = self.next_slot.lock().unwrap();
            let now = Instant::now();
            let start = match *next {
                Some(t) if t > now => t,
                _ => now,
            };
            *next = Some(start + interval);
            start - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }

    pub fn usage_records(&self) -> Vec<UsageRecord> {
        self.usage.lock().unwrap().clone()
    }

    pub fn usage_totals(&self) -> UsageTotals {
        let records = self.usage.lock().unwrap();
        let mut t = UsageTotals::default();
        for r in records.iter() {
            t.calls += 1;
            t.failed_calls += u64::from(!r.ok);
            t.prompt_tokens += r.prompt_tokens;
            t.completion_tokens += r.completion_tokens;
        }
        t
    }

    /// Number of calls made with the given tag.
    pub fn call_count(&self, tag: Tag) -> usize {
        self.usage.lock().unwrap().iter().filter(|r| r.tag == tag).count()
    }
}

/// Provider backed by a closure; handy for deterministic test doubles.
pub struct FnProvider<F>(pub F);

impl<F> CompletionProvider for FnProvider<F>
where
    F: Fn(&CompletionRequest) -> Result<String, ProviderError> + Send + Sync,
{
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, ProviderError> {
        (self.0)(request).map(|text| Completion::estimated(&request.prompt, text))
    }
}

/// What the mock does when no rule matches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unmatched {
    #[default]
    Error,
    /// Return the prompt itself.
    Echo,
}

/// One mock rule. A rule with neither `ordinal`, `exact` nor `contains`
/// is a queue entry for its tag.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<Tag>,
    /// Zero-based index of the call among calls with the same tag.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ordinal: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    /// Successive responses; the last one repeats once exhausted.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub responses: Vec<String>,
}

impl MockRule {
    fn texts(&self) -> Vec<String> {
        let mut v: Vec<String> = self.response.iter().cloned().collect();
        v.extend(self.responses.iter().cloned());
        v
    }

    fn is_queue(&self) -> bool {
        self.ordinal.is_none() && self.exact.is_none() && self.contains.is_none()
    }

    fn tag_matches(&self, tag: Tag) -> bool {
        self.tag.is_none_or(|t| t == tag)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub unmatched: Unmatched,
    #[serde(default)]
    pub rules: Vec<MockRule>,
}

#[derive(Default)]
struct MockState {
    tag_calls: HashMap<Tag, usize>,
    rule_hits: HashMap<usize, usize>,
    queues: HashMap<Option<Tag>, VecDeque<String>>,
}

/// Scripted deterministic provider.
pub struct MockProvider {
    script: MockScript,
    state: Mutex<MockState>,
}

impl MockProvider {
    pub fn new(script: MockScript) -> Self {
        let mut state = MockState::default();
        for r in script.rules.iter().filter(|r| r.is_queue()) {
            state.queues.entry(r.tag).or_default().extend(r.texts());
        }
        Self { script, state: Mutex::new(state) }
    }

    /// Queue of responses returned in order regardless of tag.
    pub fn queue<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(MockScript {
            unmatched: Unmatched::Error,
            rules: vec![MockRule {
                responses: responses.into_iter().map(Into::into).collect(),
                ..MockRule::default()
            }],
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, String> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let script: MockScript = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(Self::new(script))
    }

    fn respond(&self, req: &CompletionRequest) -> Result<String, ProviderError> {
        let mut st = self.state.lock().unwrap();
        let ordinal = {
            let n = st.tag_calls.entry(req.tag).or_default();
            let cur = *n;
            *n += 1;
            cur
        };
        let rules = &self.script.rules;
        let pick = rules
            .iter()
            .position(|r| r.tag_matches(req.tag) && r.ordinal == Some(ordinal))
            .or_else(|| {
                rules.iter().position(|r| {
                    r.ordinal.is_none() && r.tag_matches(req.tag) && r.exact.as_deref() == Some(req.prompt.as_str())
                })
            })
            .or_else(|| {
                rules.iter().position(|r| {
                    r.ordinal.is_none()
                        && r.exact.is_none()
                        && r.tag_matches(req.tag)
                        && r.contains.as_deref().is_some_and(|c| req.prompt.contains(c))
                })
            });
        if let Some(i) = pick {
            let texts = rules[i].texts();
            let hit = st.rule_hits.entry(i).or_default();
            let text = texts.get((*hit).min(texts.len().saturating_sub(1))).cloned();
            *hit += 1;
            return text.ok_or_else(|| ProviderError::fatal(format!("mock rule {i} has no response")));
        }
        for key in [Some(req.tag), None] {
            if let Some(text) = st.queues.get_mut(&key).and_then(VecDeque::pop_front) {
                return Ok(text);
            }
        }
        match self.script.unmatched {
            Unmatched::Echo => Ok(req.prompt.clone()),
            Unmatched::Error => Err(ProviderError::fatal(format!(
                "mock script has no response for {} call #{ordinal}",
                req.tag.as_str()
            ))),
        }
    }
}

impl CompletionProvider for MockProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, ProviderError> {
        self.respond(request).map(|t| Completion::estimated(&request.prompt, t))
    }
}

/// Wraps a provider and keeps every exchange for later replay.
pub struct RecordingProvider {
    inner: Arc<dyn CompletionProvider>,
    exchanges: Mutex<Vec<(Tag, String, String)>>,
}

impl RecordingProvider {
    pub fn new(inner: Arc<dyn CompletionProvider>) -> Self {
        Self { inner, exchanges: Mutex::new(Vec::new()) }
    }

    /// Script answering each recorded prompt with its recorded responses, in order.
    pub fn to_script(&self) -> MockScript {
        let ex = self.exchanges.lock().unwrap();
        let mut rules: Vec<MockRule> = Vec::new();
        let mut by_key: HashMap<(Tag, String), usize> = HashMap::new();
        for (tag, prompt, response) in ex.iter() {
            match by_key.get(&(*tag, prompt.clone())) {
                Some(&i) => rules[i].responses.push(response.clone()),
                None => {
                    by_key.insert((*tag, prompt.clone()), rules.len());
                    rules.push(MockRule {
                        tag: Some(*tag),
                        exact: Some(prompt.clone()),
                        responses: vec![response.clone()],
                        ..MockRule::default()
                    });
                }
            }
        }
        MockScript { unmatched: Unmatched::Error, rules }
    }

    pub fn save_script(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(&self.to_script()).expect("script serializes");
        fs::write(path, text)
    }
}

impl CompletionProvider for RecordingProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, ProviderError> {
        let out = self.inner.complete(request)?;
        self.exchanges
            .lock()
            .unwrap()
            .push((request.tag, request.prompt.clone(), out.text.clone()));
        Ok(out)
    }
}

/// Offline provider whose answers are a pure function of the prompt.
/// Generated statements are assembled from small word lists, solutions are
/// an identity function with matching tests, so a full run needs no network
/// and is reproducible regardless of call order.
pub struct SyntheticProvider;

const SYN_OPS: [&str; 16] = [
    "sorts", "reverses", "counts", "filters", "groups", "merges", "rotates", "compresses",
    "deduplicates", "partitions", "flattens", "searches", "sums", "ranks", "validates", "splits",
];
const SYN_SHAPES: [&str; 12] = [
    "list", "string", "matrix", "tree", "graph", "dictionary", "tuple", "stack", "queue", "interval set", "heap", "linked list",
];
const SYN_ITEMS: [&str; 12] = [
    "integers", "words", "dates", "coordinates", "prices", "scores", "names", "edges", "digits", "tokens", "intervals", "records",
];
const SYN_RULES: [&str; 16] = [
    "in linear time", "without extra memory", "keeping the original order", "ignoring case",
    "modulo a prime", "with ties broken by index", "from both ends", "in a single pass",
    "using recursion", "with a sliding window", "under a size limit", "for every prefix",
    "for every suffix", "by frequency", "by parity", "after removing negatives",
];
const SYN_TOPICS: [&str; 6] = ["Array", "String", "Hash Table", "Math", "Sorting", "Two Pointers"];

impl SyntheticProvider {
    fn statement(seed: &[u8]) -> String {
        format!(
            "Write a function that {} a {} of {} {}, returning the result as a new {}.",
            SYN_OPS[seed[0] as usize % SYN_OPS.len()],
            SYN_SHAPES[seed[1] as usize % SYN_SHAPES.len()],
            SYN_ITEMS[seed[2] as usize % SYN_ITEMS.len()],
            SYN_RULES[seed[3] as usize % SYN_RULES.len()],
            SYN_SHAPES[seed[4] as usize % SYN_SHAPES.len()],
        )
    }

    pub fn answer(request: &CompletionRequest) -> String {
        use sha2::{Digest, Sha256};
        let seed = Sha256::digest(request.prompt.as_bytes());
        let solution = "def solution(x):\n    return x\n";
        match request.tag {
            Tag::Mutation | Tag::Crossover => Self::statement(&seed),
            Tag::Solution | Tag::Feedback => format!(
                "<|Solution Begin|>\n{solution}<|Solution End|>\n<|Test Begin|>\ndef test_identity_int():\n    assert solution({}) == {0}\n\ndef test_identity_list():\n    assert solution([1, 2]) == [1, 2]\n<|Test End|>",
                seed[5]
            ),
            Tag::Evaluate => format!("<|Solution Begin|>\n{solution}<|Solution End|>"),
            Tag::Postprocess => {
                let question = request
                    .prompt
                    .split_once("Question:\n")
                    .and_then(|(_, rest)| rest.split_once("\nTests:"))
                    .map_or("", |(q, _)| q.trim());
                format!("{question} If the input is empty, return it unchanged.")
            }
            Tag::Topic => format!("{{\"topics\": [\"{}\"]}}", SYN_TOPICS[seed[6] as usize % SYN_TOPICS.len()]),
        }
    }
}

impl CompletionProvider for SyntheticProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, ProviderError> {
        Ok(Completion::estimated(&request.prompt, Self::answer(request)))
    }
}

/// Remote provider settings, loaded from a JSON or TOML-like config by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    /// Base URL of an OpenAI-compatible API, e.g. `https://api.openai.com/v1`.
    pub endpoint: String,
    pub model_id: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: f64,
}

fn default_timeout_s() -> f64 {
    120.0
}

/// Minimal JSON-over-HTTP transport.
pub mod http {
    use super::*;

    #[derive(Debug, Clone, Error, PartialEq)]
    #[error("{message}")]
    pub struct HttpError {
        pub status: Option<u16>,
        pub message: String,
    }

    impl HttpError {
        pub fn is_transient(&self) -> bool {
            match self.status {
                None => true,
                Some(s) => s == 408 || s == 429 || s >= 500,
            }
        }
    }

    impl From<HttpError> for ProviderError {
        fn from(e: HttpError) -> Self {
            ProviderError { transient: e.is_transient(), message: e.message }
        }
    }

    pub fn post_json(url: &str, bearer: Option<&str>, body: &Value, timeout: Duration) -> Result<Value, HttpError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        let mut req = agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = bearer {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| match e {
            ureq::Error::StatusCode(code) => HttpError { status: Some(code), message: format!("HTTP {code} from {url}") },
            other => HttpError { status: None, message: format!("{url}: {other}") },
        })?;
        resp.body_mut().read_json::<Value>().map_err(|e| HttpError {
            status: None,
            message: format!("{url}: invalid JSON body: {e}"),
        })
    }

    pub fn api_key(env: Option<&str>) -> Result<Option<String>, ProviderError> {
        match env {
            None => Ok(None),
            Some(name) => std::env::var(name)
                .map(Some)
                .map_err(|_| ProviderError::fatal(format!("environment variable {name} is not set"))),
        }
    }
}

/// OpenAI-compatible chat completions provider.
pub struct HttpProvider {
    config: ProviderConfig,
}

impl HttpProvider {
    pub fn new(config: ProviderConfig) -> Self {
        Self { config }
    }
}

impl CompletionProvider for HttpProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, ProviderError> {
        let key = http::api_key(self.config.api_key_env.as_deref())?;
        let url = format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'));
        let body = json!({
            "model": request.model_id,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_output,
        });
        let resp = http::post_json(&url, key.as_deref(), &body, Duration::from_secs_f64(self.config.timeout_s))?;
        let text = resp["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| ProviderError::fatal(format!("{url}: response has no message content")))?
            .to_string();
        let usage = &resp["usage"];
        Ok(Completion {
            prompt_tokens: usage["prompt_tokens"].as_u64().unwrap_or(0),
            completion_tokens: usage["completion_tokens"].as_u64().unwrap_or(0),
            text,
        })
    }
}
