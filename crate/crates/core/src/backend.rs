//! Chat-completion and embedding providers.
//!
//! Every agent call goes through [`ChatBackend::chat`]; every embedding goes
//! through [`Embedder::embed`]. Besides the live HTTP client there is a
//! record/replay pair that stores responses keyed by `(task, role, index)`,
//! where `index` counts calls of one role within one task.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Environment variable holding the bearer token for the live backend.
pub const API_KEY_ENV: &str = "MAPLE_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Solver,
    Checker,
    Reflector,
    ArchiverSum,
    ArchiverEvo,
}

impl AgentRole {
    pub const ALL: [AgentRole; 5] = [
        AgentRole::Solver,
        AgentRole::Checker,
        AgentRole::Reflector,
        AgentRole::ArchiverSum,
        AgentRole::ArchiverEvo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::Solver => "solver",
            AgentRole::Checker => "checker",
            AgentRole::Reflector => "reflector",
            AgentRole::ArchiverSum => "archiver_sum",
            AgentRole::ArchiverEvo => "archiver_evo",
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    /// Network-level failure; worth retrying.
    #[error("transport error: {0}")]
    Transport(String),
    /// The provider rejected the request or answered with something unusable.
    #[error("backend error: {0}")]
    Backend(String),
    #[error("no recorded response for task {task:?}, role {role}, index {index}")]
    ReplayMiss {
        task: String,
        role: AgentRole,
        index: usize,
    },
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    /// Scopes replay lookups; not sent to live providers.
    pub task_id: String,
    pub role: AgentRole,
    pub system_text: String,
    pub user_text: String,
    /// Decoding parameters forwarded verbatim (temperature, top_p, ...).
    #[serde(default)]
    pub decode_params: BTreeMap<String, Value>,
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<String, BackendError>;

    /// Short description recorded in run manifests.
    fn identity(&self) -> String {
        "custom".to_string()
    }
}

impl<F> ChatBackend for F
where
    F: Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync,
{
    fn chat(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self(request)
    }
}

/// A fixed-dimension embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, BackendError> {
        if values.is_empty() {
            return Err(BackendError::Backend("embedding has zero dimensions".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::Backend("embedding has non-finite entries".into()));
        }
        Ok(EmbeddingVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// `1 - cos(a, b)`. A zero vector is treated as orthogonal to everything.
    pub fn cosine_distance(&self, other: &EmbeddingVector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for (a, b) in self.0.iter().zip(&other.0) {
            dot += a * b;
            na += a * a;
            nb += b * b;
        }
        if na == 0.0 || nb == 0.0 {
            return 1.0;
        }
        // sqrt(na * nb) rather than sqrt(na) * sqrt(nb): for identical
        // vectors this is exactly `dot`, so self-distance is exactly 0.
        (1.0 - dot / (na * nb).sqrt()).clamp(0.0, 2.0)
    }
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError>;
    fn dim(&self) -> usize;
    fn identity(&self) -> String {
        "custom".to_string()
    }
}

pub const DEFAULT_EMBEDDING_DIM: usize = 256;

/// Offline embedder: lowercase alphanumeric tokens hashed into signed buckets,
/// summed, then L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashEmbedder { dim }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(DEFAULT_EMBEDDING_DIM)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercased runs of alphanumeric characters.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

impl Embedder for HashEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::Backend("cannot embed empty text".into()));
        }
        let mut values = vec![0.0; self.dim];
        for token in tokenize(text) {
            let h = fnv1a(token.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            values[bucket] += sign;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        EmbeddingVector::new(values)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn identity(&self) -> String {
        format!("hash-embedder/{}", self.dim)
    }
}

/// One recorded response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    /// `None` entries apply to every task that has no entry of its own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    pub role: AgentRole,
    pub index: usize,
    pub response: String,
}

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("transcript io: {0}")]
    Io(#[from] std::io::Error),
    #[error("transcript line {line}: {message}")]
    Format { line: usize, message: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn from_jsonl(text: &str) -> Result<Self, TranscriptError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: TranscriptEntry =
                serde_json::from_str(line).map_err(|e| TranscriptError::Format {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            entries.push(entry);
        }
        let transcript = Transcript { entries };
        transcript.validate()?;
        Ok(transcript)
    }

    pub fn load(path: &Path) -> Result<Self, TranscriptError> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("transcript entry serializes"));
            out.push('\n');
        }
        out
    }

    /// Indices per (task, role) must be exactly 0..n.
    pub fn validate(&self) -> Result<(), TranscriptError> {
        let mut seen: BTreeMap<(Option<&str>, AgentRole), Vec<usize>> = BTreeMap::new();
        for e in &self.entries {
            seen.entry((e.task.as_deref(), e.role))
                .or_default()
                .push(e.index);
        }
        for ((task, role), mut idx) in seen {
            idx.sort_unstable();
            for (expected, got) in idx.iter().enumerate() {
                if *got != expected {
                    return Err(TranscriptError::Format {
                        line: 0,
                        message: format!(
                            "indices for task {task:?} role {role} are not contiguous from 0"
                        ),
                    });
                }
            }
        }
        Ok(())
    }
}

type CallKey = (String, AgentRole);

/// Hands out per-(task, role) call indices.
#[derive(Debug, Default)]
struct CallCounter(Mutex<HashMap<CallKey, usize>>);

impl CallCounter {
    fn next(&self, task: &str, role: AgentRole) -> usize {
        let mut map = self.0.lock().expect("call counter poisoned");
        let slot = map.entry((task.to_string(), role)).or_insert(0);
        let idx = *slot;
        *slot += 1;
        idx
    }
}

/// Serves recorded responses; never touches the network.
#[derive(Debug)]
pub struct ReplayBackend {
    scoped: HashMap<(String, AgentRole, usize), String>,
    shared: HashMap<(AgentRole, usize), String>,
    counter: CallCounter,
    label: String,
}

impl ReplayBackend {
    pub fn new(transcript: Transcript) -> Self {
        let mut scoped = HashMap::new();
        let mut shared = HashMap::new();
        for e in transcript.entries {
            match e.task {
                Some(task) => {
                    scoped.insert((task, e.role, e.index), e.response);
                }
                None => {
                    shared.insert((e.role, e.index), e.response);
                }
            }
        }
        ReplayBackend {
            scoped,
            shared,
            counter: CallCounter::default(),
            label: "replay".into(),
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }
}

impl ChatBackend for ReplayBackend {
    fn chat(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let index = self.counter.next(&request.task_id, request.role);
        self.scoped
            .get(&(request.task_id.clone(), request.role, index))
            .or_else(|| self.shared.get(&(request.role, index)))
            .cloned()
            .ok_or_else(|| BackendError::ReplayMiss {
                task: request.task_id.clone(),
                role: request.role,
                index,
            })
    }

    fn identity(&self) -> String {
        format!("replay:{}", self.label)
    }
}

/// Wraps another backend and appends every successful response to a sink.
pub struct RecordingBackend<B> {
    inner: B,
    sink: Mutex<Box<dyn Write + Send>>,
    counter: CallCounter,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn new(inner: B, sink: Box<dyn Write + Send>) -> Self {
        RecordingBackend {
            inner,
            sink: Mutex::new(sink),
            counter: CallCounter::default(),
        }
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn chat(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let response = self.inner.chat(request)?;
        let entry = TranscriptEntry {
            task: Some(request.task_id.clone()),
            role: request.role,
            index: self.counter.next(&request.task_id, request.role),
            response: response.clone(),
        };
        let line = serde_json::to_string(&entry).expect("transcript entry serializes");
        let mut sink = self.sink.lock().expect("transcript sink poisoned");
        writeln!(sink, "{line}")
            .and_then(|_| sink.flush())
            .map_err(|e| BackendError::Backend(format!("transcript write failed: {e}")))?;
        Ok(response)
    }

    fn identity(&self) -> String {
        format!("record:{}", self.inner.identity())
    }
}

/// Loads a transcript file into a replay backend labelled with its path.
pub fn load_replay(path: &Path) -> Result<ReplayBackend, TranscriptError> {
    Ok(ReplayBackend::new(Transcript::load(path)?).with_label(path.display().to_string()))
}

/// Connection settings for an OpenAI-compatible HTTP endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpSettings {
    /// Base URL, e.g. `http://localhost:8000/v1`.
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    120
}

fn http_agent(timeout_secs: u64) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(timeout_secs)))
        .http_status_as_error(false)
        .build()
        .into()
}

fn map_ureq_error(err: ureq::Error) -> BackendError {
    match err {
        ureq::Error::Io(_)
        | ureq::Error::Timeout(_)
        | ureq::Error::HostNotFound
        | ureq::Error::ConnectionFailed
        | ureq::Error::BodyStalled
        | ureq::Error::Protocol(_) => BackendError::Transport(err.to_string()),
        other => BackendError::Backend(other.to_string()),
    }
}

fn post_json(
    agent: &ureq::Agent,
    url: &str,
    api_key: Option<&str>,
    body: &Value,
) -> Result<Value, BackendError> {
    let mut req = agent.post(url);
    if let Some(key) = api_key {
        req = req.header("Authorization", &format!("Bearer {key}"));
    }
    let mut resp = req.send_json(body).map_err(map_ureq_error)?;
    let status = resp.status().as_u16();
    let text = resp
        .body_mut()
        .read_to_string()
        .map_err(map_ureq_error)?;
    if status == 429 || status >= 500 {
        return Err(BackendError::Transport(format!("HTTP {status}: {text}")));
    }
    if status >= 400 {
        return Err(BackendError::Backend(format!("HTTP {status}: {text}")));
    }
    serde_json::from_str(&text)
        .map_err(|e| BackendError::Backend(format!("invalid JSON from provider: {e}")))
}

fn endpoint_url(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path)
}

/// Chat client for `POST {endpoint}/chat/completions`.
pub struct OpenAiChat {
    settings: HttpSettings,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl OpenAiChat {
    /// Reads the token from [`API_KEY_ENV`] if set.
    pub fn new(settings: HttpSettings) -> Self {
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        let agent = http_agent(settings.timeout_secs);
        OpenAiChat {
            settings,
            api_key,
            agent,
        }
    }
}

impl ChatBackend for OpenAiChat {
    fn chat(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let mut body = serde_json::Map::new();
        body.insert("model".into(), Value::String(self.settings.model.clone()));
        let mut messages = Vec::new();
        if !request.system_text.is_empty() {
            messages.push(serde_json::json!({"role": "system", "content": request.system_text}));
        }
        messages.push(serde_json::json!({"role": "user", "content": request.user_text}));
        body.insert("messages".into(), Value::Array(messages));
        for (k, v) in &request.decode_params {
            body.insert(k.clone(), v.clone());
        }
        let url = endpoint_url(&self.settings.endpoint, "chat/completions");
        let resp = post_json(&self.agent, &url, self.api_key.as_deref(), &Value::Object(body))?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Backend(format!("no message content in response: {resp}")))
    }

    fn identity(&self) -> String {
        format!("openai:{}@{}", self.settings.model, self.settings.endpoint)
    }
}

/// Embedding client for `POST {endpoint}/embeddings`.
pub struct OpenAiEmbedder {
    settings: HttpSettings,
    dim: usize,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl OpenAiEmbedder {
    pub fn new(settings: HttpSettings, dim: usize) -> Self {
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        let agent = http_agent(settings.timeout_secs);
        OpenAiEmbedder {
            settings,
            dim,
            api_key,
            agent,
        }
    }
}

impl Embedder for OpenAiEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::Backend("cannot embed empty text".into()));
        }
        let body = serde_json::json!({"model": self.settings.model, "input": text});
        let url = endpoint_url(&self.settings.endpoint, "embeddings");
        let resp = post_json(&self.agent, &url, self.api_key.as_deref(), &body)?;
        let values = resp
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Backend("no embedding in response".into()))?
            .iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| BackendError::Backend("non-numeric embedding entry".into()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() != self.dim {
            return Err(BackendError::Backend(format!(
                "embedding dimension {} does not match configured {}",
                values.len(),
                self.dim
            )));
        }
        EmbeddingVector::new(values)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn identity(&self) -> String {
        format!("openai-embed:{}@{}", self.settings.model, self.settings.endpoint)
    }
}
