//! Deterministic LLM gateway with live, record, and replay modes.
//!
//! Every model call in the pipeline is a [`PromptRequest`] routed through a
//! [`Gateway`]. In record mode the provider response is appended to a
//! cassette file keyed by scope and agent role; in replay mode responses are
//! served back from those cassettes by request digest, FIFO per digest, with
//! no network access. Two replay runs over the same cassettes and inputs
//! produce byte-identical outputs.

mod http;

pub use http::{HttpProvider, HttpProviderConfig};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{HashMap, VecDeque};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;
use thiserror::Error;

/// Pipeline agent that a prompt is issued on behalf of.
///
/// The role selects the cassette file a request records to, so one task's
/// traffic is split per agent and replays independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Proposer,
    Evaluator,
    FilePlanner,
    Construct,
    Env,
    TestGenerator,
    Judge,
    StepGenerator,
    Critic,
    ObservationSynthesizer,
    Auditor,
}

impl AgentRole {
    /// Stable snake_case name, used in cassette file names and logs.
    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::Proposer => "proposer",
            AgentRole::Evaluator => "evaluator",
            AgentRole::FilePlanner => "file_planner",
            AgentRole::Construct => "construct",
            AgentRole::Env => "env",
            AgentRole::TestGenerator => "test_generator",
            AgentRole::Judge => "judge",
            AgentRole::StepGenerator => "step_generator",
            AgentRole::Critic => "critic",
            AgentRole::ObservationSynthesizer => "observation_synthesizer",
            AgentRole::Auditor => "auditor",
        }
    }
}

impl std::fmt::Display for AgentRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Chat message speaker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    System,
    User,
    Assistant,
    Tool,
}

/// One chat message in a prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub speaker: Speaker,
    pub text: String,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Message { speaker: Speaker::System, text: text.into() }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Message { speaker: Speaker::User, text: text.into() }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Message { speaker: Speaker::Assistant, text: text.into() }
    }

    pub fn tool(text: impl Into<String>) -> Self {
        Message { speaker: Speaker::Tool, text: text.into() }
    }
}

/// A complete model request: role, conversation, and sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub agent_role: AgentRole,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl PromptRequest {
    /// Hex sha256 of the request's canonical JSON form.
    ///
    /// Canonical form sorts object keys and uses compact separators, so two
    /// requests with identical content digest identically regardless of the
    /// field order they were built or parsed in.
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("request serializes");
        let canonical = canonical_json(&value);
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex::encode(hasher.finalize())
    }
}

/// Serializes a JSON value with recursively sorted object keys and no
/// insignificant whitespace.
pub fn canonical_json(value: &serde_json::Value) -> String {
    // serde_json's default Map is a BTreeMap, so values round-tripped
    // through Value serialize with sorted keys already; compact output is
    // the to_string default.
    serde_json::to_string(value).expect("JSON value serializes")
}

/// One recorded completion, stored as a single JSONL line in a cassette.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    /// Digest of the request this response answered.
    pub request_digest: String,
    /// Raw model output. Non-empty on every successful completion.
    pub response_text: String,
    /// Provider that produced the response, e.g. `openai:gpt-4o`.
    pub provider_id: String,
    /// RFC 3339 timestamp of when the response was recorded.
    pub created_at: String,
}

/// Traffic handling mode for a [`Gateway`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayMode {
    /// Call the provider; record nothing.
    Live,
    /// Call the provider and append every completion to a cassette.
    Record,
    /// Serve completions from cassettes only; any provider is ignored and
    /// the network is never touched.
    Replay,
}

/// Provider-side failure classification.
///
/// Transient errors are retried by the gateway; fatal errors are not.
#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("transient provider error: {0}")]
    Transient(String),
    #[error("provider error: {0}")]
    Fatal(String),
}

/// A completion backend. Implementations must be safe to call from several
/// worker threads at once.
pub trait Provider: Send + Sync {
    /// Stable identifier stored in [`CompletionRecord::provider_id`].
    fn provider_id(&self) -> String;

    /// Produces the raw completion text for a request.
    fn complete(&self, request: &PromptRequest) -> Result<String, ProviderError>;
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("gateway mode {mode:?} requires a provider but none was configured")]
    NoProvider { mode: GatewayMode },
    #[error("provider failed after {attempts} attempt(s): {last}")]
    ProviderExhausted { attempts: u32, last: String },
    #[error("provider returned an empty completion")]
    EmptyCompletion,
    #[error(
        "replay miss: no remaining response for digest {digest} in {path} \
         (requests must be issued in the same order they were recorded)"
    )]
    ReplayMiss { digest: String, path: PathBuf },
    #[error("cassette io error at {path}: {source}")]
    CassetteIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed cassette line {line} in {path}: {detail}")]
    CassetteParse { path: PathBuf, line: usize, detail: String },
}

/// Append-only cassette storage rooted at one directory.
///
/// Layout: `<root>/<scope>/<agent_role>.jsonl`, one [`CompletionRecord`]
/// per line. The scope is a task id, or a stage name like `seeds` for
/// traffic not tied to a single task.
#[derive(Debug, Clone)]
pub struct CassetteStore {
    root: PathBuf,
}

impl CassetteStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        CassetteStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Cassette file path for one scope and role.
    pub fn path_for(&self, scope: &str, role: AgentRole) -> PathBuf {
        self.root.join(scope).join(format!("{}.jsonl", role.as_str()))
    }

    /// Appends one record as a single line. The line is written with one
    /// `write_all` call so concurrent appenders cannot interleave bytes.
    pub fn append(
        &self,
        scope: &str,
        role: AgentRole,
        record: &CompletionRecord,
    ) -> Result<(), GatewayError> {
        let path = self.path_for(scope, role);
        let wrap = |source| GatewayError::CassetteIo { path: path.clone(), source };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(wrap)?;
        }
        let mut line = serde_json::to_string(record).expect("record serializes");
        line.push('\n');
        let mut file =
            fs::OpenOptions::new().create(true).append(true).open(&path).map_err(wrap)?;
        file.write_all(line.as_bytes()).map_err(wrap)?;
        Ok(())
    }

    /// Loads all records from one cassette in file order. A missing file is
    /// an empty cassette; a malformed line is an error, not a skip, because
    /// replay correctness depends on the full sequence.
    pub fn load(&self, scope: &str, role: AgentRole) -> Result<Vec<CompletionRecord>, GatewayError> {
        let path = self.path_for(scope, role);
        let text = match fs::read_to_string(&path) {
            Ok(text) => text,
            Err(err) if err.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(source) => return Err(GatewayError::CassetteIo { path, source }),
        };
        let mut records = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: CompletionRecord =
                serde_json::from_str(line).map_err(|err| GatewayError::CassetteParse {
                    path: path.clone(),
                    line: idx + 1,
                    detail: err.to_string(),
                })?;
            records.push(record);
        }
        Ok(records)
    }
}

/// Retry schedule for transient provider errors.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    /// Total attempts, including the first. Must be at least 1.
    pub max_attempts: u32,
    /// Delay before the first retry; doubles each subsequent retry.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, base_delay: Duration::from_millis(500) }
    }
}

type ReplayKey = (String, AgentRole);
type DigestQueues = HashMap<String, VecDeque<String>>;

/// The single entry point for model traffic.
///
/// Thread-safe: stage workers share one gateway behind an `Arc`.
pub struct Gateway {
    mode: GatewayMode,
    store: CassetteStore,
    provider: Option<Arc<dyn Provider>>,
    retry: RetryPolicy,
    replay: Mutex<HashMap<ReplayKey, DigestQueues>>,
}

impl Gateway {
    /// Builds a gateway. Live and record modes require a provider; replay
    /// mode ignores one if given and never contacts it.
    pub fn new(
        mode: GatewayMode,
        store: CassetteStore,
        provider: Option<Arc<dyn Provider>>,
    ) -> Result<Self, GatewayError> {
        if provider.is_none() && matches!(mode, GatewayMode::Live | GatewayMode::Record) {
            return Err(GatewayError::NoProvider { mode });
        }
        Ok(Gateway { mode, store, provider, retry: RetryPolicy::default(), replay: Mutex::new(HashMap::new()) })
    }

    pub fn with_retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn mode(&self) -> GatewayMode {
        self.mode
    }

    pub fn store(&self) -> &CassetteStore {
        &self.store
    }

    /// Completes a request under the gateway's mode.
    ///
    /// `scope` groups cassette traffic, normally by task id. Successful
    /// completions are always non-empty.
    pub fn complete(&self, scope: &str, request: &PromptRequest) -> Result<String, GatewayError> {
        match self.mode {
            GatewayMode::Replay => self.replay_completion(scope, request),
            GatewayMode::Live => self.provider_completion(request).map(|(text, _)| text),
            GatewayMode::Record => {
                let (text, provider_id) = self.provider_completion(request)?;
                let record = CompletionRecord {
                    request_digest: request.digest(),
                    response_text: text.clone(),
                    provider_id,
                    created_at: chrono::Utc::now().to_rfc3339(),
                };
                self.store.append(scope, request.agent_role, &record)?;
                Ok(text)
            }
        }
    }

    fn replay_completion(&self, scope: &str, request: &PromptRequest) -> Result<String, GatewayError> {
        let key = (scope.to_string(), request.agent_role);
        let mut replay = self.replay.lock().expect("replay lock");
        if !replay.contains_key(&key) {
            let mut queues: DigestQueues = HashMap::new();
            for record in self.store.load(scope, request.agent_role)? {
                queues.entry(record.request_digest).or_default().push_back(record.response_text);
            }
            replay.insert(key.clone(), queues);
        }
        let digest = request.digest();
        let queues = replay.get_mut(&key).expect("queues just inserted");
        match queues.get_mut(&digest).and_then(VecDeque::pop_front) {
            Some(text) => Ok(text),
            None => Err(GatewayError::ReplayMiss {
                digest,
                path: self.store.path_for(scope, request.agent_role),
            }),
        }
    }

    fn provider_completion(&self, request: &PromptRequest) -> Result<(String, String), GatewayError> {
        let provider = self
            .provider
            .as_ref()
            .ok_or(GatewayError::NoProvider { mode: self.mode })?;
        let mut last_err = String::new();
        for attempt in 1..=self.retry.max_attempts.max(1) {
            match provider.complete(request) {
                Ok(text) if text.is_empty() => return Err(GatewayError::EmptyCompletion),
                Ok(text) => return Ok((text, provider.provider_id())),
                Err(ProviderError::Fatal(detail)) => {
                    return Err(GatewayError::ProviderExhausted { attempts: attempt, last: detail })
                }
                Err(ProviderError::Transient(detail)) => {
                    tracing::warn!(attempt, detail = %detail, "transient provider error");
                    last_err = detail;
                    if attempt < self.retry.max_attempts {
                        let backoff = self.retry.base_delay * 2u32.saturating_pow(attempt - 1);
                        std::thread::sleep(backoff);
                    }
                }
            }
        }
        Err(GatewayError::ProviderExhausted { attempts: self.retry.max_attempts, last: last_err })
    }
}
