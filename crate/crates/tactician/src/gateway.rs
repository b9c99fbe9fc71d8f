//! Chat-completion gateway: one calling convention over three backends.
//!
//! `HttpChat` talks to any OpenAI-compatible `/chat/completions` endpoint
//! with bearer auth, retries on transient failures, and paced dispatch.
//! `Scripted` serves canned outputs matched against the request, for tests
//! and offline runs. `Replay` re-serves the outputs recorded in a previous
//! run's request log, so one paid run can be replayed forever.
//!
//! Every attempt is appended to a JSONL request log when one is attached;
//! that same log is what the replay backend consumes.

use std::collections::HashMap;
use std::collections::VecDeque;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("request timed out or transport failed: {0}")]
    Timeout(String),
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("no scripted response for request key {key}: {detail}")]
    ScriptMiss { key: String, detail: String },
    #[error("server error {status}: {body}")]
    HttpStatus { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    BadResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("gateway io: {0}")]
    Io(#[from] std::io::Error),
}

impl GatewayError {
    /// Stable machine-readable tag for error reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            GatewayError::Timeout(_) => "timeout",
            GatewayError::AuthFailure(_) => "auth_failure",
            GatewayError::RateLimited(_) => "rate_limited",
            GatewayError::ScriptMiss { .. } => "script_miss",
            GatewayError::HttpStatus { .. } => "http_status",
            GatewayError::BadResponse(_) => "bad_response",
            GatewayError::InvalidRequest(_) => "invalid_request",
            GatewayError::Config(_) => "config",
            GatewayError::Io(_) => "io",
        }
    }

    /// Whether a retry could plausibly succeed.
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            GatewayError::Timeout(_) | GatewayError::RateLimited(_) | GatewayError::HttpStatus { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: ChatRole::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: ChatRole::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: ChatRole::Assistant, content: content.into() }
    }
}

/// Default completion length cap.
pub const DEFAULT_MAX_NEW_TOKENS: u32 = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_max_new_tokens() -> u32 {
    DEFAULT_MAX_NEW_TOKENS
}

fn default_n_samples() -> usize {
    1
}

impl CompletionRequest {
    pub fn new(messages: Vec<ChatMessage>, temperature: f64) -> Self {
        CompletionRequest {
            messages,
            temperature,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            n_samples: 1,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("messages must be nonempty".into()));
        }
        if let Some(i) = self.messages.iter().position(|m| m.content.is_empty()) {
            return Err(GatewayError::InvalidRequest(format!("message {i} has empty content")));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be a finite nonnegative number, got {}",
                self.temperature
            )));
        }
        if self.n_samples == 0 {
            return Err(GatewayError::InvalidRequest("n_samples must be at least 1".into()));
        }
        if self.n_samples >= 2 && self.temperature == 0.0 {
            return Err(GatewayError::InvalidRequest(
                "n_samples >= 2 requires temperature > 0; deterministic decoding would repeat one output".into(),
            ));
        }
        Ok(())
    }

    /// The last user-role message, which scripted matching keys on.
    pub fn last_user_content(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == ChatRole::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

/// Lowercase hex SHA-256 of a string, the hash used in script match keys.
pub fn sha256_hex(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Hash of the canonical request encoding; the replay index key.
pub fn request_key(request: &CompletionRequest) -> String {
    sha256_hex(&serde_json::to_string(request).expect("request serializes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    HttpChat,
    Scripted,
    Replay,
}

/// Where completions come from and how hard to try.
///
/// Durations are plain millisecond integers so configs stay dependency-free.
/// `max_retries` counts total attempts, so 1 means no retry at all.
///
/// Unknown fields are rejected on purpose: credentials belong in the
/// environment variable named by `api_key_env`, never in the config file,
/// and a typo'd knob should fail loudly instead of being ignored.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default)]
    pub base_url: String,
    #[serde(default)]
    pub model_name: String,
    #[serde(default)]
    pub api_key_env: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub min_request_interval_ms: u64,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    #[serde(default)]
    pub script_path: Option<PathBuf>,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_max_retries() -> u32 {
    3
}

fn default_backoff_base_ms() -> u64 {
    200
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::default(),
            base_url: String::new(),
            model_name: String::new(),
            api_key_env: String::new(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            min_request_interval_ms: 0,
            backoff_base_ms: default_backoff_base_ms(),
            script_path: None,
        }
    }
}

impl BackendConfig {
    pub fn scripted(script_path: impl Into<PathBuf>) -> Self {
        BackendConfig {
            kind: BackendKind::Scripted,
            script_path: Some(script_path.into()),
            ..BackendConfig::default()
        }
    }

    /// All structural problems with this config, empty when valid.
    pub fn problems(&self, label: &str) -> Vec<String> {
        let mut problems = Vec::new();
        match self.kind {
            BackendKind::HttpChat => {
                if self.base_url.is_empty() {
                    problems.push(format!("{label}: http_chat backend requires base_url"));
                }
                if self.model_name.is_empty() {
                    problems.push(format!("{label}: http_chat backend requires model_name"));
                }
            }
            BackendKind::Scripted => {
                if self.script_path.is_none() {
                    problems.push(format!("{label}: scripted backend requires script_path"));
                }
            }
            BackendKind::Replay => {
                if self.script_path.is_none() {
                    problems.push(format!(
                        "{label}: replay backend requires script_path (a previous run's request log)"
                    ));
                }
            }
        }
        if self.max_retries == 0 {
            problems.push(format!("{label}: max_retries counts total attempts and must be >= 1"));
        }
        problems
    }
}

/// One appended line in the request log: a single backend attempt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogEntry {
    pub request: CompletionRequest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub attempt: u32,
    pub timestamp_ms: u64,
}

/// Append-only JSONL sink shared by cloned handles.
#[derive(Clone)]
pub struct RequestLog {
    inner: Arc<Mutex<BufWriter<std::fs::File>>>,
}

impl RequestLog {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        let file = std::fs::File::create(path)?;
        Ok(RequestLog { inner: Arc::new(Mutex::new(BufWriter::new(file))) })
    }

    pub fn append(&self, entry: &LogEntry) -> std::io::Result<()> {
        let line = serde_json::to_string(entry).expect("log entry serializes");
        let mut writer = self.inner.lock().expect("request log lock");
        writeln!(writer, "{line}")?;
        writer.flush()
    }

    pub fn read_entries(path: &Path) -> Result<Vec<LogEntry>, GatewayError> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (number, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: LogEntry = serde_json::from_str(line).map_err(|e| {
                GatewayError::Config(format!("{}:{}: {e}", path.display(), number + 1))
            })?;
            entries.push(entry);
        }
        Ok(entries)
    }
}

/// A completion source. Implementations must be deterministic for the same
/// request unless they proxy a live model.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>, GatewayError>;
}

impl<F> Backend for F
where
    F: Fn(&CompletionRequest) -> Result<Vec<String>, GatewayError> + Send + Sync,
{
    fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>, GatewayError> {
        self(request)
    }
}

/// Conditions an entry must meet to serve a request. All present fields must
/// match; entries with more specific fields win over looser ones.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScriptMatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_user_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_user_contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message_count: Option<usize>,
}

impl ScriptMatch {
    fn matches(&self, request: &CompletionRequest) -> bool {
        if let Some(want) = &self.last_user_sha256 {
            if *want != sha256_hex(request.last_user_content()) {
                return false;
            }
        }
        if let Some(needle) = &self.last_user_contains {
            if !request.last_user_content().contains(needle.as_str()) {
                return false;
            }
        }
        if let Some(count) = self.message_count {
            if count != request.messages.len() {
                return false;
            }
        }
        self.last_user_sha256.is_some()
            || self.last_user_contains.is_some()
            || self.message_count.is_some()
    }

    fn specificity(&self) -> u32 {
        let mut score = 0;
        if self.last_user_sha256.is_some() {
            score += 4;
        }
        if self.last_user_contains.is_some() {
            score += 2;
        }
        if self.message_count.is_some() {
            score += 1;
        }
        score
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub match_spec: ScriptMatch,
    pub outputs: Vec<String>,
}

/// Canned-output backend: a pure function of (script, request).
pub struct ScriptedBackend {
    entries: Vec<ScriptEntry>,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        ScriptedBackend { entries }
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (number, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(line).map_err(|e| {
                GatewayError::Config(format!("{}:{}: {e}", path.display(), number + 1))
            })?;
            if entry.outputs.is_empty() {
                return Err(GatewayError::Config(format!(
                    "{}:{}: script entry has no outputs",
                    path.display(),
                    number + 1
                )));
            }
            entries.push(entry);
        }
        Ok(ScriptedBackend { entries })
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>, GatewayError> {
        let best = self
            .entries
            .iter()
            .filter(|e| e.match_spec.matches(request))
            .max_by_key(|e| e.match_spec.specificity());
        match best {
            Some(entry) => Ok((0..request.n_samples)
                .map(|i| entry.outputs[i % entry.outputs.len()].clone())
                .collect()),
            None => Err(GatewayError::ScriptMiss {
                key: format!(
                    "last_user_sha256={} message_count={}",
                    sha256_hex(request.last_user_content()),
                    request.messages.len()
                ),
                detail: format!(
                    "no entry matches; last user message starts {:?}",
                    request.last_user_content().chars().take(60).collect::<String>()
                ),
            }),
        }
    }
}

/// Serves recorded outputs from a previous run's request log. Responses for
/// identical requests are consumed first-in first-out, mirroring the order
/// they were produced.
pub struct ReplayBackend {
    by_key: Mutex<HashMap<String, VecDeque<Vec<String>>>>,
}

impl ReplayBackend {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let mut by_key: HashMap<String, VecDeque<Vec<String>>> = HashMap::new();
        for entry in RequestLog::read_entries(path)? {
            if let Some(outputs) = entry.outputs {
                by_key.entry(request_key(&entry.request)).or_default().push_back(outputs);
            }
        }
        Ok(ReplayBackend { by_key: Mutex::new(by_key) })
    }
}

impl Backend for ReplayBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>, GatewayError> {
        let key = request_key(request);
        let mut by_key = self.by_key.lock().expect("replay index lock");
        match by_key.get_mut(&key).and_then(VecDeque::pop_front) {
            Some(outputs) => Ok(outputs),
            None => Err(GatewayError::ScriptMiss {
                key,
                detail: "no recorded response left for this request in the replay log".into(),
            }),
        }
    }
}

#[derive(Debug, Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Debug, Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
    n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Debug, Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
}

#[derive(Debug, Deserialize)]
struct WireChoiceMessage {
    content: String,
}

/// OpenAI-compatible HTTP backend: POST {base_url}/chat/completions.
pub struct HttpChatBackend {
    agent: ureq::Agent,
    endpoint: String,
    model_name: String,
    api_key: Option<String>,
}

impl HttpChatBackend {
    pub fn from_config(config: &BackendConfig) -> Result<Self, GatewayError> {
        if config.base_url.is_empty() {
            return Err(GatewayError::Config("http_chat backend requires base_url".into()));
        }
        if config.model_name.is_empty() {
            return Err(GatewayError::Config("http_chat backend requires model_name".into()));
        }
        let api_key = if config.api_key_env.is_empty() {
            None
        } else {
            match std::env::var(&config.api_key_env) {
                Ok(key) if !key.is_empty() => Some(key),
                _ => {
                    return Err(GatewayError::AuthFailure(format!(
                        "environment variable {} named by api_key_env is not set",
                        config.api_key_env
                    )))
                }
            }
        };
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build();
        Ok(HttpChatBackend {
            agent,
            endpoint: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            model_name: config.model_name.clone(),
            api_key,
        })
    }
}

impl Backend for HttpChatBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>, GatewayError> {
        let body = WireRequest {
            model: &self.model_name,
            messages: request
                .messages
                .iter()
                .map(|m| WireMessage {
                    role: match m.role {
                        ChatRole::System => "system",
                        ChatRole::User => "user",
                        ChatRole::Assistant => "assistant",
                    },
                    content: &m.content,
                })
                .collect(),
            temperature: request.temperature,
            max_tokens: request.max_new_tokens,
            n: request.n_samples,
            seed: request.seed,
        };
        let mut call = self.agent.post(&self.endpoint).set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.set("Authorization", &format!("Bearer {key}"));
        }
        let response = match call.send_json(&body) {
            Ok(response) => response,
            Err(ureq::Error::Status(status, response)) => {
                let body = response.into_string().unwrap_or_default();
                return Err(match status {
                    401 | 403 => GatewayError::AuthFailure(format!("status {status}: {body}")),
                    429 => GatewayError::RateLimited(format!("status {status}: {body}")),
                    500..=599 => GatewayError::HttpStatus { status, body },
                    _ => GatewayError::BadResponse(format!("unexpected status {status}: {body}")),
                });
            }
            Err(ureq::Error::Transport(transport)) => {
                return Err(GatewayError::Timeout(transport.to_string()))
            }
        };
        let parsed: WireResponse = response
            .into_json()
            .map_err(|e| GatewayError::BadResponse(format!("undecodable response body: {e}")))?;
        if parsed.choices.is_empty() {
            return Err(GatewayError::BadResponse("response carried no choices".into()));
        }
        Ok(parsed.choices.into_iter().map(|c| c.message.content).collect())
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(SystemTime::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Retry, pacing, and logging wrapper around a [`Backend`].
pub struct Gateway {
    backend: Box<dyn Backend>,
    max_retries: u32,
    backoff_base: Duration,
    min_interval: Duration,
    log: Option<RequestLog>,
    last_dispatch: Mutex<Option<Instant>>,
}

impl Gateway {
    /// Builds the backend described by `config`. The request log, when given,
    /// receives one entry per attempt.
    pub fn from_config(
        config: &BackendConfig,
        log: Option<RequestLog>,
    ) -> Result<Self, GatewayError> {
        let backend: Box<dyn Backend> = match config.kind {
            BackendKind::HttpChat => Box::new(HttpChatBackend::from_config(config)?),
            BackendKind::Scripted => {
                let path = config.script_path.as_ref().ok_or_else(|| {
                    GatewayError::Config("scripted backend requires script_path".into())
                })?;
                Box::new(ScriptedBackend::load(path)?)
            }
            BackendKind::Replay => {
                let path = config.script_path.as_ref().ok_or_else(|| {
                    GatewayError::Config(
                        "replay backend requires script_path (a previous run's request log)"
                            .into(),
                    )
                })?;
                Box::new(ReplayBackend::load(path)?)
            }
        };
        Ok(Gateway {
            backend,
            max_retries: config.max_retries.max(1),
            backoff_base: Duration::from_millis(config.backoff_base_ms),
            min_interval: Duration::from_millis(config.min_request_interval_ms),
            log,
            last_dispatch: Mutex::new(None),
        })
    }

    /// Wraps an in-process backend, for tests and custom environments.
    pub fn with_backend(backend: Box<dyn Backend>, log: Option<RequestLog>) -> Self {
        Gateway {
            backend,
            max_retries: 1,
            backoff_base: Duration::from_millis(0),
            min_interval: Duration::from_millis(0),
            log,
            last_dispatch: Mutex::new(None),
        }
    }

    fn pace(&self) {
        if self.min_interval.is_zero() {
            return;
        }
        let mut last = self.last_dispatch.lock().expect("dispatch lock");
        if let Some(previous) = *last {
            let elapsed = previous.elapsed();
            if elapsed < self.min_interval {
                std::thread::sleep(self.min_interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }

    fn log_attempt(
        &self,
        request: &CompletionRequest,
        attempt: u32,
        result: &Result<Vec<String>, GatewayError>,
    ) {
        if let Some(log) = &self.log {
            let entry = LogEntry {
                request: request.clone(),
                outputs: result.as_ref().ok().cloned(),
                error: result.as_ref().err().map(|e| e.to_string()),
                attempt,
                timestamp_ms: now_ms(),
            };
            if let Err(e) = log.append(&entry) {
                tracing::warn!("request log append failed: {e}");
            }
        }
    }

    fn attempt_with_retries(
        &self,
        request: &CompletionRequest,
    ) -> Result<Vec<String>, GatewayError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.pace();
            let result = self.backend.complete(request);
            self.log_attempt(request, attempt, &result);
            match result {
                Ok(outputs) => return Ok(outputs),
                Err(error) if error.is_transient() && attempt < self.max_retries => {
                    let backoff = self.backoff_base.saturating_mul(1 << (attempt - 1).min(16));
                    std::thread::sleep(backoff.min(Duration::from_secs(10)));
                }
                Err(error) => return Err(error),
            }
        }
    }

    /// Returns exactly `n_samples` completions. Backends that return fewer
    /// per call (or only support one) are topped up with follow-up requests.
    pub fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>, GatewayError> {
        request.validate()?;
        let want = request.n_samples;
        let mut collected: Vec<String> = Vec::with_capacity(want);
        while collected.len() < want {
            let mut sub = request.clone();
            sub.n_samples = want - collected.len();
            let outputs = self.attempt_with_retries(&sub)?;
            if outputs.is_empty() {
                return Err(GatewayError::BadResponse(
                    "backend returned an empty output list".into(),
                ));
            }
            collected.extend(outputs.into_iter().take(want - collected.len()));
        }
        Ok(collected)
    }
}

/// One-shot convenience: build the configured backend and complete a single
/// request. Long-lived callers should construct a [`Gateway`] once so pacing
/// and retries share state across calls.
pub fn complete(
    config: &BackendConfig,
    request: &CompletionRequest,
) -> Result<Vec<String>, GatewayError> {
    Gateway::from_config(config, None)?.complete(request)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn request_with(last_user: &str, count_padding: usize, n: usize, temp: f64) -> CompletionRequest {
        let mut messages = vec![ChatMessage::system("You are a test fixture.")];
        for i in 0..count_padding {
            messages.push(ChatMessage::assistant(format!("filler {i}")));
        }
        messages.push(ChatMessage::user(last_user));
        CompletionRequest {
            messages,
            temperature: temp,
            max_new_tokens: 32,
            n_samples: n,
            seed: None,
        }
    }

    #[test]
    fn scripted_backend_is_pure() {
        let backend = ScriptedBackend::new(vec![ScriptEntry {
            match_spec: ScriptMatch {
                last_user_sha256: Some(sha256_hex("Shall we?")),
                last_user_contains: None,
                message_count: None,
            },
            outputs: vec!["Yes, deal.".into()],
        }]);
        let request = request_with("Shall we?", 0, 1, 0.0);
        for _ in 0..3 {
            assert_eq!(backend.complete(&request).unwrap(), vec!["Yes, deal.".to_string()]);
        }
    }

    #[test]
    fn scripted_outputs_come_back_in_order_and_cycle() {
        let ten: Vec<String> = (0..10).map(|i| format!("variant {i}")).collect();
        let backend = ScriptedBackend::new(vec![ScriptEntry {
            match_spec: ScriptMatch {
                message_count: Some(2),
                ..ScriptMatch::default()
            },
            outputs: ten.clone(),
        }]);
        let got = backend.complete(&request_with("judge this", 0, 10, 1.1)).unwrap();
        assert_eq!(got, ten);

        let two = ScriptedBackend::new(vec![ScriptEntry {
            match_spec: ScriptMatch { message_count: Some(2), ..ScriptMatch::default() },
            outputs: vec!["a".into(), "b".into()],
        }]);
        let got = two.complete(&request_with("judge this", 0, 4, 1.1)).unwrap();
        assert_eq!(got, vec!["a", "b", "a", "b"]);
    }

    #[test]
    fn scripted_prefers_most_specific_match() {
        let backend = ScriptedBackend::new(vec![
            ScriptEntry {
                match_spec: ScriptMatch { message_count: Some(2), ..ScriptMatch::default() },
                outputs: vec!["loose".into()],
            },
            ScriptEntry {
                match_spec: ScriptMatch {
                    last_user_contains: Some("price".into()),
                    message_count: Some(2),
                    ..ScriptMatch::default()
                },
                outputs: vec!["contains".into()],
            },
            ScriptEntry {
                match_spec: ScriptMatch {
                    last_user_sha256: Some(sha256_hex("what is the price?")),
                    message_count: Some(2),
                    ..ScriptMatch::default()
                },
                outputs: vec!["exact".into()],
            },
        ]);
        let got = backend.complete(&request_with("what is the price?", 0, 1, 0.0)).unwrap();
        assert_eq!(got, vec!["exact"]);
        let got = backend.complete(&request_with("name a price", 0, 1, 0.0)).unwrap();
        assert_eq!(got, vec!["contains"]);
        let got = backend.complete(&request_with("hello", 0, 1, 0.0)).unwrap();
        assert_eq!(got, vec!["loose"]);
    }

    #[test]
    fn script_miss_reports_computed_key() {
        let backend = ScriptedBackend::new(vec![]);
        let request = request_with("unmatched text", 0, 1, 0.0);
        let err = backend.complete(&request).unwrap_err();
        match err {
            GatewayError::ScriptMiss { key, .. } => {
                assert!(key.contains(&sha256_hex("unmatched text")));
                assert!(key.contains("message_count=2"));
            }
            other => panic!("expected ScriptMiss, got {other:?}"),
        }
    }

    #[test]
    fn replay_serves_recorded_outputs_fifo() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("requests.jsonl");
        let log = RequestLog::create(&path).unwrap();
        let request = request_with("repeat after me", 0, 1, 0.0);
        for text in ["first", "second"] {
            log.append(&LogEntry {
                request: request.clone(),
                outputs: Some(vec![text.into()]),
                error: None,
                attempt: 1,
                timestamp_ms: 0,
            })
            .unwrap();
        }
        // A failed attempt in the log must not become a replayable response.
        log.append(&LogEntry {
            request: request.clone(),
            outputs: None,
            error: Some("timeout".into()),
            attempt: 1,
            timestamp_ms: 0,
        })
        .unwrap();

        let backend = ReplayBackend::load(&path).unwrap();
        assert_eq!(backend.complete(&request).unwrap(), vec!["first".to_string()]);
        assert_eq!(backend.complete(&request).unwrap(), vec!["second".to_string()]);
        let err = backend.complete(&request).unwrap_err();
        assert!(matches!(err, GatewayError::ScriptMiss { .. }));
    }

    #[test]
    fn request_validation_rejects_bad_shapes() {
        let empty = CompletionRequest::new(vec![], 0.0);
        assert!(matches!(empty.validate(), Err(GatewayError::InvalidRequest(_))));

        let mut multi = request_with("hi", 0, 3, 0.0);
        assert!(matches!(multi.validate(), Err(GatewayError::InvalidRequest(_))));
        multi.temperature = 1.1;
        assert!(multi.validate().is_ok());

        let blank = CompletionRequest::new(vec![ChatMessage::user("")], 0.0);
        assert!(matches!(blank.validate(), Err(GatewayError::InvalidRequest(_))));
    }

    struct ReceivedRequest {
        authorization: Option<String>,
        body: serde_json::Value,
    }

    /// Minimal single-threaded HTTP server: answers `responses.len()`
    /// connections in order, then returns what it received.
    fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<ReceivedRequest>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut received = Vec::new();
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut content_length = 0usize;
                let mut authorization = None;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    if let Some(value) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        content_length = value.trim().parse().unwrap();
                    }
                    if let Some(value) = line.strip_prefix("Authorization:") {
                        authorization = Some(value.trim().to_string());
                    }
                }
                let mut body_bytes = vec![0u8; content_length];
                reader.read_exact(&mut body_bytes).unwrap();
                received.push(ReceivedRequest {
                    authorization,
                    body: serde_json::from_slice(&body_bytes).unwrap(),
                });
                let reason = match status {
                    200 => "OK",
                    401 => "Unauthorized",
                    429 => "Too Many Requests",
                    500 => "Internal Server Error",
                    _ => "Status",
                };
                let response = format!(
                    "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len(),
                );
                let mut stream = reader.into_inner();
                stream.write_all(response.as_bytes()).unwrap();
            }
            received
        });
        (addr, handle)
    }

    fn choices_body(texts: &[&str]) -> String {
        let choices: Vec<serde_json::Value> = texts
            .iter()
            .map(|t| serde_json::json!({"message": {"role": "assistant", "content": t}}))
            .collect();
        serde_json::json!({ "choices": choices }).to_string()
    }

    fn http_config(base_url: &str, key_env: &str) -> BackendConfig {
        BackendConfig {
            kind: BackendKind::HttpChat,
            base_url: base_url.to_string(),
            model_name: "test-model".into(),
            api_key_env: key_env.into(),
            timeout_ms: 2_000,
            max_retries: 3,
            min_request_interval_ms: 0,
            backoff_base_ms: 1,
            script_path: None,
        }
    }

    #[test]
    fn http_backend_sends_auth_and_parses_choices() {
        std::env::set_var("TACTICIAN_TEST_KEY_A", "sk-test");
        let (addr, handle) = serve(vec![(200, choices_body(&["one", "two"]))]);
        let gateway =
            Gateway::from_config(&http_config(&addr, "TACTICIAN_TEST_KEY_A"), None).unwrap();
        let got = gateway.complete(&request_with("sample twice", 0, 2, 0.9)).unwrap();
        assert_eq!(got, vec!["one", "two"]);
        let received = handle.join().unwrap();
        assert_eq!(received[0].authorization.as_deref(), Some("Bearer sk-test"));
        assert_eq!(received[0].body["model"], "test-model");
        assert_eq!(received[0].body["n"], 2);
        assert_eq!(received[0].body["max_tokens"], 32);
    }

    #[test]
    fn http_backend_tops_up_short_responses() {
        let (addr, handle) = serve(vec![
            (200, choices_body(&["a"])),
            (200, choices_body(&["b"])),
            (200, choices_body(&["c"])),
        ]);
        let dir = tempfile::tempdir().unwrap();
        let log_path = dir.path().join("req.jsonl");
        let gateway = Gateway::from_config(
            &http_config(&addr, ""),
            Some(RequestLog::create(&log_path).unwrap()),
        )
        .unwrap();
        let got = gateway.complete(&request_with("three please", 0, 3, 1.0)).unwrap();
        assert_eq!(got, vec!["a", "b", "c"]);
        let received = handle.join().unwrap();
        assert_eq!(received.len(), 3);
        assert_eq!(received[0].body["n"], 3);
        assert_eq!(received[1].body["n"], 2);
        assert_eq!(received[2].body["n"], 1);
        let entries = RequestLog::read_entries(&log_path).unwrap();
        assert_eq!(entries.len(), 3);
        assert!(entries.iter().all(|e| e.outputs.is_some()));
    }

    #[test]
    fn http_backend_retries_rate_limit_then_succeeds() {
        let (addr, handle) = serve(vec![
            (429, "{\"error\": \"slow down\"}".into()),
            (200, choices_body(&["recovered"])),
        ]);
        let dir = tempfile::tempdir().unwrap();
        let log_path = dir.path().join("req.jsonl");
        let gateway = Gateway::from_config(
            &http_config(&addr, ""),
            Some(RequestLog::create(&log_path).unwrap()),
        )
        .unwrap();
        let got = gateway.complete(&request_with("retry me", 0, 1, 0.0)).unwrap();
        assert_eq!(got, vec!["recovered"]);
        handle.join().unwrap();
        let entries = RequestLog::read_entries(&log_path).unwrap();
        assert_eq!(entries.len(), 2);
        assert!(entries[0].error.as_deref().unwrap().contains("rate limited"));
        assert_eq!(entries[0].attempt, 1);
        assert_eq!(entries[1].attempt, 2);
    }

    #[test]
    fn http_backend_does_not_retry_auth_failure() {
        let (addr, handle) = serve(vec![(401, "{\"error\": \"bad key\"}".into())]);
        let gateway = Gateway::from_config(&http_config(&addr, ""), None).unwrap();
        let err = gateway.complete(&request_with("denied", 0, 1, 0.0)).unwrap_err();
        assert!(matches!(err, GatewayError::AuthFailure(_)));
        assert_eq!(handle.join().unwrap().len(), 1);
    }

    #[test]
    fn unreachable_endpoint_times_out_after_all_attempts() {
        let port = {
            let listener = TcpListener::bind("127.0.0.1:0").unwrap();
            listener.local_addr().unwrap().port()
        };
        let dir = tempfile::tempdir().unwrap();
        let log_path = dir.path().join("req.jsonl");
        let mut config = http_config(&format!("http://127.0.0.1:{port}"), "");
        config.max_retries = 2;
        let gateway =
            Gateway::from_config(&config, Some(RequestLog::create(&log_path).unwrap())).unwrap();
        let err = gateway.complete(&request_with("nobody home", 0, 1, 0.0)).unwrap_err();
        assert!(matches!(err, GatewayError::Timeout(_)), "got {err:?}");
        let entries = RequestLog::read_entries(&log_path).unwrap();
        assert_eq!(entries.len(), 2, "each attempt is observable in the log");
        assert!(entries.iter().all(|e| e.error.is_some()));
    }

    #[test]
    fn missing_api_key_env_fails_construction() {
        std::env::remove_var("TACTICIAN_TEST_KEY_MISSING");
        let config = http_config("http://127.0.0.1:9", "TACTICIAN_TEST_KEY_MISSING");
        match Gateway::from_config(&config, None) {
            Err(GatewayError::AuthFailure(_)) => {}
            Err(other) => panic!("expected AuthFailure, got {other:?}"),
            Ok(_) => panic!("expected AuthFailure, construction succeeded"),
        }
    }

    #[test]
    fn pacing_separates_dispatches() {
        let backend = |_req: &CompletionRequest| Ok(vec!["ok".to_string()]);
        let mut gateway = Gateway::with_backend(Box::new(backend), None);
        gateway.min_interval = Duration::from_millis(40);
        let request = request_with("quick", 0, 1, 0.0);
        let start = Instant::now();
        gateway.complete(&request).unwrap();
        gateway.complete(&request).unwrap();
        assert!(start.elapsed() >= Duration::from_millis(40));
    }

    #[test]
    fn config_problems_are_enumerated() {
        let config = BackendConfig {
            kind: BackendKind::HttpChat,
            base_url: String::new(),
            model_name: String::new(),
            api_key_env: String::new(),
            timeout_ms: 1,
            max_retries: 0,
            min_request_interval_ms: 0,
            backoff_base_ms: 1,
            script_path: None,
        };
        let problems = config.problems("backend_sys");
        assert_eq!(problems.len(), 3);
        assert!(problems.iter().all(|p| p.starts_with("backend_sys:")));
    }
}
