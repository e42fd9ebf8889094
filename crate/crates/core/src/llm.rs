//! Completion gateway with transcript recording and deterministic replay.
//!
//! Three modes share one interface:
//!
//! * **live**: every request goes to a [`CompletionBackend`] (normally the
//!   chat-completions HTTP endpoint).
//! * **record**: as live, and each response is appended to a JSON Lines
//!   transcript keyed by the request digest.
//! * **replay**: responses come from a transcript, consumed first-in
//!   first-out per digest. No network traffic; an unknown digest is a
//!   [`GatewayError::ReplayMiss`], which usually means a prompt changed and
//!   the fixture needs re-recording.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const ENV_API_BASE: &str = "LLM_API_BASE";
pub const ENV_API_KEY: &str = "LLM_API_KEY";
pub const ENV_MODEL_ID: &str = "LLM_MODEL_ID";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("service returned HTTP {status}: {body}")]
    Service { status: u16, body: String },
    #[error("replay miss: no recorded response for digest {digest}")]
    ReplayMiss { digest: String },
    #[error("invalid completion request: {0}")]
    InvalidRequest(String),
    #[error("malformed service response: {0}")]
    MalformedResponse(String),
    #[error("transcript {path}: {message}")]
    Transcript { path: PathBuf, message: String },
    #[error("gateway configuration: {0}")]
    Config(String),
}

impl GatewayError {
    pub fn is_replay_miss(&self) -> bool {
        matches!(self, GatewayError::ReplayMiss { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("messages must not be empty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if self.max_tokens == Some(0) {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        if let Some(m) = self.messages.iter().find(|m| m.role != Role::Assistant && m.content.is_empty()) {
            return Err(GatewayError::InvalidRequest(format!("empty {} message", m.role)));
        }
        Ok(())
    }

    /// Short human-readable description stored next to recorded responses.
    pub fn summary(&self) -> String {
        let last = self.messages.last().map(|m| m.content.as_str()).unwrap_or("");
        let head: String = last.chars().take(120).collect();
        format!("{} t={} msgs={} | {}", self.model_id, self.temperature, self.messages.len(), head.replace('\n', " "))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl TokenUsage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

impl std::ops::AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: Self) {
        self.prompt_tokens += rhs.prompt_tokens;
        self.completion_tokens += rhs.completion_tokens;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_usage: Option<TokenUsage>,
}

/// Stable content hash of `(model_id, messages, temperature)`.
///
/// `max_tokens` is deliberately not part of the key. Temperature is hashed
/// through a fixed six-decimal rendering so `0.1` and `0.10000000000000001`
/// agree.
pub fn digest(req: &CompletionRequest) -> String {
    let mut h = Sha256::new();
    let mut field = |bytes: &[u8]| {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    field(b"v1");
    field(req.model_id.as_bytes());
    field(format!("{:.6}", req.temperature).as_bytes());
    for m in &req.messages {
        field(m.role.to_string().as_bytes());
        field(m.content.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Anything that can answer a completion request.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError>;
}

/// One JSON Lines record of a transcript file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub digest: String,
    pub request_summary: String,
    pub response_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_usage: Option<TokenUsage>,
}

/// Digest → responses, consumed FIFO during replay.
#[derive(Debug, Clone, Default)]
pub struct Transcript {
    entries: HashMap<String, VecDeque<TranscriptEntry>>,
}

impl Transcript {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let file = File::open(path)
            .map_err(|e| GatewayError::Transcript { path: path.to_path_buf(), message: e.to_string() })?;
        let mut t = Transcript::default();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line =
                line.map_err(|e| GatewayError::Transcript { path: path.to_path_buf(), message: e.to_string() })?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: TranscriptEntry = serde_json::from_str(&line).map_err(|e| GatewayError::Transcript {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })?;
            t.push(entry);
        }
        Ok(t)
    }

    pub fn push(&mut self, entry: TranscriptEntry) {
        self.entries.entry(entry.digest.clone()).or_default().push_back(entry);
    }

    /// Appends a response for `req`.
    pub fn add(&mut self, req: &CompletionRequest, response_text: impl Into<String>) {
        self.push(TranscriptEntry {
            digest: digest(req),
            request_summary: req.summary(),
            response_text: response_text.into(),
            token_usage: None,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

enum Mode {
    Live(Box<dyn CompletionBackend>),
    Record { backend: Box<dyn CompletionBackend>, sink: Mutex<File>, path: PathBuf },
    Replay(Mutex<Transcript>),
}

/// The completion gateway. Safe to share across threads.
pub struct Gateway {
    mode: Mode,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match &self.mode {
            Mode::Live(_) => "live".to_string(),
            Mode::Record { path, .. } => format!("record({})", path.display()),
            Mode::Replay(_) => "replay".to_string(),
        };
        f.debug_struct("Gateway").field("mode", &mode).finish()
    }
}

impl Gateway {
    pub fn live(backend: Box<dyn CompletionBackend>) -> Self {
        Self { mode: Mode::Live(backend) }
    }

    /// Appends to `path`, creating it if needed. Existing lines are never rewritten.
    pub fn record(backend: Box<dyn CompletionBackend>, path: &Path) -> Result<Self, GatewayError> {
        let sink = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| GatewayError::Transcript { path: path.to_path_buf(), message: e.to_string() })?;
        Ok(Self { mode: Mode::Record { backend, sink: Mutex::new(sink), path: path.to_path_buf() } })
    }

    pub fn replay(transcript: Transcript) -> Self {
        Self { mode: Mode::Replay(Mutex::new(transcript)) }
    }

    pub fn replay_file(path: &Path) -> Result<Self, GatewayError> {
        Ok(Self::replay(Transcript::load(path)?))
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        req.validate()?;
        match &self.mode {
            Mode::Live(backend) => backend.complete(req),
            Mode::Record { backend, sink, path } => {
                let resp = backend.complete(req)?;
                let entry = TranscriptEntry {
                    digest: digest(req),
                    request_summary: req.summary(),
                    response_text: resp.text.clone(),
                    token_usage: resp.token_usage,
                };
                let mut line = serde_json::to_string(&entry)
                    .map_err(|e| GatewayError::Transcript { path: path.clone(), message: e.to_string() })?;
                line.push('\n');
                let mut file = sink.lock().unwrap_or_else(|p| p.into_inner());
                file.write_all(line.as_bytes())
                    .and_then(|_| file.flush())
                    .map_err(|e| GatewayError::Transcript { path: path.clone(), message: e.to_string() })?;
                Ok(resp)
            }
            Mode::Replay(transcript) => {
                let d = digest(req);
                let mut t = transcript.lock().unwrap_or_else(|p| p.into_inner());
                match t.entries.get_mut(&d).and_then(VecDeque::pop_front) {
                    Some(e) => Ok(CompletionResponse { text: e.response_text, token_usage: e.token_usage }),
                    None => Err(GatewayError::ReplayMiss { digest: d }),
                }
            }
        }
    }
}

/// Per-request model settings shared by every pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSettings {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    /// Prepended as a system message when set.
    pub system_prompt: Option<String>,
}

impl Default for LlmSettings {
    fn default() -> Self {
        Self { model_id: "gpt-4".into(), temperature: 0.0, max_tokens: None, system_prompt: None }
    }
}

impl LlmSettings {
    /// The slightly warmer preset used for models that misbehave at exactly zero.
    pub fn low_temperature_preset(model_id: impl Into<String>) -> Self {
        Self { model_id: model_id.into(), temperature: 0.1, ..Self::default() }
    }

    pub fn request(&self, prompt: &str) -> CompletionRequest {
        let mut messages = Vec::with_capacity(2);
        if let Some(sys) = &self.system_prompt {
            messages.push(ChatMessage::system(sys.clone()));
        }
        messages.push(ChatMessage::user(prompt));
        CompletionRequest {
            model_id: self.model_id.clone(),
            messages,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }
}

/// A gateway bound to settings, metering the calls made through it.
///
/// Create one per question so token usage can be attributed.
pub struct Chat<'a> {
    gateway: &'a Gateway,
    settings: &'a LlmSettings,
    meter: Mutex<(u32, TokenUsage)>,
}

impl<'a> Chat<'a> {
    pub fn new(gateway: &'a Gateway, settings: &'a LlmSettings) -> Self {
        Self { gateway, settings, meter: Mutex::new((0, TokenUsage::default())) }
    }

    pub fn ask(&self, prompt: &str) -> Result<String, GatewayError> {
        let resp = self.gateway.complete(&self.settings.request(prompt))?;
        let mut meter = self.meter.lock().unwrap_or_else(|p| p.into_inner());
        meter.0 += 1;
        if let Some(u) = resp.token_usage {
            meter.1 += u;
        }
        Ok(resp.text)
    }

    pub fn calls(&self) -> u32 {
        self.meter.lock().unwrap_or_else(|p| p.into_inner()).0
    }

    pub fn usage(&self) -> TokenUsage {
        self.meter.lock().unwrap_or_else(|p| p.into_inner()).1
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 2, initial_backoff: Duration::from_millis(500) }
    }
}

/// Client for the `POST <base>/chat/completions` JSON protocol.
pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<TokenUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

impl HttpBackend {
    pub fn new(base: &str, api_key: Option<String>, retry: RetryPolicy) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(Self { endpoint: format!("{}/chat/completions", base.trim_end_matches('/')), api_key, client, retry })
    }

    /// Reads `LLM_API_BASE` and `LLM_API_KEY`.
    pub fn from_env() -> Result<Self, GatewayError> {
        let base =
            std::env::var(ENV_API_BASE).map_err(|_| GatewayError::Config(format!("{ENV_API_BASE} is not set")))?;
        Self::new(&base, std::env::var(ENV_API_KEY).ok(), RetryPolicy::default())
    }

    fn attempt(&self, body: &WireRequest<'_>) -> Result<CompletionResponse, Attempt> {
        let mut rb = self.client.post(&self.endpoint).json(body);
        if let Some(key) = &self.api_key {
            rb = rb.bearer_auth(key);
        }
        let resp = rb.send().map_err(|e| Attempt::Transient(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Attempt::Transient(e.to_string()))?;
        if !status.is_success() {
            return Err(Attempt::Fatal(GatewayError::Service { status: status.as_u16(), body: text }));
        }
        let wire: WireResponse =
            serde_json::from_str(&text).map_err(|e| Attempt::Fatal(GatewayError::MalformedResponse(e.to_string())))?;
        let content =
            wire.choices.into_iter().next().and_then(|c| c.message.content).ok_or_else(|| {
                Attempt::Fatal(GatewayError::MalformedResponse("no choices[0].message.content".into()))
            })?;
        Ok(CompletionResponse { text: content, token_usage: wire.usage })
    }
}

enum Attempt {
    Transient(String),
    Fatal(GatewayError),
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        let body = WireRequest {
            model: &req.model_id,
            messages: &req.messages,
            temperature: req.temperature,
            max_tokens: req.max_tokens,
        };
        let mut backoff = self.retry.initial_backoff;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body) {
                Ok(resp) => return Ok(resp),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Transient(message)) if attempts > self.retry.max_retries => {
                    return Err(GatewayError::Transport { attempts, message });
                }
                Err(Attempt::Transient(message)) => {
                    tracing::warn!(attempts, %message, "transport error, retrying");
                    std::thread::sleep(backoff);
                    backoff *= 2;
                }
            }
        }
    }
}

/// Backend answering from a closure; handy for authoring fixtures.
pub struct FnBackend<F>(pub F);

impl<F> CompletionBackend for FnBackend<F>
where
    F: Fn(&CompletionRequest) -> Result<String, GatewayError> + Send + Sync,
{
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        (self.0)(req).map(|text| CompletionResponse { text, token_usage: None })
    }
}

/// Backend returning queued replies in order, regardless of the request.
#[derive(Default)]
pub struct ScriptedBackend {
    replies: Mutex<VecDeque<Result<CompletionResponse, GatewayError>>>,
    seen: Mutex<Vec<CompletionRequest>>,
}

impl ScriptedBackend {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let replies =
            replies.into_iter().map(|s| Ok(CompletionResponse { text: s.into(), token_usage: None })).collect();
        Self { replies: Mutex::new(replies), seen: Mutex::default() }
    }

    pub fn push_error(&self, err: GatewayError) {
        self.replies.lock().unwrap().push_back(Err(err));
    }

    pub fn push_response(&self, resp: CompletionResponse) {
        self.replies.lock().unwrap().push_back(Ok(resp));
    }

    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.seen.lock().unwrap().clone()
    }
}

impl CompletionBackend for ScriptedBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        self.seen.lock().unwrap().push(req.clone());
        self.replies
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| Err(GatewayError::Transport { attempts: 1, message: "script exhausted".into() }))
    }
}

impl<T: CompletionBackend + ?Sized> CompletionBackend for std::sync::Arc<T> {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        (**self).complete(req)
    }
}
