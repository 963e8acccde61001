//! Chat-completion client for OpenAI-compatible endpoints.
//!
//! [`LlmClient`] wraps a [`ChatBackend`] with a persistent response cache,
//! bounded retries with exponential backoff, an optional requests-per-minute
//! limiter and a prompt-length guard. Backends:
//!
//! * [`HttpBackend`]: `POST {base}/chat/completions` with bearer auth.
//! * [`ScriptedBackend`]: replays a fixed list of replies, in order.
//! * [`FnBackend`]: answers from a closure, for content-dependent test doubles.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("endpoint unavailable after {attempts} attempts: {last}")]
    EndpointUnavailable { attempts: u32, last: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    NonRetriableHttpError { status: u16, body: String },
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("invalid chat request: {0}")]
    InvalidRequest(String),
    #[error("prompt of {chars} characters exceeds the {limit}-character context guard")]
    PromptTooLong { chars: usize, limit: usize },
    #[error("scripted backend exhausted after {0} replies")]
    ScriptExhausted(usize),
    #[error("response cache {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed endpoint response: {0}")]
    BadResponse(String),
}

impl LlmError {
    /// True for failures where the endpoint itself could not be used.
    pub fn is_endpoint_failure(&self) -> bool {
        matches!(
            self,
            LlmError::EndpointUnavailable { .. }
                | LlmError::NonRetriableHttpError { .. }
                | LlmError::BadResponse(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct RawParams {
    temperature: f64,
    max_tokens: u32,
    sampling_enabled: bool,
}

/// Decoding parameters. Greedy decoding (temperature 0) unless sampling is enabled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct GenerationParams {
    temperature: f64,
    max_tokens: u32,
    sampling_enabled: bool,
}

impl TryFrom<RawParams> for GenerationParams {
    type Error = LlmError;
    fn try_from(r: RawParams) -> Result<Self, LlmError> {
        GenerationParams::new(r.temperature, r.max_tokens, r.sampling_enabled)
    }
}

impl From<GenerationParams> for RawParams {
    fn from(p: GenerationParams) -> Self {
        RawParams {
            temperature: p.temperature,
            max_tokens: p.max_tokens,
            sampling_enabled: p.sampling_enabled,
        }
    }
}

impl GenerationParams {
    pub fn new(
        temperature: f64,
        max_tokens: u32,
        sampling_enabled: bool,
    ) -> Result<Self, LlmError> {
        if !temperature.is_finite() || temperature < 0.0 {
            return Err(LlmError::InvalidParams(format!(
                "temperature must be a finite value >= 0, got {temperature}"
            )));
        }
        if max_tokens == 0 {
            return Err(LlmError::InvalidParams(
                "max_tokens must be positive".into(),
            ));
        }
        if !sampling_enabled && temperature != 0.0 {
            return Err(LlmError::InvalidParams(format!(
                "temperature {temperature} requires sampling to be enabled"
            )));
        }
        Ok(GenerationParams {
            temperature,
            max_tokens,
            sampling_enabled,
        })
    }

    pub fn greedy(max_tokens: u32) -> Result<Self, LlmError> {
        Self::new(0.0, max_tokens, false)
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn max_tokens(&self) -> u32 {
        self.max_tokens
    }

    pub fn sampling_enabled(&self) -> bool {
        self.sampling_enabled
    }
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            temperature: 0.0,
            max_tokens: 1024,
            sampling_enabled: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub params: GenerationParams,
    /// Distinguishes repeated sampled draws of the same prompt in the cache.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draw: Option<u32>,
}

impl ChatRequest {
    pub fn new(messages: Vec<Message>, params: GenerationParams) -> Result<Self, LlmError> {
        if !messages.iter().any(|m| m.role == Role::User) {
            return Err(LlmError::InvalidRequest("no user message".into()));
        }
        Ok(ChatRequest {
            messages,
            params,
            draw: None,
        })
    }

    /// Single user message with default greedy parameters.
    pub fn user(content: impl Into<String>) -> Self {
        ChatRequest {
            messages: vec![Message::user(content)],
            params: GenerationParams::default(),
            draw: None,
        }
    }

    pub fn with_params(mut self, params: GenerationParams) -> Self {
        self.params = params;
        self
    }

    pub fn with_draw(mut self, draw: u32) -> Self {
        self.draw = Some(draw);
        self
    }

    pub fn prompt_chars(&self) -> usize {
        self.messages
            .iter()
            .map(|m| m.content.chars().count())
            .sum()
    }

    /// Concatenated message contents, for assertions and logs.
    pub fn text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// SHA-256 digest identifying a (model, request) pair.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey(pub [u8; 32]);

impl CacheKey {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<CacheKey> {
        let bytes = hex::decode(s).ok()?;
        Some(CacheKey(bytes.try_into().ok()?))
    }
}

impl fmt::Debug for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CacheKey({})", self.to_hex())
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for CacheKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for CacheKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        CacheKey::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex digits"))
    }
}

/// Stable digest over the model name, every message in order and every parameter.
pub fn cache_key(req: &ChatRequest, model: &str) -> CacheKey {
    #[derive(Serialize)]
    struct Canonical<'a> {
        model: &'a str,
        messages: &'a [Message],
        temperature: f64,
        max_tokens: u32,
        sampling_enabled: bool,
        #[serde(skip_serializing_if = "Option::is_none")]
        draw: Option<u32>,
    }
    let canonical = Canonical {
        model,
        messages: &req.messages,
        temperature: req.params.temperature,
        max_tokens: req.params.max_tokens,
        sampling_enabled: req.params.sampling_enabled,
        draw: req.draw,
    };
    let bytes = serde_json::to_vec(&canonical).expect("canonical request serializes");
    CacheKey(Sha256::digest(&bytes).into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmResponse {
    pub content: String,
    pub from_cache: bool,
    pub latency: Duration,
    pub key: CacheKey,
}

/// Failure of a single backend call, before retry handling.
#[derive(Debug, Clone, Error)]
pub enum BackendError {
    /// Connection failure, timeout, 429 or 5xx: worth retrying.
    #[error("{0}")]
    Transient(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("{0}")]
    BadResponse(String),
    #[error("script exhausted after {0} replies")]
    ScriptExhausted(usize),
}

pub trait ChatBackend: Send + Sync {
    fn send(&self, model: &str, req: &ChatRequest) -> Result<String, BackendError>;
}

/// Endpoint coordinates. The token is read from the environment by the caller.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Base URL such as `http://localhost:8000/v1`; a URL already ending in
    /// `/chat/completions` is used as-is.
    pub url: String,
    pub model: String,
    #[serde(skip)]
    pub api_key: Option<String>,
    pub timeout_secs: u64,
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        EndpointConfig {
            url: url.into(),
            model: model.into(),
            api_key: None,
            timeout_secs: 300,
        }
    }

    pub fn completions_url(&self) -> String {
        let base = self.url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

pub struct HttpBackend {
    url: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(endpoint: &EndpointConfig) -> Result<Self, LlmError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(endpoint.timeout_secs))
            .build()
            .map_err(|e| LlmError::InvalidRequest(format!("http client: {e}")))?;
        Ok(HttpBackend {
            url: endpoint.completions_url(),
            api_key: endpoint.api_key.clone(),
            http,
        })
    }
}

#[derive(Serialize)]
struct CompletionBody<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct CompletionReply {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    #[serde(default)]
    content: Option<String>,
}

impl ChatBackend for HttpBackend {
    fn send(&self, model: &str, req: &ChatRequest) -> Result<String, BackendError> {
        let body = CompletionBody {
            model,
            messages: &req.messages,
            temperature: req.params.temperature,
            max_tokens: req.params.max_tokens,
        };
        let mut call = self.http.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call
            .send()
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Transient(format!("HTTP {status}: {text}")));
        }
        if !status.is_success() {
            return Err(BackendError::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        let reply: CompletionReply =
            serde_json::from_str(&text).map_err(|e| BackendError::BadResponse(e.to_string()))?;
        let choice = reply
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::BadResponse("no choices in response".into()))?;
        Ok(choice.message.content.unwrap_or_default())
    }
}

/// Replays scripted replies strictly in order and records every request it receives.
#[derive(Default)]
pub struct ScriptedBackend {
    script: Mutex<VecDeque<String>>,
    served: AtomicU64,
    received: Mutex<Vec<ChatRequest>>,
}

impl ScriptedBackend {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedBackend {
            script: Mutex::new(replies.into_iter().map(Into::into).collect()),
            ..Default::default()
        }
    }

    pub fn remaining(&self) -> usize {
        self.script.lock().unwrap().len()
    }

    pub fn served(&self) -> u64 {
        self.served.load(Ordering::SeqCst)
    }

    pub fn received(&self) -> Vec<ChatRequest> {
        self.received.lock().unwrap().clone()
    }
}

impl ChatBackend for ScriptedBackend {
    fn send(&self, _model: &str, req: &ChatRequest) -> Result<String, BackendError> {
        let mut script = self.script.lock().unwrap();
        let reply = script
            .pop_front()
            .ok_or_else(|| BackendError::ScriptExhausted(self.served() as usize))?;
        self.served.fetch_add(1, Ordering::SeqCst);
        self.received.lock().unwrap().push(req.clone());
        Ok(reply)
    }
}

type Responder = dyn Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync;

/// Answers each request with a closure.
pub struct FnBackend {
    respond: Box<Responder>,
    calls: AtomicU64,
}

impl FnBackend {
    pub fn new<F>(f: F) -> Self
    where
        F: Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync + 'static,
    {
        FnBackend {
            respond: Box::new(f),
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for FnBackend {
    fn send(&self, _model: &str, req: &ChatRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.respond)(req)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<B> {
    fn send(&self, model: &str, req: &ChatRequest) -> Result<String, BackendError> {
        (**self).send(model, req)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: CacheKey,
    model: String,
    content: String,
}

/// Append-only keyed response store, optionally persisted as JSON lines.
#[derive(Default)]
pub struct ResponseCache {
    entries: Mutex<HashMap<CacheKey, String>>,
    file: Option<(PathBuf, Mutex<File>)>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache::default()
    }

    /// Opens (creating if needed) a cache file and loads its entries.
    /// A torn final line from an interrupted write is skipped.
    pub fn open(path: &Path) -> Result<Self, LlmError> {
        let io = |source| LlmError::Cache {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let mut entries = HashMap::new();
        let mut torn_tail = false;
        if path.exists() {
            let bytes = fs::read(path).map_err(io)?;
            torn_tail = bytes.last().is_some_and(|b| *b != b'\n');
            for (n, line) in BufReader::new(bytes.as_slice()).lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheLine>(&line) {
                    Ok(rec) => {
                        entries.entry(rec.key).or_insert(rec.content);
                    }
                    Err(e) => tracing::warn!("skipping unreadable cache line {}: {e}", n + 1),
                }
            }
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        if torn_tail {
            file.write_all(b"\n").map_err(io)?;
        }
        Ok(ResponseCache {
            entries: Mutex::new(entries),
            file: Some((path.to_path_buf(), Mutex::new(file))),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &CacheKey) -> Option<String> {
        self.entries.lock().unwrap().get(key).cloned()
    }

    pub fn insert(&self, key: CacheKey, model: &str, content: &str) -> Result<(), LlmError> {
        let mut entries = self.entries.lock().unwrap();
        if entries.contains_key(&key) {
            return Ok(());
        }
        if let Some((path, file)) = &self.file {
            let mut line = serde_json::to_string(&CacheLine {
                key,
                model: model.to_string(),
                content: content.to_string(),
            })
            .expect("cache line serializes");
            line.push('\n');
            let mut f = file.lock().unwrap();
            f.write_all(line.as_bytes())
                .and_then(|_| f.flush())
                .map_err(|source| LlmError::Cache {
                    path: path.clone(),
                    source,
                })?;
        }
        entries.insert(key, content.to_string());
        Ok(())
    }

    pub fn sync(&self) -> Result<(), LlmError> {
        if let Some((path, file)) = &self.file {
            file.lock()
                .unwrap()
                .sync_all()
                .map_err(|source| LlmError::Cache {
                    path: path.clone(),
                    source,
                })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based): initial * 2^(retry-1).
    pub fn backoff(&self, retry: u32) -> Duration {
        self.initial_backoff
            .saturating_mul(1u32 << retry.saturating_sub(1).min(16))
    }
}

/// Spaces outgoing requests evenly to stay under a requests-per-minute budget.
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Instant>,
}

impl RateLimiter {
    pub fn per_minute(requests: u32) -> Self {
        RateLimiter {
            interval: Duration::from_secs(60) / requests.max(1),
            next: Mutex::new(Instant::now()),
        }
    }

    pub fn acquire(&self) {
        let wait = {
            let mut next = self.next.lock().unwrap();
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + self.interval;
            slot - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

/// Call counters, readable while a run is in progress.
#[derive(Debug, Default)]
pub struct ClientStats {
    pub network_calls: AtomicU64,
    pub cache_hits: AtomicU64,
    pub retries: AtomicU64,
}

/// Thread-safe cached client bound to one model on one backend.
pub struct LlmClient {
    backend: Box<dyn ChatBackend>,
    model: String,
    cache: ResponseCache,
    retry: RetryPolicy,
    limiter: Option<RateLimiter>,
    max_prompt_chars: Option<usize>,
    stats: ClientStats,
}

impl LlmClient {
    pub fn new(backend: impl ChatBackend + 'static, model: impl Into<String>) -> Self {
        LlmClient {
            backend: Box::new(backend),
            model: model.into(),
            cache: ResponseCache::in_memory(),
            retry: RetryPolicy::default(),
            limiter: None,
            max_prompt_chars: None,
            stats: ClientStats::default(),
        }
    }

    pub fn http(endpoint: &EndpointConfig) -> Result<Self, LlmError> {
        Ok(LlmClient::new(
            HttpBackend::new(endpoint)?,
            endpoint.model.clone(),
        ))
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = cache;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_rate_limit(mut self, requests_per_minute: Option<u32>) -> Self {
        self.limiter = requests_per_minute.map(RateLimiter::per_minute);
        self
    }

    pub fn with_prompt_limit(mut self, max_chars: Option<usize>) -> Self {
        self.max_prompt_chars = max_chars;
        self
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn stats(&self) -> &ClientStats {
        &self.stats
    }

    pub fn network_calls(&self) -> u64 {
        self.stats.network_calls.load(Ordering::SeqCst)
    }

    pub fn key(&self, req: &ChatRequest) -> CacheKey {
        cache_key(req, &self.model)
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<LlmResponse, LlmError> {
        if !req.messages.iter().any(|m| m.role == Role::User) {
            return Err(LlmError::InvalidRequest("no user message".into()));
        }
        let started = Instant::now();
        let key = self.key(req);
        if let Some(content) = self.cache.get(&key) {
            self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(LlmResponse {
                content,
                from_cache: true,
                latency: started.elapsed(),
                key,
            });
        }
        if let Some(limit) = self.max_prompt_chars {
            let chars = req.prompt_chars();
            if chars > limit {
                return Err(LlmError::PromptTooLong { chars, limit });
            }
        }

        let attempts = self.retry.attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                self.stats.retries.fetch_add(1, Ordering::Relaxed);
                std::thread::sleep(self.retry.backoff(attempt - 1));
            }
            if let Some(l) = &self.limiter {
                l.acquire();
            }
            self.stats.network_calls.fetch_add(1, Ordering::SeqCst);
            match self.backend.send(&self.model, req) {
                Ok(content) => {
                    self.cache.insert(key, &self.model, &content)?;
                    return Ok(LlmResponse {
                        content,
                        from_cache: false,
                        latency: started.elapsed(),
                        key,
                    });
                }
                Err(BackendError::Transient(msg)) => {
                    tracing::warn!(attempt, "transient endpoint failure: {msg}");
                    last = msg;
                }
                Err(BackendError::Status { status, body }) => {
                    return Err(LlmError::NonRetriableHttpError { status, body })
                }
                Err(BackendError::BadResponse(msg)) => return Err(LlmError::BadResponse(msg)),
                Err(BackendError::ScriptExhausted(n)) => return Err(LlmError::ScriptExhausted(n)),
            }
        }
        Err(LlmError::EndpointUnavailable { attempts, last })
    }
}
