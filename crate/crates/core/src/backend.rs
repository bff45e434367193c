//! LLM provider abstraction, retry-on-invalid policy and token accounting.
//!
//! Two providers speak the [`Provider`] contract:
//!
//! - [`HttpProvider`] posts to an OpenAI-compatible `/v1/chat/completions`
//!   endpoint.
//! - [`ReplayProvider`] serves recorded responses keyed by the role tag and
//!   a SHA-256 digest of the canonical message serialization. Repeated
//!   requests for the same prompt (retries) are served by attempt number,
//!   so lookups do not depend on the order in which requests arrive.
//!
//! [`RecordingProvider`] wraps any provider and captures its responses into
//! a replay file.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::prompting::{ChatMessage, ParseError, PromptBundle, RoleTag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub role_tag: RoleTag,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// 1-based attempt number for this prompt.
    pub attempt: u32,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("request has no messages".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
        }
        if self.attempt == 0 {
            return Err(BackendError::InvalidRequest("attempt numbers start at 1".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        message_digest(self.role_tag, &self.messages)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Replay key: hex SHA-256 over the role tag and the JSON serialization of
/// the messages.
pub fn message_digest(role_tag: RoleTag, messages: &[ChatMessage]) -> String {
    #[derive(Serialize)]
    struct Canonical<'a> {
        role_tag: RoleTag,
        messages: &'a [ChatMessage],
    }
    let canonical = serde_json::to_vec(&Canonical { role_tag, messages })
        .expect("messages serialize to JSON");
    hex::encode(Sha256::digest(&canonical))
}

pub fn bundle_digest(bundle: &PromptBundle) -> String {
    message_digest(bundle.role_tag, &bundle.messages)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderErrorKind {
    Transport,
    Status(u16),
    Decode,
    ReplayMiss,
}

#[derive(Debug, Clone, Error)]
#[error("{kind}: {message}")]
pub struct ProviderError {
    pub kind: ProviderErrorKind,
    pub message: String,
    pub retryable: bool,
}

impl fmt::Display for ProviderErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProviderErrorKind::Transport => f.write_str("transport error"),
            ProviderErrorKind::Status(code) => write!(f, "HTTP status {code}"),
            ProviderErrorKind::Decode => f.write_str("malformed provider response"),
            ProviderErrorKind::ReplayMiss => f.write_str("no replay entry"),
        }
    }
}

impl ProviderError {
    pub fn transport(message: impl Into<String>) -> Self {
        Self {
            kind: ProviderErrorKind::Transport,
            message: message.into(),
            retryable: true,
        }
    }

    /// 429 and 5xx are worth retrying; other statuses are not.
    pub fn status(code: u16, body: impl Into<String>) -> Self {
        Self {
            kind: ProviderErrorKind::Status(code),
            message: body.into(),
            retryable: code == 429 || code >= 500,
        }
    }

    pub fn decode(message: impl Into<String>) -> Self {
        Self {
            kind: ProviderErrorKind::Decode,
            message: message.into(),
            retryable: false,
        }
    }

    pub fn replay_miss(role_tag: RoleTag, digest: &str, attempt: u32) -> Self {
        Self {
            kind: ProviderErrorKind::ReplayMiss,
            message: format!("role {role_tag}, digest {digest}, attempt {attempt}"),
            retryable: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error(transparent)]
    Provider(#[from] ProviderError),

    #[error("invalid response after {attempts} attempts ({cause}); last response: {last_text:?}")]
    InvalidResponse {
        attempts: u32,
        cause: ParseError,
        last_text: String,
        /// Usage of the rejected attempts.
        usage: RoleUsage,
    },
}

/// An LLM endpoint. Implementations must tolerate concurrent callers.
pub trait Provider: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, ProviderError>;
}

impl<P: Provider + ?Sized> Provider for Arc<P> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, ProviderError> {
        (**self).complete(request)
    }
}

/// OpenAI-compatible chat-completions client.
pub struct HttpProvider {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

/// Environment variable holding the bearer token for [`HttpProvider`].
pub const API_KEY_ENV: &str = "MQM_APE_API_KEY";

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
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

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl HttpProvider {
    pub fn new(base_url: &str, model: impl Into<String>, api_key: Option<String>) -> Self {
        let base = base_url.trim_end_matches('/');
        let base = base.strip_suffix("/v1").unwrap_or(base);
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(300)))
            .build()
            .into();
        Self {
            endpoint: format!("{base}/v1/chat/completions"),
            model: model.into(),
            api_key,
            agent,
        }
    }

    /// Reads the API key from [`API_KEY_ENV`] when set.
    pub fn from_env(base_url: &str, model: impl Into<String>) -> Self {
        Self::new(base_url, model, std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()))
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl Provider for HttpProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, ProviderError> {
        let body = WireRequest {
            model: &self.model,
            messages: &request.messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        };
        let mut call = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = call
            .send_json(&body)
            .map_err(|e| ProviderError::transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(ProviderError::status(status, text));
        }
        let wire: WireResponse =
            serde_json::from_str(&text).map_err(|e| ProviderError::decode(e.to_string()))?;
        let content = wire
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ProviderError::decode("response has no choices[0].message.content"))?;
        let usage = wire.usage.unwrap_or(WireUsage {
            prompt_tokens: 0,
            completion_tokens: 0,
        });
        Ok(CompletionResult {
            text: content,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
        })
    }
}

/// One line of a replay file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub role_tag: RoleTag,
    pub digest: String,
    /// When absent, entries for the same key are numbered in file order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<u32>,
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

type ReplayKey = (RoleTag, String, u32);

/// Serves responses from a replay file.
#[derive(Debug, Default)]
pub struct ReplayProvider {
    entries: HashMap<ReplayKey, CompletionResult>,
    served: AtomicUsize,
}

impl ReplayProvider {
    pub fn from_entries(entries: impl IntoIterator<Item = ReplayEntry>) -> Result<Self> {
        let mut next_attempt: HashMap<(RoleTag, String), u32> = HashMap::new();
        let mut map = HashMap::new();
        for entry in entries {
            let counter = next_attempt
                .entry((entry.role_tag, entry.digest.clone()))
                .or_insert(0);
            let attempt = entry.attempt.unwrap_or(*counter + 1);
            *counter = (*counter).max(attempt);
            let key = (entry.role_tag, entry.digest, attempt);
            let result = CompletionResult {
                text: entry.text,
                prompt_tokens: entry.prompt_tokens,
                completion_tokens: entry.completion_tokens,
            };
            if map.insert(key.clone(), result).is_some() {
                return Err(Error::invalid(format!(
                    "duplicate replay entry for {} {} attempt {}",
                    key.0, key.1, key.2
                )));
            }
        }
        Ok(Self {
            entries: map,
            served: AtomicUsize::new(0),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ReplayEntry = serde_json::from_str(line).map_err(|e| Error::Ingest {
                path: path.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            })?;
            entries.push(entry);
        }
        Self::from_entries(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of responses served so far.
    pub fn served(&self) -> usize {
        self.served.load(Ordering::SeqCst)
    }
}

impl Provider for ReplayProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, ProviderError> {
        let digest = request.digest();
        let key = (request.role_tag, digest, request.attempt);
        match self.entries.get(&key) {
            Some(result) => {
                self.served.fetch_add(1, Ordering::SeqCst);
                Ok(result.clone())
            }
            None => Err(ProviderError::replay_miss(key.0, &key.1, key.2)),
        }
    }
}

/// Wraps a live provider and captures every successful response.
pub struct RecordingProvider<P> {
    inner: P,
    recorded: Mutex<BTreeMap<ReplayKey, CompletionResult>>,
}

impl<P: Provider> RecordingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            recorded: Mutex::new(BTreeMap::new()),
        }
    }

    /// Recorded entries sorted by (role, digest, attempt).
    pub fn entries(&self) -> Vec<ReplayEntry> {
        let recorded = self.recorded.lock().expect("recording lock poisoned");
        recorded
            .iter()
            .map(|((role_tag, digest, attempt), result)| ReplayEntry {
                role_tag: *role_tag,
                digest: digest.clone(),
                attempt: Some(*attempt),
                text: result.text.clone(),
                prompt_tokens: result.prompt_tokens,
                completion_tokens: result.completion_tokens,
            })
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_replay(path, &self.entries())
    }
}

impl<P: Provider> Provider for RecordingProvider<P> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, ProviderError> {
        let result = self.inner.complete(request)?;
        let key = (request.role_tag, request.digest(), request.attempt);
        self.recorded
            .lock()
            .expect("recording lock poisoned")
            .entry(key)
            .or_insert_with(|| result.clone());
        Ok(result)
    }
}

pub fn write_replay(path: &Path, entries: &[ReplayEntry]) -> Result<()> {
    let mut out = Vec::new();
    for entry in entries {
        serde_json::to_writer(&mut out, entry)?;
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Provider backed by a closure, for tests and simulations.
pub struct ScriptedProvider<F> {
    respond: F,
}

impl<F> ScriptedProvider<F>
where
    F: Fn(&CompletionRequest) -> Result<CompletionResult, ProviderError> + Send + Sync,
{
    pub fn new(respond: F) -> Self {
        Self { respond }
    }
}

impl<F> Provider for ScriptedProvider<F>
where
    F: Fn(&CompletionRequest) -> Result<CompletionResult, ProviderError> + Send + Sync,
{
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, ProviderError> {
        (self.respond)(request)
    }
}

/// Regenerate-on-invalid policy: attempt `k` (1-based) runs at
/// `base + step * (k - 1)`, capped at 1.0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub temperature_step: f64,
    pub base_temperature: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            temperature_step: 0.1,
            base_temperature: 0.0,
        }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.max_attempts == 0 {
            return Err(Error::invalid("retry policy needs at least one attempt"));
        }
        if !(0.0..=2.0).contains(&self.base_temperature) || self.temperature_step < 0.0 {
            return Err(Error::invalid("retry temperatures out of range"));
        }
        Ok(())
    }

    pub fn temperature(&self, attempt: u32) -> f64 {
        let raw = self.base_temperature + self.temperature_step * f64::from(attempt.saturating_sub(1));
        // Rounded so that 0.1 steps stay exact decimals (0.30000000000000004 -> 0.3).
        let rounded = (raw * 1e6).round() / 1e6;
        rounded.min(1.0).max(self.base_temperature.min(1.0))
    }
}

/// Per-role completion limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxTokens {
    pub evaluator: u32,
    pub editor: u32,
    pub verifier: u32,
}

impl Default for MaxTokens {
    fn default() -> Self {
        Self {
            evaluator: 512,
            editor: 512,
            verifier: 8,
        }
    }
}

impl MaxTokens {
    pub fn for_role(&self, role: RoleTag) -> u32 {
        match role {
            RoleTag::Evaluator => self.evaluator,
            RoleTag::Editor => self.editor,
            RoleTag::Verifier => self.verifier,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleUsage {
    pub requests: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl RoleUsage {
    pub fn add(&mut self, result: &CompletionResult) {
        self.requests += 1;
        self.prompt_tokens += result.prompt_tokens;
        self.completion_tokens += result.completion_tokens;
    }

    pub fn merge(&mut self, other: &RoleUsage) {
        self.requests += other.requests;
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
    }
}

pub type UsageTotals = BTreeMap<RoleTag, RoleUsage>;

/// Thread-safe accumulator of token usage per role.
#[derive(Debug, Default)]
pub struct UsageLedger {
    totals: Mutex<UsageTotals>,
}

impl UsageLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, role: RoleTag, result: &CompletionResult) {
        self.totals
            .lock()
            .expect("ledger lock poisoned")
            .entry(role)
            .or_default()
            .add(result);
    }

    pub fn snapshot(&self) -> UsageTotals {
        self.totals.lock().expect("ledger lock poisoned").clone()
    }
}

/// Counting semaphore bounding in-flight provider requests.
#[derive(Debug)]
struct Limiter {
    available: Mutex<usize>,
    freed: Condvar,
}

impl Limiter {
    fn new(limit: usize) -> Self {
        Self {
            available: Mutex::new(limit.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut available = self.available.lock().expect("limiter lock poisoned");
        while *available == 0 {
            available = self.freed.wait(available).expect("limiter lock poisoned");
        }
        *available -= 1;
        LimiterGuard { limiter: self }
    }
}

struct LimiterGuard<'a> {
    limiter: &'a Limiter,
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.limiter.available.lock().expect("limiter lock poisoned") += 1;
        self.limiter.freed.notify_one();
    }
}

/// A parsed response together with the cost of obtaining it.
#[derive(Debug, Clone)]
pub struct Validated<T> {
    pub value: T,
    /// The accepted completion.
    pub result: CompletionResult,
    /// Usage summed over every attempt, including rejected ones.
    pub usage: RoleUsage,
    pub attempts: u32,
}

/// Provider plus retry policy, usage ledger and in-flight bound.
pub struct LlmClient {
    provider: Arc<dyn Provider>,
    policy: RetryPolicy,
    max_tokens: MaxTokens,
    ledger: Arc<UsageLedger>,
    limiter: Limiter,
    transport_backoff: Duration,
}

impl LlmClient {
    pub fn new(provider: Arc<dyn Provider>, policy: RetryPolicy) -> Self {
        Self {
            provider,
            policy,
            max_tokens: MaxTokens::default(),
            ledger: Arc::new(UsageLedger::new()),
            limiter: Limiter::new(16),
            transport_backoff: Duration::from_millis(500),
        }
    }

    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.limiter = Limiter::new(limit);
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: MaxTokens) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_transport_backoff(mut self, backoff: Duration) -> Self {
        self.transport_backoff = backoff;
        self
    }

    pub fn policy(&self) -> &RetryPolicy {
        &self.policy
    }

    pub fn ledger(&self) -> &Arc<UsageLedger> {
        &self.ledger
    }

    /// One provider call with the in-flight bound applied. Retryable
    /// transport failures are retried with backoff up to `max_attempts`
    /// times; they do not advance the temperature schedule.
    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        request.validate()?;
        let mut tries = 0;
        loop {
            tries += 1;
            let outcome = {
                let _slot = self.limiter.acquire();
                self.provider.complete(request)
            };
            match outcome {
                Ok(result) => {
                    self.ledger.record(request.role_tag, &result);
                    return Ok(result);
                }
                Err(e) if e.retryable && tries < self.policy.max_attempts => {
                    std::thread::sleep(self.transport_backoff * tries);
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Calls the provider until `parse` accepts the response, raising the
    /// temperature after every rejected attempt.
    pub fn complete_validated<T>(
        &self,
        bundle: &PromptBundle,
        parse: impl Fn(&str) -> Result<T, ParseError>,
    ) -> Result<Validated<T>, BackendError> {
        let mut usage = RoleUsage::default();
        let mut last_failure = None;
        for attempt in 1..=self.policy.max_attempts {
            let request = CompletionRequest {
                role_tag: bundle.role_tag,
                messages: bundle.messages.clone(),
                temperature: self.policy.temperature(attempt),
                max_tokens: self.max_tokens.for_role(bundle.role_tag),
                attempt,
            };
            let result = self.complete(&request)?;
            usage.add(&result);
            match parse(&result.text) {
                Ok(value) => {
                    return Ok(Validated {
                        value,
                        result,
                        usage,
                        attempts: attempt,
                    })
                }
                Err(cause) => last_failure = Some((cause, result.text)),
            }
        }
        let (cause, last_text) = last_failure.expect("at least one attempt is made");
        Err(BackendError::InvalidResponse {
            attempts: self.policy.max_attempts,
            cause,
            last_text,
            usage,
        })
    }
}

/// Average tokens per evaluated segment for one role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRow {
    pub role: RoleTag,
    /// Editor and verifier are the modules added on top of the evaluator.
    pub extra_module: bool,
    pub requests: u64,
    pub avg_prompt_tokens: f64,
    pub avg_completion_tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageReport {
    pub segments: usize,
    pub rows: Vec<UsageRow>,
}

pub fn usage_report(totals: &UsageTotals, segments: usize) -> Result<UsageReport> {
    if segments == 0 {
        return Err(Error::invalid("usage report over zero segments"));
    }
    let n = segments as f64;
    let rows = RoleTag::ALL
        .iter()
        .map(|&role| {
            let usage = totals.get(&role).copied().unwrap_or_default();
            UsageRow {
                role,
                extra_module: role != RoleTag::Evaluator,
                requests: usage.requests,
                avg_prompt_tokens: usage.prompt_tokens as f64 / n,
                avg_completion_tokens: usage.completion_tokens as f64 / n,
            }
        })
        .collect();
    Ok(UsageReport { segments, rows })
}
