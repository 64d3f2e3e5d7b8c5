//! Uniform access to chat-completion endpoints.
//!
//! All providers speak the OpenAI-compatible chat-completions wire shape
//! (`POST {endpoint_url}/chat/completions`), which is the de-facto JSON
//! served by open-model gateways. A deterministic scripted provider
//! backs offline tests.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("auth error: {0}")]
    Auth(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    /// The run's call budget is spent; not a failure of the request
    /// itself. Pipelines stop cleanly and resume later.
    #[error("provider call budget exhausted")]
    BudgetExhausted,
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
}

/// A single chat-completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        ChatRequest {
            model: model.into(),
            messages,
            temperature: 0.0,
            max_tokens: 512,
            seed: None,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    /// Content of the last user message; providers that synthesize or
    /// match responses key off this.
    pub fn last_user_content(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == ChatRole::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

/// Endpoint configuration for one provider role.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub endpoint_url: String,
    /// Name of the environment variable holding the API key. Empty means
    /// no Authorization header is sent (local stubs).
    #[serde(default)]
    pub api_key_env_var: String,
    pub model: String,
    #[serde(default = "default_timeout_secs")]
    pub request_timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Token-bucket rate limit; `None` means unlimited.
    #[serde(default)]
    pub requests_per_second: Option<f64>,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
}

fn default_timeout_secs() -> u64 {
    120
}
fn default_max_retries() -> u32 {
    3
}
fn default_parallelism() -> usize {
    4
}
fn default_backoff_ms() -> u64 {
    250
}

impl ProviderConfig {
    pub fn local(endpoint_url: impl Into<String>, model: impl Into<String>) -> Self {
        ProviderConfig {
            endpoint_url: endpoint_url.into(),
            api_key_env_var: String::new(),
            model: model.into(),
            request_timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            parallelism: default_parallelism(),
            requests_per_second: None,
            backoff_base_ms: default_backoff_ms(),
        }
    }
}

/// A chat-completion backend. Handles are shared across worker threads.
pub trait ChatProvider: Send + Sync {
    /// Returns the first assistant message of the completion.
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError>;

    /// Model identifier recorded in verdicts.
    fn model(&self) -> &str;
}

// --- wire format -------------------------------------------------------

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

/// Extracts the assistant text from a chat-completions response body.
pub fn extract_content(body: &str) -> Result<String, GatewayError> {
    let parsed: WireResponse = serde_json::from_str(body)
        .map_err(|e| GatewayError::MalformedResponse(format!("invalid completion JSON: {e}")))?;
    parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| GatewayError::MalformedResponse("response has no message content".into()))
}

// --- HTTP provider ------------------------------------------------------

/// Blocking HTTP provider with bounded in-flight requests, token-bucket
/// rate limiting, and exponential-backoff retries on transient failures.
pub struct HttpProvider {
    config: ProviderConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    limiter: Option<TokenBucket>,
    slots: Semaphore,
}

impl HttpProvider {
    pub fn new(config: ProviderConfig) -> Result<Self, GatewayError> {
        let api_key = if config.api_key_env_var.is_empty() {
            None
        } else {
            match std::env::var(&config.api_key_env_var) {
                Ok(key) if !key.is_empty() => Some(key),
                _ => {
                    return Err(GatewayError::Auth(format!(
                        "environment variable {} is not set",
                        config.api_key_env_var
                    )))
                }
            }
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.request_timeout_secs))
            .build()
            .map_err(|e| GatewayError::Transport(format!("client construction failed: {e}")))?;
        let limiter = config.requests_per_second.map(TokenBucket::new);
        let slots = Semaphore::new(config.parallelism.max(1));
        Ok(HttpProvider { config, client, api_key, limiter, slots })
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.endpoint_url.trim_end_matches('/'))
    }

    fn attempt(&self, body: &WireRequest<'_>) -> Result<String, AttemptError> {
        let mut builder = self.client.post(self.url()).json(body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .map_err(|e| AttemptError::Retryable(format!("request failed: {e}")))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| AttemptError::Retryable(format!("body read failed: {e}")))?;
        if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
            return Err(AttemptError::Fatal(GatewayError::Auth(format!("endpoint returned {status}"))));
        }
        if status.is_server_error() || status == reqwest::StatusCode::TOO_MANY_REQUESTS {
            return Err(AttemptError::Retryable(format!("endpoint returned {status}")));
        }
        if !status.is_success() {
            return Err(AttemptError::Fatal(GatewayError::Transport(format!(
                "endpoint returned {status}: {text}"
            ))));
        }
        extract_content(&text).map_err(AttemptError::Fatal)
    }
}

enum AttemptError {
    Retryable(String),
    Fatal(GatewayError),
}

impl ChatProvider for HttpProvider {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let _slot = self.slots.acquire();
        let body = WireRequest {
            model: &request.model,
            messages: &request.messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            seed: request.seed,
        };
        let mut last_failure = String::new();
        // One initial attempt plus max_retries retries. A retried request
        // commits at most one result: each attempt either returns or is
        // discarded before the next begins.
        for attempt in 0..=self.config.max_retries {
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            match self.attempt(&body) {
                Ok(content) => return Ok(content),
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Retryable(message)) => {
                    last_failure = message;
                    if attempt < self.config.max_retries {
                        let delay = self.config.backoff_base_ms.saturating_mul(1u64 << attempt.min(10));
                        std::thread::sleep(Duration::from_millis(delay.min(10_000)));
                    }
                }
            }
        }
        Err(GatewayError::Transport(format!(
            "{last_failure} (after {} retries)",
            self.config.max_retries
        )))
    }

    fn model(&self) -> &str {
        &self.config.model
    }
}

// --- scripted provider --------------------------------------------------

/// Deterministic provider that replays a fixed script, one entry per
/// call, and records every request for assertions. Thread-safe: under
/// concurrent callers each entry is delivered exactly once.
pub struct ScriptedProvider {
    model: String,
    state: Mutex<ScriptState>,
}

struct ScriptState {
    script: VecDeque<String>,
    requests: Vec<ChatRequest>,
}

impl ScriptedProvider {
    pub fn new<I, S>(script: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedProvider {
            model: "scripted".into(),
            state: Mutex::new(ScriptState {
                script: script.into_iter().map(Into::into).collect(),
                requests: Vec::new(),
            }),
        }
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.state.lock().unwrap().requests.clone()
    }

    pub fn remaining(&self) -> usize {
        self.state.lock().unwrap().script.len()
    }
}

impl ChatProvider for ScriptedProvider {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let mut state = self.state.lock().unwrap();
        state.requests.push(request.clone());
        state
            .script
            .pop_front()
            .ok_or_else(|| GatewayError::Transport("script exhausted".into()))
    }

    fn model(&self) -> &str {
        &self.model
    }
}

// --- rate limiting and slot bounding -------------------------------------

/// Token bucket refilled at `rate` requests per second, capacity one
/// second of burst. `acquire` sleeps until a token is available.
pub struct TokenBucket {
    rate: f64,
    state: Mutex<BucketState>,
}

struct BucketState {
    tokens: f64,
    last_refill: Instant,
}

impl TokenBucket {
    pub fn new(rate: f64) -> Self {
        let rate = rate.max(0.001);
        TokenBucket {
            rate,
            state: Mutex::new(BucketState { tokens: rate.max(1.0), last_refill: Instant::now() }),
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().unwrap();
                let now = Instant::now();
                let elapsed = now.duration_since(state.last_refill).as_secs_f64();
                state.tokens = (state.tokens + elapsed * self.rate).min(self.rate.max(1.0));
                state.last_refill = now;
                if state.tokens >= 1.0 {
                    state.tokens -= 1.0;
                    return;
                }
                (1.0 - state.tokens) / self.rate
            };
            std::thread::sleep(Duration::from_secs_f64(wait.min(0.25)));
        }
    }
}

/// Counting semaphore bounding in-flight requests per provider.
struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

struct SemaphoreGuard<'a> {
    semaphore: &'a Semaphore,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore { permits: Mutex::new(permits), available: Condvar::new() }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.available.wait(permits).unwrap();
        }
        *permits -= 1;
        SemaphoreGuard { semaphore: self }
    }
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.semaphore.permits.lock().unwrap();
        *permits += 1;
        self.semaphore.available.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(content: &str) -> ChatRequest {
        ChatRequest::new("test-model", vec![ChatMessage::user(content)])
    }

    #[test]
    fn scripted_returns_entries_in_order() {
        let provider = ScriptedProvider::new(["A", "B"]);
        assert_eq!(provider.complete(&request("one")).unwrap(), "A");
        assert_eq!(provider.complete(&request("two")).unwrap(), "B");
    }

    #[test]
    fn scripted_single_entry_passthrough() {
        let provider = ScriptedProvider::new(["hello"]);
        assert_eq!(provider.complete(&request("hi")).unwrap(), "hello");
    }

    #[test]
    fn scripted_exhaustion_is_transport_error() {
        let provider = ScriptedProvider::new(Vec::<String>::new());
        assert!(matches!(provider.complete(&request("x")), Err(GatewayError::Transport(_))));
    }

    #[test]
    fn scripted_records_every_request() {
        let provider = ScriptedProvider::new(["a", "b", "c"]);
        for i in 0..3 {
            provider.complete(&request(&format!("r{i}"))).unwrap();
        }
        let log = provider.requests();
        assert_eq!(log.len(), 3);
        assert_eq!(log[1].last_user_content(), "r1");
    }

    #[test]
    fn scripted_delivers_each_entry_exactly_once_across_threads() {
        let script: Vec<String> = (0..64).map(|i| format!("entry-{i}")).collect();
        let provider = ScriptedProvider::new(script.clone());
        let mut delivered: Vec<String> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..4)
                .map(|_| {
                    scope.spawn(|| {
                        let mut got = Vec::new();
                        while let Ok(entry) = provider.complete(&request("go")) {
                            got.push(entry);
                        }
                        got
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
        });
        delivered.sort();
        let mut expected = script;
        expected.sort();
        assert_eq!(delivered, expected);
        assert_eq!(provider.remaining(), 0);
    }

    #[test]
    fn extract_content_reads_standard_completion() {
        let body = r#"{"id":"x","choices":[{"index":0,"message":{"role":"assistant","content":"hi there"}}]}"#;
        assert_eq!(extract_content(body).unwrap(), "hi there");
    }

    #[test]
    fn extract_content_rejects_missing_content() {
        let body = r#"{"choices":[{"message":{"role":"assistant"}}]}"#;
        assert!(matches!(extract_content(body), Err(GatewayError::MalformedResponse(_))));
        assert!(matches!(extract_content("not json"), Err(GatewayError::MalformedResponse(_))));
        assert!(matches!(extract_content(r#"{"choices":[]}"#), Err(GatewayError::MalformedResponse(_))));
    }

    #[test]
    fn missing_api_key_env_is_auth_error() {
        let mut config = ProviderConfig::local("http://127.0.0.1:1", "m");
        config.api_key_env_var = "PERSONASIM_TEST_KEY_THAT_DOES_NOT_EXIST".into();
        assert!(matches!(HttpProvider::new(config), Err(GatewayError::Auth(_))));
    }

    #[test]
    fn token_bucket_spaces_out_requests() {
        let bucket = TokenBucket::new(200.0);
        let start = Instant::now();
        // Burst capacity covers the full rate for one second, so drain it
        // first; the next acquires must wait for refill.
        for _ in 0..200 {
            bucket.acquire();
        }
        for _ in 0..10 {
            bucket.acquire();
        }
        assert!(start.elapsed() >= Duration::from_millis(40));
    }
}
