//! Provider-neutral chat completion client.
//!
//! A [`Transport`] performs exactly one request. [`LlmClient`] wraps a
//! transport with request validation, rate limiting, retries with
//! exponential backoff, and token accounting. Transports:
//!
//! - [`HttpTransport`]: OpenAI-compatible `/chat/completions` over HTTP(S)
//! - [`ScriptedTransport`]: canned responses for offline tests and `--mock`
//! - [`ReplayTransport`]: responses recorded in session transcripts

mod http;
mod replay;
mod scripted;

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::Clock;
use crate::prompts::{Message, Role};

pub use http::HttpTransport;
pub use replay::ReplayTransport;
pub use scripted::{
    Matcher, MockScript, RoleScript, ScriptEntry, ScriptEntrySpec, ScriptError, ScriptedResponse,
    ScriptedTransport,
};

/// Error classes a [`RetryPolicy`] may treat as transient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    RateLimited,
    Server,
    Timeout,
    Network,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("server error {status}: {body}")]
    Server { status: u16, body: String },
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("network error: {0}")]
    Network(String),
    #[error("http error {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("gave up after {attempts} attempts: {last}")]
    ExhaustedRetries { attempts: u32, last: Box<LlmError> },
    #[error("script exhausted after {calls} calls")]
    ScriptExhausted { calls: usize },
    #[error("script entry {index} did not match: {expected}")]
    MatchFailure { index: usize, expected: String },
    #[error("no recorded response for request {0}")]
    ReplayMiss(String),
    /// An error that was recorded in a transcript, surfaced again on replay.
    #[error("{0}")]
    Replayed(String),
}

impl LlmError {
    pub fn class(&self) -> Option<ErrorClass> {
        match self {
            LlmError::RateLimited(_) => Some(ErrorClass::RateLimited),
            LlmError::Server { .. } => Some(ErrorClass::Server),
            LlmError::Timeout(_) => Some(ErrorClass::Timeout),
            LlmError::Network(_) => Some(ErrorClass::Network),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub model_id: String,
    pub endpoint: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub timeout_secs: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            model_id: "gpt-5".to_string(),
            endpoint: "https://api.openai.com/v1".to_string(),
            temperature: 1.0,
            max_output_tokens: 8192,
            timeout_secs: 120,
        }
    }
}

impl ModelConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.model_id.trim().is_empty() {
            return Err("model_id is empty".into());
        }
        if self.endpoint.trim().is_empty() {
            return Err("endpoint is empty".into());
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(format!("temperature {} must be >= 0", self.temperature));
        }
        if self.max_output_tokens == 0 {
            return Err("max_output_tokens must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub content: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub latency_ms: u64,
}

impl Completion {
    pub fn text(content: impl Into<String>) -> Self {
        Self {
            content: content.into(),
            input_tokens: 0,
            output_tokens: 0,
            latency_ms: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub backoff_factor: f64,
    pub retryable: BTreeSet<ErrorClass>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay_ms: 1000,
            backoff_factor: 2.0,
            retryable: [
                ErrorClass::RateLimited,
                ErrorClass::Server,
                ErrorClass::Timeout,
                ErrorClass::Network,
            ]
            .into_iter()
            .collect(),
        }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_attempts == 0 {
            return Err("max_attempts must be >= 1".into());
        }
        if self.backoff_factor.is_nan() || self.backoff_factor < 1.0 {
            return Err(format!("backoff_factor {} must be >= 1", self.backoff_factor));
        }
        Ok(())
    }

    /// Delay before retry number `retry` (0-based): `base * factor^retry`.
    pub fn delay(&self, retry: u32) -> Duration {
        let ms = self.base_delay_ms as f64 * self.backoff_factor.powi(retry as i32);
        Duration::from_secs_f64(ms / 1000.0)
    }

    pub fn is_retryable(&self, error: &LlmError) -> bool {
        error.class().is_some_and(|c| self.retryable.contains(&c))
    }
}

/// One request attempt against a chat endpoint.
pub trait Transport: Send + Sync {
    fn send(&self, model: &ModelConfig, messages: &[Message]) -> Result<Completion, LlmError>;
}

/// Fixed-interval admission control shared by every caller of a client.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next_free: Mutex<Option<DateTime<Utc>>>,
}

impl RateLimiter {
    pub fn per_minute(requests: u32) -> Self {
        Self {
            interval: Duration::from_secs_f64(60.0 / requests.max(1) as f64),
            next_free: Mutex::new(None),
        }
    }

    /// Blocks until the caller may issue a request. Holding the lock while
    /// sleeping serializes admission.
    pub fn admit(&self, clock: &dyn Clock) {
        let mut next_free = self.next_free.lock().unwrap();
        let now = clock.now();
        let start = match *next_free {
            Some(t) if t > now => {
                clock.sleep((t - now).to_std().unwrap_or_default());
                t
            }
            _ => now,
        };
        *next_free = Some(start + chrono::Duration::from_std(self.interval).unwrap());
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl UsageTotals {
    pub fn record(&mut self, completion: &Completion) {
        self.calls += 1;
        self.input_tokens += completion.input_tokens;
        self.output_tokens += completion.output_tokens;
    }

    pub fn add(&mut self, other: &UsageTotals) {
        self.calls += other.calls;
        self.input_tokens += other.input_tokens;
        self.output_tokens += other.output_tokens;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostRates {
    pub input_per_token: f64,
    pub output_per_token: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageReport {
    pub calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub estimated_cost: f64,
}

pub fn usage_report(totals: &UsageTotals, rates: &CostRates) -> UsageReport {
    UsageReport {
        calls: totals.calls,
        input_tokens: totals.input_tokens,
        output_tokens: totals.output_tokens,
        estimated_cost: totals.input_tokens as f64 * rates.input_per_token
            + totals.output_tokens as f64 * rates.output_per_token,
    }
}

/// Stable hex digest of a request: model id plus the full message list.
pub fn request_fingerprint(model_id: &str, messages: &[Message]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(model_id.as_bytes());
    for m in messages {
        hasher.update([0u8]);
        hasher.update(m.role.as_str().as_bytes());
        hasher.update([0u8]);
        hasher.update(m.content.as_bytes());
    }
    hex::encode(hasher.finalize())
}

/// A transport plus retry, rate limiting and usage accounting. Shareable
/// across threads.
pub struct LlmClient {
    transport: Arc<dyn Transport>,
    policy: RetryPolicy,
    clock: Arc<dyn Clock>,
    limiter: Option<RateLimiter>,
    usage: Mutex<UsageTotals>,
}

impl LlmClient {
    pub fn new(transport: Arc<dyn Transport>, policy: RetryPolicy, clock: Arc<dyn Clock>) -> Self {
        Self {
            transport,
            policy,
            clock,
            limiter: None,
            usage: Mutex::new(UsageTotals::default()),
        }
    }

    pub fn with_rate_limit(mut self, requests_per_minute: Option<u32>) -> Self {
        self.limiter = requests_per_minute.map(RateLimiter::per_minute);
        self
    }

    pub fn clock(&self) -> &dyn Clock {
        self.clock.as_ref()
    }

    pub fn policy(&self) -> &RetryPolicy {
        &self.policy
    }

    /// Totals over every successful call made through this client.
    pub fn usage(&self) -> UsageTotals {
        *self.usage.lock().unwrap()
    }

    pub fn complete(&self, model: &ModelConfig, messages: &[Message]) -> Result<Completion, LlmError> {
        complete(
            self.transport.as_ref(),
            self.clock.as_ref(),
            self.limiter.as_ref(),
            model,
            messages,
            &self.policy,
        )
        .inspect(|c| self.usage.lock().unwrap().record(c))
    }
}

/// Sends `messages`, retrying transient failures per `policy`.
pub fn complete(
    transport: &dyn Transport,
    clock: &dyn Clock,
    limiter: Option<&RateLimiter>,
    model: &ModelConfig,
    messages: &[Message],
    policy: &RetryPolicy,
) -> Result<Completion, LlmError> {
    match messages.first() {
        None => return Err(LlmError::InvalidRequest("no messages".into())),
        Some(m) if m.role != Role::System => {
            return Err(LlmError::InvalidRequest(
                "first message must be the system prompt".into(),
            ))
        }
        _ => {}
    }
    if let Some(m) = messages.iter().find(|m| m.content.is_empty()) {
        return Err(LlmError::InvalidRequest(format!(
            "empty {} message",
            m.role.as_str()
        )));
    }

    let max_attempts = policy.max_attempts.max(1);
    let mut attempt = 1;
    loop {
        if let Some(limiter) = limiter {
            limiter.admit(clock);
        }
        match transport.send(model, messages) {
            Ok(completion) => return Ok(completion),
            Err(err) if policy.is_retryable(&err) => {
                if attempt >= max_attempts {
                    return Err(LlmError::ExhaustedRetries {
                        attempts: attempt,
                        last: Box::new(err),
                    });
                }
                let delay = policy.delay(attempt - 1);
                log::warn!(
                    "{}: attempt {attempt}/{max_attempts} failed ({err}); retrying in {delay:?}",
                    model.model_id
                );
                clock.sleep(delay);
                attempt += 1;
            }
            Err(err) => return Err(err),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::FakeClock;

    fn model() -> ModelConfig {
        ModelConfig {
            model_id: "test-model".into(),
            endpoint: "mock://".into(),
            ..ModelConfig::default()
        }
    }

    fn msgs() -> Vec<Message> {
        vec![Message::system("sys"), Message::user("hi")]
    }

    fn client(entries: Vec<ScriptEntry>, policy: RetryPolicy) -> (LlmClient, Arc<ScriptedTransport>, Arc<FakeClock>) {
        let transport = Arc::new(ScriptedTransport::new(entries));
        let clock = Arc::new(FakeClock::at_epoch());
        let c = LlmClient::new(transport.clone(), policy, clock.clone());
        (c, transport, clock)
    }

    #[test]
    fn passthrough() {
        let (c, _, _) = client(vec![ScriptEntry::reply("hello")], RetryPolicy::default());
        assert_eq!(c.complete(&model(), &msgs()).unwrap().content, "hello");
    }

    #[test]
    fn retries_with_backoff_schedule() {
        let policy = RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 500,
            backoff_factor: 3.0,
            ..RetryPolicy::default()
        };
        let (c, t, clock) = client(
            vec![
                ScriptEntry::error(ErrorClass::RateLimited),
                ScriptEntry::error(ErrorClass::RateLimited),
                ScriptEntry::reply("ok"),
            ],
            policy,
        );
        assert_eq!(c.complete(&model(), &msgs()).unwrap().content, "ok");
        assert_eq!(t.call_count(), 3);
        assert_eq!(
            clock.sleeps(),
            vec![Duration::from_millis(500), Duration::from_millis(1500)]
        );
    }

    #[test]
    fn exhausted_after_cap() {
        let policy = RetryPolicy {
            max_attempts: 2,
            ..RetryPolicy::default()
        };
        let (c, t, clock) = client(
            (0..5).map(|_| ScriptEntry::error(ErrorClass::Server)).collect(),
            policy,
        );
        match c.complete(&model(), &msgs()) {
            Err(LlmError::ExhaustedRetries { attempts, last }) => {
                assert_eq!(attempts, 2);
                assert!(matches!(*last, LlmError::Server { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(t.call_count(), 2);
        assert_eq!(clock.sleeps().len(), 1);
        assert_eq!(c.usage(), UsageTotals::default());
    }

    #[test]
    fn auth_errors_are_not_retried() {
        let (c, t, _) = client(
            vec![
                ScriptEntry::response(ScriptedResponse::Error(LlmError::Auth("bad key".into()))),
                ScriptEntry::reply("never"),
            ],
            RetryPolicy::default(),
        );
        assert!(matches!(c.complete(&model(), &msgs()), Err(LlmError::Auth(_))));
        assert_eq!(t.call_count(), 1);
    }

    #[test]
    fn retryable_set_is_respected() {
        let policy = RetryPolicy {
            retryable: [ErrorClass::Server].into_iter().collect(),
            ..RetryPolicy::default()
        };
        let (c, t, _) = client(vec![ScriptEntry::error(ErrorClass::Timeout), ScriptEntry::reply("x")], policy);
        assert!(matches!(c.complete(&model(), &msgs()), Err(LlmError::Timeout(_))));
        assert_eq!(t.call_count(), 1);
    }

    #[test]
    fn rejects_bad_requests() {
        let (c, t, _) = client(vec![ScriptEntry::reply("x")], RetryPolicy::default());
        assert!(matches!(c.complete(&model(), &[]), Err(LlmError::InvalidRequest(_))));
        assert!(matches!(
            c.complete(&model(), &[Message::user("hi")]),
            Err(LlmError::InvalidRequest(_))
        ));
        assert_eq!(t.call_count(), 0);
    }

    #[test]
    fn usage_accumulates() {
        let (c, _, _) = client(
            vec![
                ScriptEntry::reply_with_usage("a", 10, 20),
                ScriptEntry::reply_with_usage("b", 5, 5),
            ],
            RetryPolicy::default(),
        );
        assert_eq!(usage_report(&c.usage(), &CostRates::default()), UsageReport::default());
        c.complete(&model(), &msgs()).unwrap();
        c.complete(&model(), &msgs()).unwrap();
        let totals = c.usage();
        assert_eq!((totals.calls, totals.input_tokens, totals.output_tokens), (2, 15, 25));
        let rates = CostRates {
            input_per_token: 0.25,
            output_per_token: 2.0,
        };
        let report = usage_report(&totals, &rates);
        assert_eq!(report.estimated_cost, 15.0 * 0.25 + 25.0 * 2.0);
    }

    #[test]
    fn rate_limiter_spaces_requests() {
        let clock = FakeClock::at_epoch();
        let limiter = RateLimiter::per_minute(30);
        for _ in 0..3 {
            limiter.admit(&clock);
        }
        assert_eq!(clock.sleeps(), vec![Duration::from_secs(2); 2]);
    }

    #[test]
    fn fingerprint_depends_on_all_inputs() {
        let a = request_fingerprint("m", &msgs());
        assert_eq!(a, request_fingerprint("m", &msgs()));
        assert_ne!(a, request_fingerprint("n", &msgs()));
        assert_ne!(a, request_fingerprint("m", &[Message::system("sys"), Message::user("hi!")]));
    }
}
