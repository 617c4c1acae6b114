//! Inference gateway: one interface for every LLM/VLM call in the pipeline.
//!
//! A [`Gateway`] owns the registered endpoints and a [`Backend`] that moves
//! bytes. The gateway enforces request validation, retry with exponential
//! backoff, and a per-endpoint ceiling on in-flight calls; backends only
//! perform single attempts. Three backends ship with the crate:
//! [`HttpBackend`] (OpenAI-compatible chat completions), [`ScriptedMock`]
//! (deterministic offline responses) and [`OfflineBackend`] (fails on any
//! contact, used for dry runs).

mod http;
mod mock;
mod request;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpBackend;
pub use mock::{MockResponse, MockRule, MockScript, ScriptedMock, MATCH_ANY};
pub use request::{ChatRequest, Completion, MediaType, Message, Part, Role, TokenLogprob, TopLogprob};

/// Upper bound on `retry.max_attempts`.
pub const MAX_ATTEMPTS_LIMIT: u32 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub backoff_factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            backoff_base_ms: 500,
            backoff_factor: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let ms = self.backoff_base_ms as f64 * self.backoff_factor.powi(retry as i32 - 1);
        Duration::from_millis(ms.min(u64::MAX as f64) as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub endpoint_id: String,
    pub base_url: String,
    /// Environment variable holding the bearer token; unset means no auth.
    #[serde(default)]
    pub api_key_env: Option<String>,
    pub model_name: String,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_max_in_flight() -> usize {
    4
}

fn default_timeout_ms() -> u64 {
    120_000
}

impl EndpointConfig {
    /// A local endpoint with default limits, handy for tests and mocks.
    pub fn local(endpoint_id: impl Into<String>, max_in_flight: usize) -> Self {
        Self {
            endpoint_id: endpoint_id.into(),
            base_url: "http://127.0.0.1:8000/v1".into(),
            api_key_env: None,
            model_name: "local".into(),
            max_in_flight,
            timeout_ms: default_timeout_ms(),
            retry: RetryPolicy {
                max_attempts: 1,
                backoff_base_ms: 0,
                backoff_factor: 1.0,
            },
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: String| Err(GatewayError::Config(format!("{}: {m}", self.endpoint_id)));
        if self.endpoint_id.is_empty() {
            return bad("endpoint_id must be non-empty".into());
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return bad(format!("base_url `{}` is not an http(s) URL", self.base_url));
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be >= 1".into());
        }
        if self.timeout_ms == 0 {
            return bad("timeout_ms must be positive".into());
        }
        if self.retry.max_attempts == 0 || self.retry.max_attempts > MAX_ATTEMPTS_LIMIT {
            return bad(format!(
                "retry.max_attempts must be in 1..={MAX_ATTEMPTS_LIMIT}, got {}",
                self.retry.max_attempts
            ));
        }
        if !self.retry.backoff_factor.is_finite() || self.retry.backoff_factor < 1.0 {
            return bad("retry.backoff_factor must be >= 1".into());
        }
        Ok(())
    }
}

/// Outcome of a single transport attempt.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connection(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("{0}")]
    Script(String),
    #[error("network access disabled")]
    Offline,
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::Status { status, .. } => *status >= 500,
            TransportError::Timeout | TransportError::Connection(_) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("unknown endpoint `{0}`")]
    UnknownEndpoint(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("endpoint config: {0}")]
    Config(String),
    #[error("HTTP {status} (not retried): {excerpt}")]
    Client { status: u16, excerpt: String },
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: TransportError },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("{0}")]
    Script(String),
    #[error("network access disabled (dry run)")]
    Offline,
}

/// Performs one attempt of a chat completion against an endpoint.
pub trait Backend: Send + Sync {
    fn send(&self, endpoint: &EndpointConfig, request: &ChatRequest) -> Result<Completion, TransportError>;
}

/// A backend that refuses every call. Dry runs use it to prove that planning
/// never touches the network.
#[derive(Debug, Default)]
pub struct OfflineBackend {
    contacts: AtomicUsize,
}

impl OfflineBackend {
    pub fn contacts(&self) -> usize {
        self.contacts.load(Ordering::SeqCst)
    }
}

impl Backend for OfflineBackend {
    fn send(&self, _: &EndpointConfig, _: &ChatRequest) -> Result<Completion, TransportError> {
        self.contacts.fetch_add(1, Ordering::SeqCst);
        Err(TransportError::Offline)
    }
}

struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(max: usize) -> Self {
        Self {
            max,
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.max {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

struct Endpoint {
    config: EndpointConfig,
    limiter: Limiter,
}

/// Shared entry point for completions. Cheap to share behind `&` across
/// threads.
pub struct Gateway {
    endpoints: BTreeMap<String, Endpoint>,
    backend: Arc<dyn Backend>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("endpoints", &self.endpoints.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Gateway {
    pub fn new(
        configs: impl IntoIterator<Item = EndpointConfig>,
        backend: Arc<dyn Backend>,
    ) -> Result<Self, GatewayError> {
        let mut endpoints = BTreeMap::new();
        for config in configs {
            config.validate()?;
            let id = config.endpoint_id.clone();
            let endpoint = Endpoint {
                limiter: Limiter::new(config.max_in_flight),
                config,
            };
            if endpoints.insert(id.clone(), endpoint).is_some() {
                return Err(GatewayError::Config(format!("duplicate endpoint `{id}`")));
            }
        }
        Ok(Self { endpoints, backend })
    }

    pub fn http(configs: impl IntoIterator<Item = EndpointConfig>) -> Result<Self, GatewayError> {
        Self::new(configs, Arc::new(HttpBackend::new()))
    }

    pub fn endpoint(&self, id: &str) -> Option<&EndpointConfig> {
        self.endpoints.get(id).map(|e| &e.config)
    }

    /// Runs one request and returns the first choice's text.
    pub fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        self.complete_full(request).map(|c| c.text)
    }

    /// Like [`Gateway::complete`] but keeps token log-probabilities.
    pub fn complete_full(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        request.validate()?;
        let endpoint = self
            .endpoints
            .get(&request.endpoint_id)
            .ok_or_else(|| GatewayError::UnknownEndpoint(request.endpoint_id.clone()))?;
        let policy = &endpoint.config.retry;
        let started = Instant::now();
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = {
                let _permit = endpoint.limiter.acquire();
                self.backend.send(&endpoint.config, request)
            };
            match result {
                Ok(completion) => {
                    tracing::debug!(
                        tag = %request.request_tag,
                        latency_ms = started.elapsed().as_millis() as u64,
                        attempts = attempt,
                        "completion"
                    );
                    return Ok(completion);
                }
                Err(err) if err.is_retryable() && attempt < policy.max_attempts => {
                    let delay = policy.backoff(attempt);
                    tracing::warn!(
                        tag = %request.request_tag,
                        attempt,
                        error = %err,
                        delay_ms = delay.as_millis() as u64,
                        "retrying"
                    );
                    std::thread::sleep(delay);
                }
                Err(err) => {
                    tracing::warn!(
                        tag = %request.request_tag,
                        latency_ms = started.elapsed().as_millis() as u64,
                        attempts = attempt,
                        error = %err,
                        "completion failed"
                    );
                    return Err(match err {
                        TransportError::Status { status, body } if status < 500 => GatewayError::Client {
                            status,
                            excerpt: excerpt(&body),
                        },
                        TransportError::Protocol(m) => GatewayError::Protocol(m),
                        TransportError::Script(m) => GatewayError::Script(m),
                        TransportError::Offline => GatewayError::Offline,
                        last => GatewayError::Exhausted {
                            attempts: attempt,
                            last,
                        },
                    });
                }
            }
        }
    }

    /// Runs many requests concurrently, returning one result per input in
    /// input order. A failure never aborts its siblings.
    pub fn complete_many(&self, requests: &[ChatRequest]) -> Vec<Result<String, GatewayError>> {
        self.complete_many_full(requests)
            .into_iter()
            .map(|r| r.map(|c| c.text))
            .collect()
    }

    pub fn complete_many_full(&self, requests: &[ChatRequest]) -> Vec<Result<Completion, GatewayError>> {
        if requests.is_empty() {
            return Vec::new();
        }
        let capacity: usize = self.endpoints.values().map(|e| e.config.max_in_flight).sum();
        let workers = requests.len().min(capacity.max(1)).min(256);
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<Completion, GatewayError>>>> =
            requests.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= requests.len() {
                        break;
                    }
                    let result = self.complete_full(&requests[i]);
                    *slots[i].lock().unwrap() = Some(result);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().unwrap().expect("every slot filled"))
            .collect()
    }
}

fn excerpt(body: &str) -> String {
    const LIMIT: usize = 200;
    match body.char_indices().nth(LIMIT) {
        Some((i, _)) => format!("{}...", &body[..i]),
        None => body.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn user(tag: &str, text: &str) -> ChatRequest {
        ChatRequest::new("ep", tag, vec![Message::user(vec![Part::text(text)])])
    }

    fn gateway(mock: Arc<ScriptedMock>, max_in_flight: usize, attempts: u32) -> Gateway {
        let mut cfg = EndpointConfig::local("ep", max_in_flight);
        cfg.retry.max_attempts = attempts;
        Gateway::new([cfg], mock).unwrap()
    }

    fn script(rules: Vec<MockRule>) -> Arc<ScriptedMock> {
        Arc::new(ScriptedMock::new(MockScript { rules, default: None }))
    }

    #[test]
    fn scripted_ok() {
        let mock = script(vec![MockRule::repeat(
            MATCH_ANY,
            MATCH_ANY,
            vec![MockResponse::text("OK")],
        )]);
        let gw = gateway(mock, 1, 1);
        assert_eq!(gw.complete(&user("any", "x")).unwrap(), "OK");
    }

    #[test]
    fn retries_until_success() {
        let mock = script(vec![MockRule::sequence(
            MATCH_ANY,
            MATCH_ANY,
            vec![
                MockResponse::status(503, "busy"),
                MockResponse::Timeout,
                MockResponse::text("OK"),
            ],
        )]);
        let gw = gateway(mock.clone(), 1, 3);
        assert_eq!(gw.complete(&user("t", "x")).unwrap(), "OK");
        assert_eq!(mock.calls(), 3);
    }

    #[test]
    fn retry_bound_is_respected() {
        let mock = script(vec![MockRule::repeat(
            MATCH_ANY,
            MATCH_ANY,
            vec![MockResponse::Timeout],
        )]);
        let gw = gateway(mock.clone(), 1, 2);
        let err = gw.complete(&user("t", "x")).unwrap_err();
        assert_eq!(
            err,
            GatewayError::Exhausted {
                attempts: 2,
                last: TransportError::Timeout
            }
        );
        assert_eq!(mock.calls(), 2);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let mock = script(vec![MockRule::repeat(
            MATCH_ANY,
            MATCH_ANY,
            vec![MockResponse::status(400, "bad image")],
        )]);
        let gw = gateway(mock.clone(), 1, 5);
        match gw.complete(&user("t", "x")).unwrap_err() {
            GatewayError::Client { status, excerpt } => {
                assert_eq!(status, 400);
                assert_eq!(excerpt, "bad image");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(mock.calls(), 1);
    }

    #[test]
    fn unknown_endpoint_and_invalid_request() {
        let mock = script(vec![]);
        let gw = gateway(mock, 1, 1);
        let mut req = user("t", "x");
        req.endpoint_id = "nope".into();
        assert_eq!(
            gw.complete(&req).unwrap_err(),
            GatewayError::UnknownEndpoint("nope".into())
        );
        let req = ChatRequest::new("ep", "t", vec![Message::system("only system")]);
        assert!(matches!(
            gw.complete(&req).unwrap_err(),
            GatewayError::InvalidRequest(_)
        ));
    }

    #[test]
    fn complete_many_respects_in_flight_ceiling() {
        let mut rule = MockRule::repeat(MATCH_ANY, MATCH_ANY, vec![MockResponse::text("ok")]);
        rule.delay_ms = 2;
        let mock = script(vec![rule]);
        let gw = gateway(mock.clone(), 4, 1);
        let reqs: Vec<_> = (0..100).map(|i| user("t", &format!("q{i}"))).collect();
        let out = gw.complete_many(&reqs);
        assert_eq!(out.len(), 100);
        assert!(out.iter().all(|r| r.as_deref() == Ok("ok")));
        assert!(mock.peak_in_flight() <= 4, "peak {}", mock.peak_in_flight());
        assert!(mock.peak_in_flight() >= 2);
    }

    #[test]
    fn complete_many_isolates_failures() {
        let mock = script(vec![
            MockRule::repeat(MATCH_ANY, "fail-me", vec![MockResponse::status(404, "gone")]),
            MockRule::repeat(MATCH_ANY, MATCH_ANY, vec![MockResponse::text("fine")]),
        ]);
        let gw = gateway(mock, 2, 1);
        let out = gw.complete_many(&[user("t", "a"), user("t", "fail-me"), user("t", "c")]);
        assert_eq!(out[0].as_deref(), Ok("fine"));
        assert!(out[1].is_err());
        assert_eq!(out[2].as_deref(), Ok("fine"));
        assert!(gw.complete_many(&[]).is_empty());
    }

    #[test]
    fn endpoint_validation() {
        let mut cfg = EndpointConfig::local("e", 1);
        cfg.retry.max_attempts = 9;
        assert!(cfg.validate().is_err());
        cfg.retry.max_attempts = 8;
        assert!(cfg.validate().is_ok());
        cfg.max_in_flight = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn backoff_is_exponential() {
        let p = RetryPolicy {
            max_attempts: 4,
            backoff_base_ms: 100,
            backoff_factor: 2.0,
        };
        assert_eq!(p.backoff(1), Duration::from_millis(100));
        assert_eq!(p.backoff(3), Duration::from_millis(400));
    }

    #[test]
    fn offline_backend_counts_contacts() {
        let offline = Arc::new(OfflineBackend::default());
        let gw = Gateway::new([EndpointConfig::local("ep", 1)], offline.clone()).unwrap();
        assert_eq!(gw.complete(&user("t", "x")).unwrap_err(), GatewayError::Offline);
        assert_eq!(offline.contacts(), 1);
    }
}
