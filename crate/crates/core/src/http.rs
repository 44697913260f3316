//! Blocking JSON-over-HTTP plumbing shared by the remote encoder, remote
//! reranker and remote chat-completion backends.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Why a single HTTP exchange failed.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HttpError {
    #[error("request timed out")]
    Timeout,
    #[error("transport: {0}")]
    Transport(String),
    #[error("HTTP status {0}")]
    Status(u16),
    #[error("undecodable response: {0}")]
    Decode(String),
}

impl HttpError {
    /// Transport failures, timeouts, 429 and 5xx are worth another attempt.
    /// A well-formed response is never retried.
    pub fn is_retryable(&self) -> bool {
        match self {
            HttpError::Timeout | HttpError::Transport(_) => true,
            HttpError::Status(code) => *code == 429 || *code >= 500,
            HttpError::Decode(_) => false,
        }
    }
}

/// Exponential backoff: `initial_backoff * multiplier^n` before retry `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryPolicy {
    pub retries: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: u32,
}

impl Default for RetryPolicy {
    /// Three retries after 0.5 s, 1 s and 2 s.
    fn default() -> Self {
        Self {
            retries: 3,
            initial_backoff_ms: 500,
            multiplier: 2,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            retries: 0,
            ..Self::default()
        }
    }

    pub fn backoff(&self, retry: u32) -> Duration {
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(u64::from(self.multiplier).saturating_pow(retry)))
    }

    /// Runs `op` until it succeeds, returns a non-retryable error, or the
    /// retry budget is spent. Returns the last error and the attempt count.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, HttpError>) -> Result<T, (HttpError, u32)> {
        let mut attempt = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.retries => {
                    thread::sleep(self.backoff(attempt));
                    attempt += 1;
                }
                Err(e) => return Err((e, attempt + 1)),
            }
        }
    }
}

/// Endpoint settings common to every remote backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub url: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_timeout_secs() -> f64 {
    60.0
}

fn default_max_in_flight() -> usize {
    4
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            timeout_secs: default_timeout_secs(),
            max_in_flight: default_max_in_flight(),
            retry: RetryPolicy::default(),
        }
    }
}

/// Counting semaphore bounding concurrent requests to one backend.
#[derive(Debug)]
pub struct InFlightLimiter {
    available: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a InFlightLimiter);

impl InFlightLimiter {
    pub fn new(max_in_flight: usize) -> Self {
        Self {
            available: Mutex::new(max_in_flight.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("limiter poisoned");
        while *n == 0 {
            n = self.freed.wait(n).expect("limiter poisoned");
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("limiter poisoned") += 1;
        self.0.freed.notify_one();
    }
}

/// A JSON endpoint with its own agent, limiter and retry policy.
#[derive(Debug)]
pub struct JsonEndpoint {
    url: String,
    agent: ureq::Agent,
    limiter: InFlightLimiter,
    retry: RetryPolicy,
}

impl JsonEndpoint {
    pub fn new(cfg: &EndpointConfig) -> Self {
        let agent = ureq::Agent::new_with_config(
            ureq::Agent::config_builder()
                .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs.max(0.001))))
                .http_status_as_error(false)
                .build(),
        );
        Self {
            url: cfg.url.clone(),
            agent,
            limiter: InFlightLimiter::new(cfg.max_in_flight),
            retry: cfg.retry.clone(),
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// POSTs `body`, retrying per policy. On failure returns the last error
    /// and the number of attempts made.
    pub fn post<B: Serialize, R: DeserializeOwned>(&self, body: &B) -> Result<R, (HttpError, u32)> {
        let _permit = self.limiter.acquire();
        self.retry.run(|| self.post_once(body))
    }

    fn post_once<B: Serialize, R: DeserializeOwned>(&self, body: &B) -> Result<R, HttpError> {
        let response = self.agent.post(&self.url).send_json(body).map_err(classify)?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(HttpError::Status(status));
        }
        let text = response.into_body().read_to_string().map_err(classify)?;
        serde_json::from_str(&text).map_err(|e| HttpError::Decode(e.to_string()))
    }
}

fn classify(e: ureq::Error) -> HttpError {
    match e {
        ureq::Error::Timeout(_) => HttpError::Timeout,
        ureq::Error::StatusCode(code) => HttpError::Status(code),
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => HttpError::Timeout,
        other => HttpError::Transport(other.to_string()),
    }
}

/// `{"texts": [...]}` → `{"vectors": [[...]]}`.
#[derive(Debug, Serialize)]
pub struct EncodeRequest<'a> {
    pub texts: Vec<&'a str>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EncodeResponse {
    pub vectors: Vec<Vec<f64>>,
}
