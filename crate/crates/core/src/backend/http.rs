//! HTTP completion backend with retry/backoff.
//!
//! The wire shape is a minimal completion-style JSON POST:
//! `{model, prompt, top_p, max_tokens, temperature, seed?, logprobs?}` in,
//! `{text, finish_reason, logprobs?}` out. Provider-specific adapters stay
//! behind [`super::CompletionBackend`], so swapping providers is one file.

use super::{
    BackendError, CompletionBackend, CompletionRequest, CompletionResponse, FinishReason,
};
use rand::Rng;
use serde_json::{json, Value};
use std::sync::Arc;
use std::time::Duration;

/// Sleep source, injectable so tests can observe the backoff schedule
/// without waiting it out.
pub trait Clock: Send + Sync {
    fn sleep(&self, d: Duration);
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Jitter {
    /// Uniform in [0, nominal].
    Full,
    /// Exactly the nominal schedule.
    None,
}

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base: Duration,
    pub factor: f64,
    pub jitter: Jitter,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, base: Duration::from_millis(500), factor: 2.0, jitter: Jitter::Full }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based).
    pub fn delay(&self, attempt: u32, rng: &mut impl Rng) -> Duration {
        let nominal = self.base.as_secs_f64() * self.factor.powi(attempt as i32);
        let secs = match self.jitter {
            Jitter::None => nominal,
            Jitter::Full => rng.random_range(0.0..=nominal),
        };
        Duration::from_secs_f64(secs)
    }
}

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    auth_token: Option<String>,
    model: String,
    policy: RetryPolicy,
    clock: Arc<dyn Clock>,
    pub request_logprobs: bool,
}

enum Retryable {
    Transport(String),
    RateLimited(Option<Duration>),
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, auth_token: Option<String>, model: impl Into<String>) -> Self {
        Self {
            client: reqwest::blocking::Client::new(),
            endpoint: endpoint.into(),
            auth_token,
            model: model.into(),
            policy: RetryPolicy::default(),
            clock: Arc::new(SystemClock),
            request_logprobs: false,
        }
    }

    pub fn with_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    fn attempt(&self, body: &Value) -> Result<Result<CompletionResponse, BackendError>, Retryable> {
        let mut request = self.client.post(&self.endpoint).json(body);
        if let Some(token) = &self.auth_token {
            request = request.bearer_auth(token);
        }
        let resp = match request.send() {
            Ok(r) => r,
            Err(e) => return Err(Retryable::Transport(e.to_string())),
        };
        let status = resp.status();
        if status.as_u16() == 429 {
            let retry_after = resp
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|s| s.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            return Err(Retryable::RateLimited(retry_after));
        }
        if status.is_server_error() {
            return Err(Retryable::Transport(format!("server error {status}")));
        }
        if !status.is_success() {
            return Ok(Err(BackendError::Unavailable(format!("status {status}"))));
        }
        let value: Value = match resp.json() {
            Ok(v) => v,
            Err(e) => return Ok(Err(BackendError::MalformedResponse(e.to_string()))),
        };
        Ok(parse_completion(&value))
    }
}

fn parse_completion(value: &Value) -> Result<CompletionResponse, BackendError> {
    let text = value
        .get("text")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::MalformedResponse("missing `text`".into()))?
        .to_string();
    let finish_reason = match value.get("finish_reason").and_then(Value::as_str) {
        Some("stop") => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        Some("error") => FinishReason::Error,
        other => {
            return Err(BackendError::MalformedResponse(format!(
                "unrecognized finish_reason {other:?}"
            )))
        }
    };
    let token_logprobs = match value.get("logprobs") {
        None | Some(Value::Null) => None,
        Some(Value::Array(items)) => {
            let pairs = items
                .iter()
                .map(|item| {
                    let token = item.get("token").and_then(Value::as_str)?;
                    let logprob = item.get("logprob").and_then(Value::as_f64)?;
                    Some((token.to_string(), logprob))
                })
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| BackendError::MalformedResponse("bad logprobs entry".into()))?;
            Some(pairs)
        }
        Some(_) => return Err(BackendError::MalformedResponse("logprobs is not an array".into())),
    };
    Ok(CompletionResponse { text, token_logprobs, finish_reason })
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let mut body = json!({
            "model": self.model,
            "prompt": req.prompt,
            "top_p": req.params.top_p,
            "max_tokens": req.params.max_tokens,
            "temperature": req.params.temperature,
        });
        if let Some(seed) = req.params.seed {
            body["seed"] = json!(seed);
        }
        if self.request_logprobs {
            body["logprobs"] = json!(true);
        }

        let mut rng = rand::rng();
        let mut attempt = 0u32;
        loop {
            match self.attempt(&body) {
                Ok(outcome) => return outcome,
                Err(retryable) => {
                    if attempt >= self.policy.max_retries {
                        return Err(match retryable {
                            Retryable::Transport(msg) => BackendError::Unavailable(msg),
                            Retryable::RateLimited(retry_after) => {
                                BackendError::RateLimited { retry_after }
                            }
                        });
                    }
                    let delay = match &retryable {
                        Retryable::RateLimited(Some(after)) => *after,
                        _ => self.policy.delay(attempt, &mut rng),
                    };
                    self.clock.sleep(delay);
                    attempt += 1;
                }
            }
        }
    }
}
