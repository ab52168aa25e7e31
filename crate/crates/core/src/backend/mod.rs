//! Completion-backend abstraction.
//!
//! Every agent call goes through [`CompletionBackend`]. The scripted
//! implementation drives tests and hermetic fixtures deterministically; the
//! HTTP implementation talks to a real provider with retries. A
//! [`RecordingBackend`] wrapper captures every request for auditing.

mod http;
mod scripted;

pub use http::{Clock, HttpBackend, Jitter, RetryPolicy, SystemClock};
pub use scripted::{Matcher, ScriptEntry, ScriptResponse, ScriptedBackend};

use crate::text;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Mutex;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("rate limited (retry-after: {retry_after:?})")]
    RateLimited { retry_after: Option<Duration> },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("script exhausted: no remaining entry matches a {role} request")]
    ScriptExhausted { role: Role },
}

/// Which agent issued a request. Backends may route or parametrize on it;
/// the scripted backend matches on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Retrieval,
    Plan,
    Code,
    Debug,
    Keywords,
    Describe,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Retrieval => "retrieval",
            Role::Plan => "plan",
            Role::Code => "code",
            Role::Debug => "debug",
            Role::Keywords => "keywords",
            Role::Describe => "describe",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub top_p: f64,
    pub max_tokens: usize,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self { top_p: 0.95, max_tokens: 256, temperature: 0.2, seed: None }
    }
}

impl GenerationParams {
    /// Role defaults: plans sample at a higher temperature for diversity,
    /// everything else stays near-deterministic.
    pub fn for_role(role: Role) -> Self {
        let temperature = match role {
            Role::Plan => 0.7,
            _ => 0.2,
        };
        Self { temperature, ..Self::default() }
    }

    /// Doubles the token budget for tasks flagged long.
    pub fn long(mut self) -> Self {
        self.max_tokens = 512;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub params: GenerationParams,
    pub role: Role,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    /// Per-token log-probabilities when the provider supplies them; the
    /// detokenized tokens concatenate to `text`.
    pub token_logprobs: Option<Vec<(String, f64)>>,
    pub finish_reason: FinishReason,
}

pub trait CompletionBackend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError>;
}

impl<B: CompletionBackend + ?Sized> CompletionBackend for &B {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        (**self).complete(req)
    }
}

/// Cuts `text` at the end of its `max_tokens`-th token.
pub(crate) fn enforce_token_cap(text: &str, max_tokens: usize) -> (String, FinishReason) {
    let spans = text::token_spans(text);
    if spans.len() > max_tokens {
        let end = spans[max_tokens - 1].1;
        (text[..end].to_string(), FinishReason::Length)
    } else {
        (text.to_string(), FinishReason::Stop)
    }
}

/// Transparent wrapper that records every request before delegating.
pub struct RecordingBackend<B> {
    inner: B,
    log: Mutex<Vec<CompletionRequest>>,
}

impl<B: CompletionBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self { inner, log: Mutex::new(Vec::new()) }
    }

    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.log.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().unwrap().len()
    }
}

impl<B: CompletionBackend> CompletionBackend for RecordingBackend<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        self.log.lock().unwrap().push(req.clone());
        self.inner.complete(req)
    }
}
