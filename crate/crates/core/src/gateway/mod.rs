//! Uniform client for text-generation endpoints.
//!
//! Every model call in the harness goes through [`Gateway::send_completion`],
//! which routes by model name to a [`Backend`], bounds in-flight requests,
//! retries transient failures with jittered exponential backoff and records
//! token usage in the shared cost ledger.

mod fixtures;
mod http;
mod synthetic;
mod tokens;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::params::GenerationParams;
use crate::profile::Role;
use crate::store::SharedLedger;

pub use fixtures::{fixture_key, FixtureStore, RecordingBackend, ReplayBackend};
pub use http::{build_request_body, parse_response_body, HttpBackend, HttpReply, ReqwestTransport, Transport};
pub use synthetic::SyntheticBackend;
pub use tokens::count_tokens_fallback;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub system_instruction: Option<String>,
    pub user_content: String,
    pub params: GenerationParams,
}

impl CompletionRequest {
    pub fn user(model: &str, content: String, params: &GenerationParams) -> Self {
        CompletionRequest {
            model: model.to_string(),
            system_instruction: None,
            user_content: content,
            params: params.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Set when counts come from the whitespace fallback rather than the backend.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub approximate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub content: String,
    pub usage: TokenUsage,
    pub latency_ms: u64,
    pub backend_id: String,
    /// Attempts the gateway needed for this response. Not part of fixtures.
    #[serde(skip, default = "one")]
    pub attempts: u32,
}

fn one() -> u32 {
    1
}

impl CompletionResponse {
    /// True when the backend returned nothing but whitespace.
    pub fn is_empty(&self) -> bool {
        self.content.trim().is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub max_concurrent: usize,
    pub timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_backoff_ms: 500,
            max_backoff_ms: 30_000,
            max_concurrent: 4,
            timeout_ms: 120_000,
        }
    }
}

impl RetryPolicy {
    /// Backoff before retry number `attempt` (1-based), with jitter in
    /// `[d/2, d]` where `d = min(max, base * 2^(attempt-1))`.
    pub fn backoff(&self, attempt: u32, rng: &mut impl Rng) -> Duration {
        let exp = self
            .base_backoff_ms
            .saturating_mul(1u64 << (attempt.saturating_sub(1)).min(32));
        let capped = exp.min(self.max_backoff_ms);
        let lo = capped / 2;
        let ms = if capped > lo { rng.random_range(lo..=capped) } else { capped };
        Duration::from_millis(ms)
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend returned status {status}: {message}")]
    Backend {
        status: u16,
        message: String,
        retry_after_ms: Option<u64>,
    },
    #[error("request timed out after {after_ms} ms")]
    Timeout { after_ms: u64 },
    #[error("no fixture recorded for request key {key}")]
    MissingFixture { key: String },
    #[error("fixture {path:?} is corrupt: {reason}")]
    FixtureCorrupt { path: PathBuf, reason: String },
    #[error("no endpoint configured for model {0:?}")]
    UnknownModel(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed backend response: {0}")]
    Decode(String),
    #[error("fixture store i/o: {0}")]
    Io(String),
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Transport { .. } | GatewayError::Timeout { .. } => true,
            GatewayError::Backend { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[async_trait]
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    async fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError>;
}

struct Route {
    backend: Arc<dyn Backend>,
    role: Role,
}

/// Routes requests to backends by model name.
pub struct Gateway {
    routes: HashMap<String, Route>,
    policy: RetryPolicy,
    permits: Arc<Semaphore>,
    ledger: Arc<SharedLedger>,
}

impl Gateway {
    pub fn new(policy: RetryPolicy) -> Self {
        let permits = Arc::new(Semaphore::new(policy.max_concurrent.max(1)));
        Gateway {
            routes: HashMap::new(),
            policy,
            permits,
            ledger: Arc::new(SharedLedger::default()),
        }
    }

    pub fn register(&mut self, model: &str, role: Role, backend: Arc<dyn Backend>) {
        self.routes.insert(model.to_string(), Route { backend, role });
    }

    pub fn policy(&self) -> &RetryPolicy {
        &self.policy
    }

    pub fn ledger(&self) -> &Arc<SharedLedger> {
        &self.ledger
    }

    pub fn has_model(&self, model: &str) -> bool {
        self.routes.contains_key(model)
    }

    pub async fn send_completion(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        if req.user_content.is_empty() {
            return Err(GatewayError::InvalidRequest("user_content is empty".into()));
        }
        let route = self
            .routes
            .get(&req.model)
            .ok_or_else(|| GatewayError::UnknownModel(req.model.clone()))?;
        let max_attempts = self.policy.max_attempts.max(1);
        let timeout = Duration::from_millis(self.policy.timeout_ms);
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = {
                let _permit = self.permits.acquire().await.expect("gateway semaphore closed");
                let started = Instant::now();
                match tokio::time::timeout(timeout, route.backend.complete(req)).await {
                    Ok(Ok(mut resp)) => {
                        if resp.latency_ms == 0 {
                            resp.latency_ms = started.elapsed().as_millis() as u64;
                        }
                        Ok(resp)
                    }
                    Ok(Err(e)) => Err(e),
                    Err(_) => Err(GatewayError::Timeout {
                        after_ms: self.policy.timeout_ms,
                    }),
                }
            };
            match result {
                Ok(mut resp) => {
                    resp.attempts = attempt;
                    if attempt > 1 {
                        log::info!("{}: succeeded after {attempt} attempts", req.model);
                    }
                    self.ledger
                        .record(&req.model, route.role == Role::Oracle, &resp.usage);
                    return Ok(resp);
                }
                Err(e) if e.is_retryable() && attempt < max_attempts => {
                    let mut delay = self.policy.backoff(attempt, &mut rand::rng());
                    if let GatewayError::Backend {
                        retry_after_ms: Some(ms), ..
                    } = &e
                    {
                        delay = delay.max(Duration::from_millis(*ms));
                    }
                    log::warn!(
                        "{}: attempt {attempt}/{max_attempts} failed ({e}); retrying in {} ms",
                        req.model,
                        delay.as_millis()
                    );
                    tokio::time::sleep(delay).await;
                }
                Err(GatewayError::Transport { message, .. }) => {
                    return Err(GatewayError::Transport {
                        attempts: attempt,
                        message,
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}
