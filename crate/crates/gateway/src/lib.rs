//! Clients for remote scorers (VQA yes-probability, embedding similarity,
//! scalar preference) and remote prompt expansion, plus a loopback mock
//! server that speaks the same wire schema.
//!
//! The request and response bodies are described in `docs/scorer_wire.md`.

mod client;
mod ensemble;
mod expander;
pub mod mock;

use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use client::{request_id, score_batch, ImageBlob, RemoteKind, ScoreItem, ScorerClient};
pub use ensemble::{VqaTemplateEnsemble, DEFAULT_TEMPLATES, PLACEHOLDER};
pub use expander::HttpExpander;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid endpoint config: {0}")]
    Config(String),
    #[error("invalid template ensemble: {0}")]
    Template(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("HTTP {status} from {url}: {body}")]
    Status { status: u16, url: String, body: String },
    #[error("response lacks log-probabilities")]
    MissingLogprobs,
    #[error("non-finite value in response: {0}")]
    NonFinite(String),
    #[error("response lacks a scalar score")]
    MissingScalar,
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero embedding vector")]
    ZeroVector,
    #[error("response for request {sent} carries id {got}")]
    Attribution { sent: String, got: String },
    #[error("malformed response: {0}")]
    Decode(String),
}

/// Which remote service an endpoint serves. Each role reads its URL and
/// bearer token from its own pair of environment variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndpointRole {
    Scorer,
    Embedding,
    Expansion,
}

impl EndpointRole {
    pub fn url_var(self) -> &'static str {
        match self {
            EndpointRole::Scorer => "RWRFORGE_SCORER_URL",
            EndpointRole::Embedding => "RWRFORGE_EMBEDDING_URL",
            EndpointRole::Expansion => "RWRFORGE_EXPANSION_URL",
        }
    }

    pub fn token_var(self) -> &'static str {
        match self {
            EndpointRole::Scorer => "RWRFORGE_SCORER_TOKEN",
            EndpointRole::Embedding => "RWRFORGE_EMBEDDING_TOKEN",
            EndpointRole::Expansion => "RWRFORGE_EXPANSION_TOKEN",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles for each later one.
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, backoff_base_ms: 200 }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, failed_attempts: u32) -> Duration {
        let shift = failed_attempts.saturating_sub(1).min(16);
        Duration::from_millis(self.backoff_base_ms.saturating_mul(1 << shift))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerEndpoint {
    pub base_url: String,
    /// Model name sent in every request body.
    pub model: String,
    /// Environment variable holding the bearer token, if the server wants one.
    pub token_env: Option<String>,
    pub timeout_ms: u64,
    pub max_concurrency: usize,
    pub retry: RetryPolicy,
}

impl Default for ScorerEndpoint {
    fn default() -> Self {
        Self {
            base_url: String::new(),
            model: String::new(),
            token_env: None,
            timeout_ms: 30_000,
            max_concurrency: 8,
            retry: RetryPolicy::default(),
        }
    }
}

impl ScorerEndpoint {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self { base_url: base_url.into(), ..Self::default() }
    }

    /// Endpoint for `role` with the URL taken from its environment variable.
    pub fn from_env(role: EndpointRole) -> Result<Self, GatewayError> {
        let url = std::env::var(role.url_var())
            .map_err(|_| GatewayError::Config(format!("{} is not set", role.url_var())))?;
        Ok(Self { token_env: Some(role.token_var().into()), ..Self::new(url) })
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(GatewayError::Config(format!("base_url {:?} is not an http(s) URL", self.base_url)));
        }
        if self.timeout_ms == 0 {
            return Err(GatewayError::Config("timeout_ms must be positive".into()));
        }
        if self.max_concurrency == 0 {
            return Err(GatewayError::Config("max_concurrency must be at least 1".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(GatewayError::Config("retry.max_attempts must be at least 1".into()));
        }
        Ok(())
    }

    pub(crate) fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base_url.trim_end_matches('/'))
    }

    /// The bearer token, read from `token_env` when that variable is set.
    pub(crate) fn token(&self) -> Option<String> {
        self.token_env.as_ref().and_then(|v| std::env::var(v).ok()).filter(|t| !t.is_empty())
    }
}
