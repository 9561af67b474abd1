//! Chat completion providers.
//!
//! Every provider takes a [`ChatRequest`] (one rendered prompt, optional
//! system text, no history) and returns a [`ChatResponse`]. The HTTP
//! providers share one code path: [`wire`] encodes and decodes the three
//! supported JSON shapes, [`retry`] and [`ratelimit`] govern pacing, and
//! [`http::HttpTransport`] does the I/O. [`mock::MockProvider`] answers
//! deterministically without any network.

pub mod http;
pub mod mock;
pub mod ratelimit;
pub mod retry;
pub mod wire;

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use http::{HttpProvider, HttpReply, HttpRequest, HttpTransport, ScriptedTransport, UreqTransport};
pub use mock::MockProvider;
pub use ratelimit::TokenBucket;
pub use retry::{RecordingSleeper, RetryPolicy, Sleeper, ThreadSleeper};
pub use wire::{decode_response, encode_request, WireRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    OpenaiCompat,
    Anthropic,
    OllamaLocal,
    Mock,
}

impl ProviderKind {
    /// Short name used in `--model <kind>:<id>` selectors.
    pub fn short(self) -> &'static str {
        match self {
            ProviderKind::OpenaiCompat => "openai",
            ProviderKind::Anthropic => "anthropic",
            ProviderKind::OllamaLocal => "ollama",
            ProviderKind::Mock => "mock",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "openai" | "openai_compat" => ProviderKind::OpenaiCompat,
            "anthropic" => ProviderKind::Anthropic,
            "ollama" | "ollama_local" => ProviderKind::OllamaLocal,
            "mock" => ProviderKind::Mock,
            _ => return None,
        })
    }

    pub fn default_base_url(self) -> &'static str {
        match self {
            ProviderKind::OpenaiCompat => "https://api.openai.com",
            ProviderKind::Anthropic => "https://api.anthropic.com",
            ProviderKind::OllamaLocal => "http://localhost:11434",
            ProviderKind::Mock => "",
        }
    }

    pub fn default_api_key_env(self) -> &'static str {
        match self {
            ProviderKind::OpenaiCompat => "OPENAI_API_KEY",
            ProviderKind::Anthropic => "ANTHROPIC_API_KEY",
            ProviderKind::OllamaLocal => "OLLAMA_API_KEY",
            ProviderKind::Mock => "",
        }
    }
}

impl fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

/// Model configuration for a run. Holds the *name* of the environment
/// variable with the API key, never the key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ProviderKind,
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub base_url: String,
    pub api_key_env: String,
    pub request_timeout_s: u64,
}

impl ModelConfig {
    pub const DEFAULT_MAX_TOKENS: u32 = 1024;
    pub const DEFAULT_TIMEOUT_S: u64 = 120;

    pub fn new(kind: ProviderKind, model_id: impl Into<String>) -> Self {
        ModelConfig {
            kind,
            model_id: model_id.into(),
            temperature: 0.0,
            max_tokens: Self::DEFAULT_MAX_TOKENS,
            base_url: kind.default_base_url().to_string(),
            api_key_env: kind.default_api_key_env().to_string(),
            request_timeout_s: Self::DEFAULT_TIMEOUT_S,
        }
    }

    pub fn mock(seed: impl Into<String>) -> Self {
        Self::new(ProviderKind::Mock, seed)
    }

    /// Parses `<kind>:<model_id>`; the model id may itself contain colons.
    pub fn from_selector(selector: &str) -> Result<Self, ProviderError> {
        let (kind, id) = selector.split_once(':').ok_or_else(|| {
            ProviderError::InvalidConfig(format!("model selector {selector:?} must be <kind>:<model_id>"))
        })?;
        let kind = ProviderKind::parse(kind).ok_or_else(|| {
            ProviderError::InvalidConfig(format!(
                "unknown provider kind {kind:?} (expected openai, anthropic, ollama or mock)"
            ))
        })?;
        let cfg = ModelConfig::new(kind, id);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn selector(&self) -> String {
        format!("{}:{}", self.kind.short(), self.model_id)
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.model_id.is_empty() {
            return Err(ProviderError::InvalidConfig("model id is empty".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(ProviderError::InvalidConfig(format!(
                "temperature {} must be >= 0",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(ProviderError::InvalidConfig("max_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: Option<String>,
    pub user: String,
}

impl ChatRequest {
    pub fn user(text: impl Into<String>) -> Self {
        ChatRequest {
            system: None,
            user: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub input_tokens: Option<u64>,
    pub output_tokens: Option<u64>,
    pub latency_ms: u64,
    pub model_echo: Option<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProviderError {
    #[error("authentication failed (HTTP {status}): {message}")]
    Auth { status: u16, message: String },
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("server error (HTTP {status}): {message}")]
    Server { status: u16, message: String },
    #[error("network error: {0}")]
    Network(String),
    #[error("malformed response at {path}: {message}")]
    MalformedResponse { path: String, message: String },
    #[error("request rejected (HTTP {status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("environment variable {0} holding the API key is not set")]
    MissingApiKey(String),
    #[error("{0} provider has no wire format")]
    NotApplicable(ProviderKind),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("request has an empty user message")]
    EmptyRequest,
    #[error("mock provider: {0}")]
    Mock(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted {
        attempts: u32,
        last: Box<ProviderError>,
    },
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            ProviderError::RateLimited(_) | ProviderError::Server { .. } | ProviderError::Network(_)
        )
    }

    /// True for credential problems, including ones wrapped by retries.
    pub fn is_auth(&self) -> bool {
        match self {
            ProviderError::Auth { .. } | ProviderError::MissingApiKey(_) => true,
            ProviderError::RetriesExhausted { last, .. } => last.is_auth(),
            _ => false,
        }
    }

    /// Maps an HTTP status of a failed call to an error.
    pub fn from_status(status: u16, body: &str) -> Self {
        let message: String = body.chars().take(300).collect();
        match status {
            401 | 403 => ProviderError::Auth { status, message },
            429 => ProviderError::RateLimited(message),
            500..=599 => ProviderError::Server { status, message },
            _ => ProviderError::Rejected { status, message },
        }
    }
}

pub trait Provider: Send + Sync {
    fn config(&self) -> &ModelConfig;
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError>;
}

/// Knobs for building a provider from a [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct ProviderOptions {
    /// Requests per second; `None` disables limiting.
    pub rate_limit: Option<f64>,
    pub retry: RetryPolicy,
    /// Fixture replay file for the mock provider.
    pub mock_fixtures: Option<PathBuf>,
}

impl Default for ProviderOptions {
    fn default() -> Self {
        ProviderOptions {
            rate_limit: Some(ratelimit::DEFAULT_RATE_PER_S),
            retry: RetryPolicy::default(),
            mock_fixtures: None,
        }
    }
}

pub fn from_config(config: &ModelConfig, options: &ProviderOptions) -> Result<Arc<dyn Provider>, ProviderError> {
    config.validate()?;
    Ok(match config.kind {
        ProviderKind::Mock => match &options.mock_fixtures {
            Some(path) => Arc::new(MockProvider::from_fixture_file(config.clone(), path)?),
            None => Arc::new(MockProvider::seeded(config.clone())),
        },
        _ => {
            let mut p = HttpProvider::new(config.clone(), Arc::new(UreqTransport::new()))?
                .with_retry(options.retry.clone());
            if let Some(rate) = options.rate_limit {
                p = p.with_rate_limit(Arc::new(TokenBucket::new(rate)));
            }
            Arc::new(p)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selectors() {
        let c = ModelConfig::from_selector("mock:seed1").unwrap();
        assert_eq!(c.kind, ProviderKind::Mock);
        assert_eq!(c.model_id, "seed1");
        assert_eq!(c.temperature, 0.0);
        let c = ModelConfig::from_selector("ollama:llama3:8b").unwrap();
        assert_eq!(c.model_id, "llama3:8b");
        assert_eq!(c.base_url, "http://localhost:11434");
        assert_eq!(c.selector(), "ollama:llama3:8b");
        assert!(ModelConfig::from_selector("gpt").is_err());
        assert!(ModelConfig::from_selector("foo:bar").is_err());
        assert!(ModelConfig::from_selector("openai:").is_err());
    }

    #[test]
    fn status_classification() {
        assert!(matches!(ProviderError::from_status(401, ""), ProviderError::Auth { .. }));
        assert!(matches!(ProviderError::from_status(403, ""), ProviderError::Auth { .. }));
        assert!(ProviderError::from_status(429, "").is_retryable());
        assert!(ProviderError::from_status(503, "").is_retryable());
        assert!(!ProviderError::from_status(400, "").is_retryable());
        assert!(!ProviderError::from_status(401, "").is_retryable());
    }
}
