use std::collections::VecDeque;
use std::fmt;
use std::io::Read;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use super::ratelimit::TokenBucket;
use super::retry::{RetryPolicy, Sleeper, ThreadSleeper};
use super::wire::{decode_response, encode_request};
use super::{ChatRequest, ChatResponse, ModelConfig, Provider, ProviderError, ProviderKind};

#[derive(Clone, PartialEq, Eq)]
pub struct HttpRequest {
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
    pub timeout: Duration,
}

// Headers carry credentials; keep them out of debug output.
impl fmt::Debug for HttpRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpRequest")
            .field("url", &self.url)
            .field(
                "headers",
                &self.headers.iter().map(|(k, _)| k.as_str()).collect::<Vec<_>>(),
            )
            .field("body", &self.body)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// Blocking POST of a JSON body. `Err` means the exchange itself failed
/// (DNS, connect, timeout); HTTP error statuses come back as `Ok`.
pub trait HttpTransport: Send + Sync {
    fn post(&self, request: &HttpRequest) -> Result<HttpReply, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new() -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        UreqTransport { agent }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl HttpTransport for UreqTransport {
    fn post(&self, request: &HttpRequest) -> Result<HttpReply, String> {
        let mut call = self
            .agent
            .post(&request.url)
            .config()
            .timeout_global(Some(request.timeout))
            .build();
        for (k, v) in &request.headers {
            call = call.header(k, v);
        }
        let mut resp = call.send(request.body.as_bytes()).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let mut body = String::new();
        resp.body_mut()
            .as_reader()
            .read_to_string(&mut body)
            .map_err(|e| e.to_string())?;
        Ok(HttpReply { status, body })
    }
}

/// Replays a fixed sequence of replies and records every request.
/// Used for fault injection.
#[derive(Debug, Default)]
pub struct ScriptedTransport {
    script: Mutex<VecDeque<Result<HttpReply, String>>>,
    seen: Mutex<Vec<HttpRequest>>,
}

impl ScriptedTransport {
    pub fn new(script: impl IntoIterator<Item = Result<HttpReply, String>>) -> Self {
        ScriptedTransport {
            script: Mutex::new(script.into_iter().collect()),
            seen: Mutex::new(Vec::new()),
        }
    }

    /// Replies with the given statuses; 2xx statuses carry `success_body`.
    pub fn statuses(statuses: &[u16], success_body: &str) -> Self {
        Self::new(statuses.iter().map(|&status| {
            Ok(HttpReply {
                status,
                body: if (200..300).contains(&status) {
                    success_body.to_string()
                } else {
                    format!("{{\"error\":\"status {status}\"}}")
                },
            })
        }))
    }

    pub fn requests(&self) -> Vec<HttpRequest> {
        self.seen.lock().unwrap().clone()
    }
}

impl HttpTransport for ScriptedTransport {
    fn post(&self, request: &HttpRequest) -> Result<HttpReply, String> {
        self.seen.lock().unwrap().push(request.clone());
        self.script
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| Err("script exhausted".into()))
    }
}

/// Provider for the OpenAI-compatible, Anthropic and Ollama HTTP APIs.
pub struct HttpProvider {
    config: ModelConfig,
    api_key: Option<String>,
    transport: Arc<dyn HttpTransport>,
    retry: RetryPolicy,
    sleeper: Arc<dyn Sleeper>,
    limiter: Option<Arc<TokenBucket>>,
}

impl fmt::Debug for HttpProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpProvider")
            .field("config", &self.config)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("retry", &self.retry)
            .finish()
    }
}

impl HttpProvider {
    /// Reads the API key from the environment variable named in `config`.
    /// Ollama may run without one.
    pub fn new(config: ModelConfig, transport: Arc<dyn HttpTransport>) -> Result<Self, ProviderError> {
        let key = if config.api_key_env.is_empty() {
            None
        } else {
            std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty())
        };
        Self::with_api_key(config, transport, key)
    }

    pub fn with_api_key(
        config: ModelConfig,
        transport: Arc<dyn HttpTransport>,
        api_key: Option<String>,
    ) -> Result<Self, ProviderError> {
        config.validate()?;
        match config.kind {
            ProviderKind::Mock => return Err(ProviderError::NotApplicable(ProviderKind::Mock)),
            ProviderKind::OllamaLocal => {}
            _ if api_key.is_none() => return Err(ProviderError::MissingApiKey(config.api_key_env.clone())),
            _ => {}
        }
        Ok(HttpProvider {
            config,
            api_key,
            transport,
            retry: RetryPolicy::default(),
            sleeper: Arc::new(ThreadSleeper),
            limiter: None,
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_sleeper(mut self, sleeper: Arc<dyn Sleeper>) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn with_rate_limit(mut self, limiter: Arc<TokenBucket>) -> Self {
        self.limiter = Some(limiter);
        self
    }

    fn headers(&self) -> Vec<(String, String)> {
        let mut h = vec![("content-type".to_string(), "application/json".to_string())];
        match (self.config.kind, &self.api_key) {
            (ProviderKind::Anthropic, Some(key)) => {
                h.push(("x-api-key".into(), key.clone()));
                h.push(("anthropic-version".into(), "2023-06-01".into()));
            }
            (ProviderKind::Anthropic, None) => {
                h.push(("anthropic-version".into(), "2023-06-01".into()));
            }
            (_, Some(key)) => h.push(("authorization".into(), format!("Bearer {key}"))),
            (_, None) => {}
        }
        h
    }
}

impl Provider for HttpProvider {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        if request.user.is_empty() {
            return Err(ProviderError::EmptyRequest);
        }
        let wire = encode_request(&self.config, request)?;
        let http = HttpRequest {
            url: format!("{}{}", self.config.base_url.trim_end_matches('/'), wire.path),
            headers: self.headers(),
            body: wire.body,
            timeout: Duration::from_secs(self.config.request_timeout_s.max(1)),
        };
        let started = Instant::now();
        let (mut response, _attempts) = self.retry.run(self.sleeper.as_ref(), |_| {
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            let reply = self.transport.post(&http).map_err(ProviderError::Network)?;
            if (200..300).contains(&reply.status) {
                decode_response(self.config.kind, &reply.body)
            } else {
                Err(ProviderError::from_status(reply.status, &reply.body))
            }
        })?;
        response.latency_ms = started.elapsed().as_millis() as u64;
        Ok(response)
    }
}
