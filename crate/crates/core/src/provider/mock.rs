//! Deterministic offline provider.
//!
//! Two modes:
//!
//! - *seeded*: the reply is a JSON object derived from
//!   `sha256(model_id || "\n" || prompt)`, so the same seed and prompt give
//!   byte-identical text on every call. Temperature is ignored.
//! - *fixtures*: replies are looked up by the SHA-256 of the prompt in a
//!   `{ "<prompt hash>": "<reply>" }` JSON file.
//!
//! Faults can be injected per request for failure-path tests.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{ChatRequest, ChatResponse, ModelConfig, Provider, ProviderError};
use crate::content_hash;

type FaultFn = Box<dyn Fn(&ChatRequest) -> Option<ProviderError> + Send + Sync>;

enum Mode {
    Seeded,
    Fixtures(HashMap<String, String>),
}

pub struct MockProvider {
    config: ModelConfig,
    mode: Mode,
    faults: Vec<FaultFn>,
    latency: Option<Duration>,
    calls: AtomicUsize,
}

impl std::fmt::Debug for MockProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockProvider")
            .field("config", &self.config)
            .field("faults", &self.faults.len())
            .finish()
    }
}

#[derive(Serialize)]
struct SeededReply {
    label: &'static str,
    count: u8,
    score: u8,
    quotes: Vec<String>,
    rationale: String,
}

impl MockProvider {
    pub fn seeded(config: ModelConfig) -> Self {
        MockProvider {
            config,
            mode: Mode::Seeded,
            faults: Vec::new(),
            latency: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_fixtures(config: ModelConfig, fixtures: HashMap<String, String>) -> Self {
        MockProvider {
            mode: Mode::Fixtures(fixtures),
            ..Self::seeded(config)
        }
    }

    pub fn from_fixture_file(config: ModelConfig, path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::InvalidConfig(format!("{}: {e}", path.display())))?;
        let fixtures = serde_json::from_str(&text)
            .map_err(|e| ProviderError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Ok(Self::with_fixtures(config, fixtures))
    }

    /// Fails every request for which `fault` returns an error.
    pub fn with_fault(
        mut self,
        fault: impl Fn(&ChatRequest) -> Option<ProviderError> + Send + Sync + 'static,
    ) -> Self {
        self.faults.push(Box::new(fault));
        self
    }

    /// Permanently fails prompts containing `needle` with a non-retryable
    /// error.
    pub fn fail_when_contains(self, needle: impl Into<String>) -> Self {
        let needle = needle.into();
        self.with_fault(move |req| {
            req.user
                .contains(&needle)
                .then(|| ProviderError::Mock(format!("injected failure for prompt containing {needle:?}")))
        })
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// The seeded reply for `prompt`, without counting a call.
    pub fn seeded_reply(seed: &str, prompt: &str) -> String {
        let mut h = Sha256::new();
        h.update(seed.as_bytes());
        h.update(b"\n");
        h.update(prompt.as_bytes());
        let digest = h.finalize();
        let present = digest[0] % 2 == 0;
        let quote: String = prompt
            .lines()
            .rev()
            .find(|l| !l.trim().is_empty())
            .unwrap_or("")
            .split_whitespace()
            .take(8)
            .collect::<Vec<_>>()
            .join(" ");
        let reply = SeededReply {
            label: if present { "Present" } else { "Absent" },
            count: if present { 1 + digest[1] % 4 } else { 0 },
            score: 1 + digest[2] % 6,
            quotes: if present && !quote.is_empty() { vec![quote] } else { Vec::new() },
            rationale: format!("mock rationale {}", hex::encode(&digest[..4])),
        };
        serde_json::to_string(&reply).expect("reply serializes")
    }
}

impl Provider for MockProvider {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let started = Instant::now();
        self.calls.fetch_add(1, Ordering::SeqCst);
        if request.user.is_empty() {
            return Err(ProviderError::EmptyRequest);
        }
        if let Some(err) = self.faults.iter().find_map(|f| f(request)) {
            return Err(err);
        }
        if let Some(latency) = self.latency {
            std::thread::sleep(latency);
        }
        let text = match &self.mode {
            Mode::Seeded => Self::seeded_reply(&self.config.model_id, &request.user),
            Mode::Fixtures(map) => {
                let key = content_hash(&request.user);
                map.get(&key)
                    .cloned()
                    .ok_or_else(|| ProviderError::Mock(format!("no fixture for prompt hash {key}")))?
            }
        };
        Ok(ChatResponse {
            input_tokens: Some(request.user.split_whitespace().count() as u64),
            output_tokens: Some(text.split_whitespace().count() as u64),
            text,
            latency_ms: started.elapsed().as_millis() as u64,
            model_echo: Some(self.config.model_id.clone()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::{parse_structured, OutputSchema, ParseMode};
    use proptest::prelude::*;

    #[test]
    fn fixture_echo() {
        let prompt = "Code this: hello";
        let fixtures = HashMap::from([(content_hash(prompt), "LABEL: Present".to_string())]);
        let p = MockProvider::with_fixtures(ModelConfig::mock("fx"), fixtures);
        assert_eq!(p.complete(&ChatRequest::user(prompt)).unwrap().text, "LABEL: Present");
        assert!(matches!(p.complete(&ChatRequest::user("other")), Err(ProviderError::Mock(_))));
    }

    #[test]
    fn seeded_reply_parses() {
        let p = MockProvider::seeded(ModelConfig::mock("seed1"));
        let text = p.complete(&ChatRequest::user("Material:\nwe filed with the IRB")).unwrap().text;
        let mut schema = OutputSchema::presence();
        schema.score = Some(crate::extract::ScoreSpec { min: 1.0, max: 6.0 });
        assert_eq!(parse_structured(&text, &schema).parse_mode, ParseMode::Json);
    }

    #[test]
    fn seeds_differ() {
        let a: Vec<_> = (0..20).map(|i| MockProvider::seeded_reply("a", &i.to_string())).collect();
        let b: Vec<_> = (0..20).map(|i| MockProvider::seeded_reply("b", &i.to_string())).collect();
        assert_ne!(a, b);
    }

    #[test]
    fn injected_fault() {
        let p = MockProvider::seeded(ModelConfig::mock("s")).fail_when_contains("row-3");
        assert!(p.complete(&ChatRequest::user("row-2")).is_ok());
        let e = p.complete(&ChatRequest::user("row-3")).unwrap_err();
        assert!(!e.is_retryable());
        assert_eq!(p.calls(), 2);
    }

    proptest! {
        #[test]
        fn deterministic(seed in "[a-z0-9]{1,8}", prompt in "\\PC{1,200}") {
            let p = MockProvider::seeded(ModelConfig::mock(seed.clone()));
            let q = MockProvider::seeded(ModelConfig::mock(seed));
            let a = p.complete(&ChatRequest::user(prompt.clone())).unwrap().text;
            let b = q.complete(&ChatRequest::user(prompt)).unwrap().text;
            prop_assert_eq!(a, b);
        }
    }
}
