//! Request and response bodies for the three HTTP chat APIs.
//!
//! | kind            | endpoint               | reply text               |
//! |-----------------|------------------------|--------------------------|
//! | `openai_compat` | `/v1/chat/completions` | `choices[0].message.content` |
//! | `anthropic`     | `/v1/messages`         | `content[0].text`        |
//! | `ollama_local`  | `/api/chat`            | `message.content`        |
//!
//! Bodies are serialized from structs so field order is fixed and the
//! output is byte-stable.

use serde::Serialize;
use serde_json::Value;

use super::{ChatRequest, ChatResponse, ModelConfig, ProviderError, ProviderKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireRequest {
    pub path: &'static str,
    pub body: String,
}

#[derive(Serialize)]
struct Message<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct OpenAiBody<'a> {
    model: &'a str,
    temperature: f64,
    max_tokens: u32,
    messages: Vec<Message<'a>>,
}

#[derive(Serialize)]
struct AnthropicBody<'a> {
    model: &'a str,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    system: Option<&'a str>,
    messages: Vec<Message<'a>>,
    temperature: f64,
}

#[derive(Serialize)]
struct OllamaOptions {
    temperature: f64,
    num_predict: u32,
}

#[derive(Serialize)]
struct OllamaBody<'a> {
    model: &'a str,
    messages: Vec<Message<'a>>,
    options: OllamaOptions,
    stream: bool,
}

fn chat_messages<'a>(request: &'a ChatRequest) -> Vec<Message<'a>> {
    let mut messages = Vec::with_capacity(2);
    if let Some(system) = &request.system {
        messages.push(Message {
            role: "system",
            content: system,
        });
    }
    messages.push(Message {
        role: "user",
        content: &request.user,
    });
    messages
}

pub fn encode_request(config: &ModelConfig, request: &ChatRequest) -> Result<WireRequest, ProviderError> {
    let (path, body) = match config.kind {
        ProviderKind::OpenaiCompat => (
            "/v1/chat/completions",
            to_json(&OpenAiBody {
                model: &config.model_id,
                temperature: config.temperature,
                max_tokens: config.max_tokens,
                messages: chat_messages(request),
            }),
        ),
        ProviderKind::Anthropic => (
            "/v1/messages",
            to_json(&AnthropicBody {
                model: &config.model_id,
                max_tokens: config.max_tokens,
                system: request.system.as_deref(),
                messages: vec![Message {
                    role: "user",
                    content: &request.user,
                }],
                temperature: config.temperature,
            }),
        ),
        ProviderKind::OllamaLocal => (
            "/api/chat",
            to_json(&OllamaBody {
                model: &config.model_id,
                messages: chat_messages(request),
                options: OllamaOptions {
                    temperature: config.temperature,
                    num_predict: config.max_tokens,
                },
                stream: false,
            }),
        ),
        ProviderKind::Mock => return Err(ProviderError::NotApplicable(ProviderKind::Mock)),
    };
    Ok(WireRequest { path, body })
}

fn to_json<T: Serialize>(body: &T) -> String {
    serde_json::to_string(body).expect("request body serializes")
}

fn malformed(path: &str, message: impl Into<String>) -> ProviderError {
    ProviderError::MalformedResponse {
        path: path.to_string(),
        message: message.into(),
    }
}

/// Walks `root` along `path` (object keys and array indices), naming the
/// first missing step on failure.
fn walk<'a>(root: &'a Value, path: &[Step]) -> Result<&'a Value, ProviderError> {
    let mut cur = root;
    let mut shown = String::new();
    for step in path {
        match step {
            Step::Key(k) => {
                if !shown.is_empty() {
                    shown.push('.');
                }
                shown.push_str(k);
                cur = cur.get(*k).ok_or_else(|| malformed(&shown, "missing"))?;
            }
            Step::Index(i) => {
                shown.push_str(&format!("[{i}]"));
                cur = cur.get(*i).ok_or_else(|| malformed(&shown, "missing"))?;
            }
        }
    }
    Ok(cur)
}

enum Step {
    Key(&'static str),
    Index(usize),
}

use Step::{Index, Key};

fn text_at(root: &Value, path: &[Step], shown: &str) -> Result<String, ProviderError> {
    walk(root, path)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| malformed(shown, "not a string"))
}

fn opt_u64(root: &Value, path: &[Step]) -> Option<u64> {
    walk(root, path).ok().and_then(Value::as_u64)
}

pub fn decode_response(kind: ProviderKind, body: &str) -> Result<ChatResponse, ProviderError> {
    let root: Value = serde_json::from_str(body).map_err(|e| malformed("$", e.to_string()))?;
    let (text, input_tokens, output_tokens) = match kind {
        ProviderKind::OpenaiCompat => (
            text_at(
                &root,
                &[Key("choices"), Index(0), Key("message"), Key("content")],
                "choices[0].message.content",
            )?,
            opt_u64(&root, &[Key("usage"), Key("prompt_tokens")]),
            opt_u64(&root, &[Key("usage"), Key("completion_tokens")]),
        ),
        ProviderKind::Anthropic => (
            text_at(&root, &[Key("content"), Index(0), Key("text")], "content[0].text")?,
            opt_u64(&root, &[Key("usage"), Key("input_tokens")]),
            opt_u64(&root, &[Key("usage"), Key("output_tokens")]),
        ),
        ProviderKind::OllamaLocal => (
            text_at(&root, &[Key("message"), Key("content")], "message.content")?,
            opt_u64(&root, &[Key("prompt_eval_count")]),
            opt_u64(&root, &[Key("eval_count")]),
        ),
        ProviderKind::Mock => return Err(ProviderError::NotApplicable(ProviderKind::Mock)),
    };
    Ok(ChatResponse {
        text,
        input_tokens,
        output_tokens,
        latency_ms: 0,
        model_echo: root.get("model").and_then(Value::as_str).map(str::to_string),
    })
}
