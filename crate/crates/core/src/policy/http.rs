//! OpenAI-compatible HTTP backend.
//!
//! Sampling goes to `/v1/chat/completions` with `logprobs: true`, falling back
//! to `/v1/completions` when the chat route is missing (404). Teacher-forced
//! scoring uses `/v1/completions` with `echo: true`, keeping the echoed tokens
//! whose text offset falls inside the completion.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use async_trait::async_trait;
use serde::Deserialize;
use serde_json::json;

use super::backend::{BackendError, FinishReason, Generation, GenerationRequest, PolicyBackend};
use super::{ClientPolicy, WireProtocol};

pub struct OpenAiBackend {
    http: reqwest::Client,
    base_url: String,
    model: String,
    api_key: Option<String>,
    chat_missing: AtomicBool,
}

impl OpenAiBackend {
    /// Builds the backend, reading the API key from `policy.api_key_env` if set.
    pub fn from_policy(policy: &ClientPolicy) -> Result<Self, BackendError> {
        let api_key = std::env::var(&policy.api_key_env).ok().filter(|k| !k.is_empty());
        let mut builder = reqwest::Client::builder();
        if policy.timeout_ms > 0 {
            builder = builder.timeout(Duration::from_millis(policy.timeout_ms));
        }
        let http = builder
            .build()
            .map_err(|e| BackendError::permanent(format!("cannot build HTTP client: {e}")))?;
        Ok(OpenAiBackend {
            http,
            base_url: policy.endpoint_url.trim_end_matches('/').to_string(),
            model: policy.model.clone(),
            api_key,
            chat_missing: AtomicBool::new(policy.protocol == WireProtocol::Completions),
        })
    }

    async fn post(&self, route: &str, body: serde_json::Value) -> Result<serde_json::Value, HttpFailure> {
        let mut req = self.http.post(format!("{}{route}", self.base_url)).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| HttpFailure::Network(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().await.map_err(|e| HttpFailure::Network(e.to_string()))?;
        if !status.is_success() {
            return Err(HttpFailure::Status(status.as_u16(), truncate(&text, 300)));
        }
        serde_json::from_str(&text).map_err(|e| HttpFailure::Body(format!("invalid JSON response: {e}")))
    }

    async fn generate_chat(&self, req: &GenerationRequest) -> Result<Generation, HttpFailure> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "n": 1,
            "logprobs": true,
            "seed": req.seed,
        });
        let value = self.post("/v1/chat/completions", body).await?;
        let resp: ChatResponse = parse_body(value)?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| HttpFailure::Body("response has no choices".into()))?;
        let logprobs = choice
            .logprobs
            .and_then(|l| l.content)
            .ok_or_else(|| HttpFailure::Body("response carries no logprobs".into()))?
            .into_iter()
            .map(|t| t.logprob)
            .collect();
        Ok(Generation {
            text: choice.message.content.unwrap_or_default(),
            token_logprobs: logprobs,
            finish_reason: finish_reason(choice.finish_reason.as_deref()),
        })
    }

    async fn generate_completion(&self, req: &GenerationRequest) -> Result<Generation, HttpFailure> {
        let body = json!({
            "model": self.model,
            "prompt": req.prompt,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "n": 1,
            "logprobs": 1,
            "seed": req.seed,
        });
        let value = self.post("/v1/completions", body).await?;
        let resp: CompletionResponse = parse_body(value)?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| HttpFailure::Body("response has no choices".into()))?;
        let logprobs = choice
            .logprobs
            .ok_or_else(|| HttpFailure::Body("response carries no logprobs".into()))?;
        let token_logprobs = logprobs
            .token_logprobs
            .into_iter()
            .map(|lp| lp.ok_or_else(|| HttpFailure::Body("null token logprob".into())))
            .collect::<Result<_, _>>()?;
        Ok(Generation {
            text: choice.text,
            token_logprobs,
            finish_reason: finish_reason(choice.finish_reason.as_deref()),
        })
    }
}

#[async_trait]
impl PolicyBackend for OpenAiBackend {
    async fn generate(&self, req: &GenerationRequest) -> Result<Generation, BackendError> {
        if !self.chat_missing.load(Ordering::Relaxed) {
            match self.generate_chat(req).await {
                Err(HttpFailure::Status(404, _)) => {
                    log::warn!("chat completions route missing; falling back to /v1/completions");
                    self.chat_missing.store(true, Ordering::Relaxed);
                }
                other => return other.map_err(HttpFailure::into_backend),
            }
        }
        self.generate_completion(req).await.map_err(HttpFailure::into_backend)
    }

    async fn score(&self, prompt: &str, completion: &str) -> Result<Vec<f64>, BackendError> {
        let full = format!("{prompt}{completion}");
        let body = json!({
            "model": self.model,
            "prompt": full,
            "max_tokens": 1,
            "temperature": 0.0,
            "echo": true,
            "logprobs": 0,
        });
        let value = match self.post("/v1/completions", body).await {
            Ok(v) => v,
            Err(HttpFailure::Status(code @ (400 | 404 | 405 | 422 | 501), msg)) => {
                return Err(BackendError::unsupported(format!(
                    "endpoint rejected echo scoring with HTTP {code}: {msg}"
                )))
            }
            Err(other) => return Err(other.into_backend()),
        };
        let resp: CompletionResponse = parse_body(value).map_err(HttpFailure::into_backend)?;
        let logprobs = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .ok_or_else(|| BackendError::unsupported("endpoint returned no echoed logprobs"))?;
        let offsets = logprobs
            .text_offset
            .ok_or_else(|| BackendError::unsupported("endpoint returned no text offsets"))?;
        completion_logprobs(
            &logprobs.token_logprobs,
            &offsets,
            prompt.chars().count(),
            full.chars().count(),
        )
    }
}

/// Picks the echoed tokens that start inside `[prompt_chars, end_chars)`.
fn completion_logprobs(
    token_logprobs: &[Option<f64>],
    offsets: &[usize],
    prompt_chars: usize,
    end_chars: usize,
) -> Result<Vec<f64>, BackendError> {
    if token_logprobs.len() != offsets.len() {
        return Err(BackendError::permanent("token_logprobs and text_offset lengths differ"));
    }
    let mut out = Vec::new();
    for (lp, &off) in token_logprobs.iter().zip(offsets) {
        if off >= prompt_chars && off < end_chars {
            out.push(lp.ok_or_else(|| BackendError::permanent("null logprob inside completion"))?);
        }
    }
    if out.is_empty() {
        return Err(BackendError::permanent("no completion tokens in echoed response"));
    }
    Ok(out)
}

fn finish_reason(raw: Option<&str>) -> FinishReason {
    match raw {
        Some("length") => FinishReason::Length,
        _ => FinishReason::Stop,
    }
}

fn truncate(s: &str, max_chars: usize) -> String {
    s.chars().take(max_chars).collect()
}

fn parse_body<T: for<'de> Deserialize<'de>>(value: serde_json::Value) -> Result<T, HttpFailure> {
    serde_json::from_value(value).map_err(|e| HttpFailure::Body(format!("unexpected response shape: {e}")))
}

enum HttpFailure {
    Network(String),
    Status(u16, String),
    Body(String),
}

impl HttpFailure {
    fn into_backend(self) -> BackendError {
        match self {
            HttpFailure::Network(m) => BackendError::transient(m),
            HttpFailure::Status(code, m) if code == 408 || code == 429 || code >= 500 => {
                BackendError::transient(format!("HTTP {code}: {m}"))
            }
            HttpFailure::Status(code, m) => BackendError::permanent(format!("HTTP {code}: {m}")),
            HttpFailure::Body(m) => BackendError::permanent(m),
        }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    logprobs: Option<ChatLogprobs>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatLogprobs {
    #[serde(default)]
    content: Option<Vec<ChatTokenLogprob>>,
}

#[derive(Deserialize)]
struct ChatTokenLogprob {
    logprob: f64,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    #[serde(default)]
    text: String,
    #[serde(default)]
    logprobs: Option<CompletionLogprobs>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct CompletionLogprobs {
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    text_offset: Option<Vec<usize>>,
}
