//! OpenAI-compatible chat-completions client with per-token log-probabilities.

use std::time::{Duration, Instant};

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{BackendError, BackendProfile, ChatRequest, ChatResponse, LanguageModel};
use crate::error::{Error, Result};

pub struct OpenAiModel {
    endpoint: String,
    model_name: String,
    embedding_endpoint: Option<String>,
    api_key: Option<String>,
    client: Client,
}

impl OpenAiModel {
    pub fn new(profile: &BackendProfile, api_key: Option<String>) -> Result<Self> {
        let client = Client::builder()
            .timeout(Duration::from_secs_f64(profile.timeout_seconds))
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(OpenAiModel {
            endpoint: profile.endpoint.trim_end_matches('/').to_string(),
            model_name: profile.model_name.clone(),
            embedding_endpoint: profile
                .embedding_endpoint
                .as_ref()
                .map(|e| e.trim_end_matches('/').to_string()),
            api_key,
            client,
        })
    }

    pub fn request_body(&self, request: &ChatRequest) -> Value {
        chat_request_body(&self.model_name, request)
    }

    fn post(&self, url: &str, body: &Value) -> Result<String, BackendError> {
        let mut builder = self.client.post(url).json(body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| BackendError::Transport {
            attempts: 1,
            message: format!("{url}: {e}"),
        })?;
        let status = response.status();
        let text = response.text().map_err(|e| BackendError::Transport {
            attempts: 1,
            message: format!("{url}: reading body: {e}"),
        })?;
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Err(BackendError::Transport {
                attempts: 1,
                message: format!("{url}: HTTP {status}"),
            });
        }
        if !status.is_success() {
            return Err(BackendError::Decode {
                endpoint: url.to_string(),
                message: format!("HTTP {status}: {}", truncate(&text, 200)),
            });
        }
        Ok(text)
    }
}

fn truncate(text: &str, max: usize) -> &str {
    match text.char_indices().nth(max) {
        Some((i, _)) => &text[..i],
        None => text,
    }
}

pub(crate) fn chat_request_body(model: &str, request: &ChatRequest) -> Value {
    let mut messages = Vec::new();
    if !request.system.is_empty() {
        messages.push(json!({"role": "system", "content": request.system}));
    }
    messages.push(json!({"role": "user", "content": request.user}));
    json!({
        "model": model,
        "messages": messages,
        "max_tokens": request.max_tokens,
        "temperature": request.temperature,
        "logprobs": true,
    })
}

/// Extracts text, token probabilities and usage from a chat-completions body.
/// Log-probabilities are exponentiated; values that underflow are clamped to
/// the smallest positive double.
pub fn parse_chat_response(
    endpoint: &str,
    body: &str,
    want_token_probs: bool,
    elapsed_seconds: f64,
) -> Result<ChatResponse, BackendError> {
    let decode = |message: String| BackendError::Decode {
        endpoint: endpoint.to_string(),
        message,
    };
    let value: Value = serde_json::from_str(body).map_err(|e| decode(format!("invalid JSON: {e}")))?;
    let choice = value
        .pointer("/choices/0")
        .ok_or_else(|| decode("response has no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| decode("choice has no message content".into()))?
        .to_string();

    let mut token_probs = Vec::new();
    if let Some(entries) = choice.pointer("/logprobs/content").and_then(Value::as_array) {
        for entry in entries {
            let lp = entry
                .get("logprob")
                .and_then(Value::as_f64)
                .ok_or_else(|| decode("logprob entry without a numeric logprob".into()))?;
            token_probs.push(lp.min(0.0).exp().max(f64::MIN_POSITIVE));
        }
    }
    if want_token_probs && token_probs.is_empty() {
        return Err(BackendError::Capability {
            endpoint: endpoint.to_string(),
            capability: "token probabilities",
        });
    }

    let usage = |key: &str| value.pointer(&format!("/usage/{key}")).and_then(Value::as_u64);
    let prompt_tokens = usage("prompt_tokens").unwrap_or(0);
    let completion_tokens = if token_probs.is_empty() {
        usage("completion_tokens").unwrap_or(0)
    } else {
        token_probs.len() as u64
    };
    Ok(ChatResponse {
        text,
        token_probs,
        prompt_tokens,
        completion_tokens,
        elapsed_seconds,
    })
}

/// Reads `data[0].embedding` from an embeddings response.
pub fn parse_embedding_response(endpoint: &str, body: &str) -> Result<Vec<f64>, BackendError> {
    let decode = |message: String| BackendError::Decode {
        endpoint: endpoint.to_string(),
        message,
    };
    let value: Value = serde_json::from_str(body).map_err(|e| decode(format!("invalid JSON: {e}")))?;
    value
        .pointer("/data/0/embedding")
        .and_then(Value::as_array)
        .ok_or_else(|| decode("response has no data[0].embedding".into()))?
        .iter()
        .map(|v| v.as_f64().ok_or_else(|| decode("non-numeric embedding value".into())))
        .collect()
}

impl LanguageModel for OpenAiModel {
    fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let url = format!("{}/chat/completions", self.endpoint);
        let started = Instant::now();
        let body = self.post(&url, &self.request_body(request))?;
        let elapsed = started.elapsed().as_secs_f64();
        parse_chat_response(&self.endpoint, &body, request.want_token_probs, elapsed)
    }

    fn hidden_state(&self, prompt: &str) -> Result<Vec<f64>, BackendError> {
        let Some(base) = &self.embedding_endpoint else {
            return Err(BackendError::Capability {
                endpoint: self.endpoint.clone(),
                capability: "hidden-state embeddings",
            });
        };
        let url = format!("{base}/embeddings");
        let body = self.post(&url, &json!({"model": self.model_name, "input": prompt}))?;
        parse_embedding_response(base, &body)
    }
}
