//! OpenAI-style `/chat/completions` client.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use super::{BackendError, BackendReply, ChatBackend, GatewayError, ModelConfig, Usage};
use crate::forge::{Conversation, Message};

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: WireMessage,
}

#[derive(Debug, Deserialize)]
struct WireMessage {
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct WireUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

pub struct HttpBackend {
    client: Client,
}

impl HttpBackend {
    pub fn new() -> Result<Self, GatewayError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(180))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(Self { client })
    }

    fn api_key(config: &ModelConfig) -> Result<Option<String>, BackendError> {
        if config.credentials.is_empty() {
            return Ok(None);
        }
        std::env::var(&config.credentials).map(Some).map_err(|_| {
            BackendError::Auth(format!("environment variable {} is not set", config.credentials))
        })
    }
}

/// Maps an HTTP status to the retry class of the failure.
fn classify(status: StatusCode, body: String) -> BackendError {
    match status.as_u16() {
        401 | 403 => BackendError::Auth(format!("{status}: {body}")),
        429 => BackendError::RateLimited(body),
        408 | 409 | 500..=599 => BackendError::Transient(format!("{status}: {body}")),
        _ => BackendError::Malformed(format!("{status}: {body}")),
    }
}

pub(crate) fn parse_reply(body: &str) -> Result<BackendReply, BackendError> {
    let resp: ChatResponse =
        serde_json::from_str(body).map_err(|e| BackendError::Malformed(e.to_string()))?;
    let text = resp
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| BackendError::Malformed("response has no message content".into()))?;
    Ok(BackendReply {
        text,
        usage: resp.usage.map(|u| Usage {
            input_tokens: u.prompt_tokens,
            output_tokens: u.completion_tokens,
        }),
    })
}

impl ChatBackend for HttpBackend {
    fn send(&self, conversation: &Conversation, config: &ModelConfig) -> Result<BackendReply, BackendError> {
        if config.endpoint.is_empty() {
            return Err(BackendError::Config(format!(
                "{}: no endpoint configured",
                config.model_name
            )));
        }
        let body = ChatRequest {
            model: config.api_model.as_deref().unwrap_or(&config.model_name),
            messages: conversation.messages(),
            temperature: config.temperature,
            max_tokens: config.max_output_tokens,
        };
        let mut req = self.client.post(&config.endpoint).json(&body);
        if let Some(key) = Self::api_key(config)? {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transient(e.to_string()))?;
        if !status.is_success() {
            return Err(classify(status, text));
        }
        parse_reply(&text)
    }
}
