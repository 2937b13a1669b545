use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendConfig, GenerationRequest};
use crate::error::{Error, Result};

const BODY_EXCERPT_CHARS: usize = 300;

/// Chat-completions client for any OpenAI-compatible server.
pub struct HttpChatBackend {
    client: reqwest::blocking::Client,
    endpoint_url: String,
    model_name: String,
    api_key: Option<String>,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    max_tokens: u32,
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

impl HttpChatBackend {
    pub fn new(
        endpoint_url: impl Into<String>,
        model_name: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Invalid(format!("http client: {e}")))?;
        Ok(HttpChatBackend {
            client,
            endpoint_url: endpoint_url.into(),
            model_name: model_name.into(),
            api_key,
        })
    }

    pub fn from_config(cfg: &BackendConfig) -> Result<Self> {
        let url = cfg
            .endpoint_url
            .clone()
            .ok_or_else(|| Error::Invalid("http_chat backend needs endpoint_url".into()))?;
        let api_key = std::env::var(&cfg.api_key_env)
            .ok()
            .filter(|k| !k.is_empty());
        HttpChatBackend::new(
            url,
            &cfg.model_name,
            api_key,
            Duration::from_secs(cfg.timeout_s),
        )
    }
}

/// The request body sent for `req`, as JSON.
pub(crate) fn chat_body(model: &str, req: &GenerationRequest) -> serde_json::Value {
    let mut messages = Vec::with_capacity(2);
    if !req.system_prompt.is_empty() {
        messages.push(ChatMessage {
            role: "system",
            content: &req.system_prompt,
        });
    }
    messages.push(ChatMessage {
        role: "user",
        content: &req.user_prompt,
    });
    serde_json::to_value(ChatRequest {
        model,
        messages,
        max_tokens: req.max_tokens,
        temperature: req.temperature,
    })
    .expect("chat request serializes")
}

impl Backend for HttpChatBackend {
    fn id(&self) -> String {
        format!("http_chat:{}", self.model_name)
    }

    fn complete(&self, req: &GenerationRequest) -> Result<String> {
        let mut builder = self
            .client
            .post(&self.endpoint_url)
            .json(&chat_body(&self.model_name, req));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().map_err(|e| Error::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = resp.status();
        let body = resp.text().map_err(|e| Error::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        if !status.is_success() {
            return Err(Error::Backend {
                status: status.as_u16(),
                body: body.chars().take(BODY_EXCERPT_CHARS).collect(),
            });
        }
        let parsed: ChatResponse = serde_json::from_str(&body)
            .map_err(|e| Error::MalformedResponse(format!("{e}: {}", excerpt(&body))))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Error::MalformedResponse("no choices in response".into()))?;
        Ok(choice.message.content.unwrap_or_default())
    }
}

fn excerpt(body: &str) -> String {
    body.chars().take(BODY_EXCERPT_CHARS).collect()
}
