//! OpenAI-compatible `/chat/completions` client.

use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use url::Url;

use super::{
    BackendConfig, BackendError, ChatBackend, ChatMessage, ChatRequest, ChatResponse, FinishReason,
};

/// Error bodies are truncated to this many characters.
const MAX_ERROR_BODY_CHARS: usize = 512;

pub struct HttpBackend {
    name: String,
    base_url: Url,
    model_id: String,
    api_key_env: Option<String>,
    client: reqwest::Client,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("name", &self.name)
            .field("base_url", &self.base_url.as_str())
            .field("model_id", &self.model_id)
            .field("api_key_env", &self.api_key_env)
            .finish()
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct WireResponse {
    #[serde(default)]
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl HttpBackend {
    pub fn from_config(config: &BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let client = reqwest::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| BackendError::Config(format!("http client: {e}")))?;
        Ok(Self {
            name: config.name.clone(),
            base_url: config.base_url.clone().expect("validated"),
            model_id: config.model_id.clone().expect("validated"),
            api_key_env: config.api_key_env.clone(),
            client,
        })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.as_str().trim_end_matches('/'))
    }

    fn api_key(&self) -> Result<Option<String>, BackendError> {
        match &self.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| BackendError::Config(format!("environment variable {var} is not set"))),
        }
    }
}

fn scrub(text: &str, secret: Option<&str>) -> String {
    let mut text: String = text.chars().take(MAX_ERROR_BODY_CHARS).collect();
    if let Some(secret) = secret.filter(|s| !s.is_empty()) {
        text = text.replace(secret, "[redacted]");
    }
    text
}

fn map_reqwest(err: reqwest::Error, secret: Option<&str>) -> BackendError {
    if err.is_timeout() {
        BackendError::Timeout
    } else {
        BackendError::Transport(scrub(&err.without_url().to_string(), secret))
    }
}

#[async_trait]
impl ChatBackend for HttpBackend {
    fn name(&self) -> &str {
        &self.name
    }

    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let key = self.api_key()?;
        let body = WireRequest {
            model: &self.model_id,
            messages: &request.messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            seed: request.seed,
        };
        let started = Instant::now();
        let mut builder = self.client.post(self.endpoint()).json(&body);
        if let Some(key) = &key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .await
            .map_err(|e| map_reqwest(e, key.as_deref()))?;
        let status = response.status();
        let text = response
            .text()
            .await
            .map_err(|e| map_reqwest(e, key.as_deref()))?;
        if !status.is_success() {
            return Err(BackendError::Remote {
                status: status.as_u16(),
                body: scrub(&text, key.as_deref()),
            });
        }
        let wire: WireResponse = serde_json::from_str(&text)
            .map_err(|e| BackendError::Transport(format!("malformed response body: {e}")))?;
        let latency_ms = started.elapsed().as_millis() as u64;
        let choice = wire
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Transport("response has no choices".into()))?;
        let content = choice.message.content.unwrap_or_default();
        let finish = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            _ if content.is_empty() => FinishReason::Error,
            Some("stop") | None => FinishReason::Stop,
            Some(_) => FinishReason::Error,
        };
        let (tokens_in, tokens_out) = wire
            .usage
            .map(|u| (u.prompt_tokens, u.completion_tokens))
            .unwrap_or((0, 0));
        Ok(ChatResponse { content, finish, latency_ms, tokens_in, tokens_out })
    }

    async fn probe(&self) -> bool {
        self.client
            .get(self.base_url.clone())
            .timeout(Duration::from_secs(3))
            .send()
            .await
            .is_ok()
    }
}
