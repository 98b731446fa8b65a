//! Chat-completion backends.
//!
//! Every agent talks to its model through [`ChatBackend`]. Two
//! implementations ship: [`HttpBackend`] for OpenAI-compatible
//! `/chat/completions` servers and [`ScriptedBackend`], a deterministic
//! stand-in used by tests and offline demos. [`BackendPool`] maps backend
//! names to instances and applies the retry policy on every call.

mod http;
mod retry;
mod scripted;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::clock::Clock;

pub use http::HttpBackend;
pub use retry::{send_with_retry, Delivered, RetryError, RetryPolicy};
pub use scripted::{Matcher, ScriptError, ScriptFault, ScriptReply, ScriptSpec, ScriptedBackend};

pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;
pub const DEFAULT_MAX_RETRIES: u32 = 2;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub backend_name: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    /// Request with reproducibility-first defaults: temperature 0 and seed 0.
    pub fn new(backend_name: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            backend_name: backend_name.into(),
            messages,
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
            seed: Some(0),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let first = self
            .messages
            .first()
            .ok_or_else(|| BackendError::InvalidRequest("messages are empty".into()))?;
        if first.role == Role::Assistant {
            return Err(BackendError::InvalidRequest(
                "first message must be system or user".into(),
            ));
        }
        for pair in self.messages.windows(2) {
            if pair[0].role == Role::Assistant && pair[1].role == Role::Assistant {
                return Err(BackendError::InvalidRequest(
                    "consecutive assistant messages".into(),
                ));
            }
        }
        if self
            .messages
            .iter()
            .any(|m| m.role != Role::System && m.content.trim().is_empty())
        {
            return Err(BackendError::InvalidRequest(
                "user and assistant messages must have content".into(),
            ));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// All message contents joined by newlines, as seen by script matchers.
    pub fn transcript(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish: FinishReason,
    pub latency_ms: u64,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("remote returned status {status}: {body}")]
    Remote { status: u16, body: String },
    #[error("scripted backend has no reply for this request")]
    ScriptExhausted,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
}

impl BackendError {
    /// Timeouts, transport failures and 5xx responses are worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Timeout | BackendError::Transport(_) => true,
            BackendError::Remote { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;

    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;

    /// Cheap reachability check used by the health endpoint.
    async fn probe(&self) -> bool {
        true
    }
}

/// Validates the request before handing it to the backend, so malformed
/// requests never reach the network.
pub async fn complete(
    backend: &dyn ChatBackend,
    request: &ChatRequest,
) -> Result<ChatResponse, BackendError> {
    request.validate()?;
    backend.complete(request).await
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Scripted,
}

fn default_timeout_ms() -> u64 {
    DEFAULT_TIMEOUT_MS
}

fn default_max_retries() -> u32 {
    DEFAULT_MAX_RETRIES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub name: String,
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<Url>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Inline script entries for `kind = "scripted"`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub script: Vec<ScriptSpec>,
    /// JSON array of script entries, appended after the inline ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script_file: Option<PathBuf>,
}

impl BackendConfig {
    pub fn scripted(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: BackendKind::Scripted,
            base_url: None,
            model_id: None,
            api_key_env: None,
            timeout_ms: DEFAULT_TIMEOUT_MS,
            max_retries: DEFAULT_MAX_RETRIES,
            script: Vec::new(),
            script_file: None,
        }
    }

    pub fn http(name: impl Into<String>, base_url: Url, model_id: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Http,
            base_url: Some(base_url),
            model_id: Some(model_id.into()),
            ..Self::scripted(name)
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.name.trim().is_empty() {
            return Err(BackendError::Config("backend name is empty".into()));
        }
        if self.timeout_ms == 0 {
            return Err(BackendError::Config(format!("{}: timeout_ms must be positive", self.name)));
        }
        if self.kind == BackendKind::Http && (self.base_url.is_none() || self.model_id.is_none()) {
            return Err(BackendError::Config(format!(
                "{}: http backends need base_url and model_id",
                self.name
            )));
        }
        Ok(())
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy::new(self.max_retries)
    }
}

/// Builds a backend instance from its configuration. Script files are read
/// here; relative paths must already be resolved by the caller.
pub fn build_backend(config: &BackendConfig) -> Result<Arc<dyn ChatBackend>, BackendError> {
    config.validate()?;
    match config.kind {
        BackendKind::Http => Ok(Arc::new(HttpBackend::from_config(config)?)),
        BackendKind::Scripted => {
            let backend = ScriptedBackend::new(config.name.clone());
            let mut specs = config.script.clone();
            if let Some(path) = &config.script_file {
                let raw = std::fs::read_to_string(path).map_err(|e| {
                    BackendError::Config(format!("cannot read script {}: {e}", path.display()))
                })?;
                let more: Vec<ScriptSpec> = serde_json::from_str(&raw).map_err(|e| {
                    BackendError::Config(format!("bad script {}: {e}", path.display()))
                })?;
                specs.extend(more);
            }
            for spec in specs {
                backend
                    .register_spec(spec)
                    .map_err(|e| BackendError::Config(format!("{}: {e}", config.name)))?;
            }
            Ok(Arc::new(backend))
        }
    }
}

/// Agent name to backend name. Lookups fall back from the exact agent to
/// `specialist` (for specialist roles) and then to `default`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRoutes {
    pub default: String,
    #[serde(flatten)]
    pub overrides: BTreeMap<String, String>,
}

impl AgentRoutes {
    pub const TRANSLATOR: &'static str = "translator";
    pub const TRIAGE: &'static str = "triage";
    pub const REFERRAL: &'static str = "referral";
    pub const SELECTOR: &'static str = "selector";
    pub const SPECIALIST: &'static str = "specialist";
    pub const MODERATOR: &'static str = "moderator";
    pub const SIMPLIFIER: &'static str = "simplifier";

    pub fn new(default: impl Into<String>) -> Self {
        Self { default: default.into(), overrides: BTreeMap::new() }
    }

    pub fn with(mut self, agent: &str, backend: &str) -> Self {
        self.overrides.insert(agent.to_string(), backend.to_string());
        self
    }

    pub fn backend_for(&self, agent: &str) -> &str {
        self.overrides
            .get(agent)
            .map(String::as_str)
            .unwrap_or(&self.default)
    }

    /// Referral notes come from the triage persona unless routed elsewhere.
    pub fn referral_backend(&self) -> &str {
        self.overrides
            .get(Self::REFERRAL)
            .map(String::as_str)
            .unwrap_or_else(|| self.backend_for(Self::TRIAGE))
    }

    pub fn specialist_backend(&self, role: &str) -> &str {
        self.overrides
            .get(role)
            .or_else(|| self.overrides.get(Self::SPECIALIST))
            .map(String::as_str)
            .unwrap_or(&self.default)
    }

    /// Every backend name referenced by the routes.
    pub fn referenced(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.default.as_str()).chain(self.overrides.values().map(String::as_str))
    }
}

struct PoolEntry {
    backend: Arc<dyn ChatBackend>,
    policy: RetryPolicy,
}

/// Named backends plus their retry policies.
pub struct BackendPool {
    entries: BTreeMap<String, PoolEntry>,
    clock: Arc<dyn Clock>,
}

impl BackendPool {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self { entries: BTreeMap::new(), clock }
    }

    pub fn from_configs(
        configs: &[BackendConfig],
        clock: Arc<dyn Clock>,
    ) -> Result<Self, BackendError> {
        let mut pool = Self::new(clock);
        for config in configs {
            pool.insert(config.name.clone(), build_backend(config)?, config.retry_policy());
        }
        Ok(pool)
    }

    pub fn insert(&mut self, name: impl Into<String>, backend: Arc<dyn ChatBackend>, policy: RetryPolicy) {
        self.entries.insert(name.into(), PoolEntry { backend, policy });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn ChatBackend>> {
        self.entries.get(name).map(|e| e.backend.clone())
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    /// Sends `request` to the backend named in `request.backend_name`.
    pub async fn call(&self, request: &ChatRequest) -> Result<Delivered, RetryError> {
        let Some(entry) = self.entries.get(&request.backend_name) else {
            return Err(RetryError {
                attempts: 0,
                source: BackendError::Config(format!(
                    "unknown backend `{}`",
                    request.backend_name
                )),
            });
        };
        send_with_retry(entry.backend.as_ref(), &entry.policy, self.clock.as_ref(), request).await
    }

    /// Probes every backend; returns the names that failed.
    pub async fn unreachable(&self) -> Vec<String> {
        let mut failed = Vec::new();
        for (name, entry) in &self.entries {
            if !entry.backend.probe().await {
                failed.push(name.clone());
            }
        }
        failed
    }
}
