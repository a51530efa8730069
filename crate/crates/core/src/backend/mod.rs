//! The model boundary: submit a [`Conversation`], receive text plus cost
//! accounting.
//!
//! [`HttpBackend`] speaks the OpenAI-compatible chat-completions contract
//! (see [`wire`]). [`ScriptedBackend`] is a deterministic rule-driven double.
//! [`WireServer`] exposes any [`ChatBackend`] over the same contract.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{Conversation, ProtocolError};

mod http;
pub(crate) mod mock;
mod server;
pub mod wire;

pub use http::HttpBackend;
pub use mock::{MockScript, ScriptRule, ScriptedBackend};
pub use server::WireServer;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("authentication rejected (HTTP {status}): {body}")]
    Auth { status: u16, body: String },
    #[error("backend unavailable after {attempts} attempt(s): {last_error}")]
    Unavailable { attempts: u32, last_error: String },
    #[error("request rejected (HTTP {status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no script rule matches: {0}")]
    Script(String),
    #[error("unknown scene `{0}`")]
    UnknownScene(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    /// Errors that no amount of retrying or continuing will fix.
    pub fn is_fatal(&self) -> bool {
        matches!(self, BackendError::Auth { .. } | BackendError::Config(_))
    }
}

impl From<ProtocolError> for BackendError {
    fn from(e: ProtocolError) -> Self {
        BackendError::InvalidRequest(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    /// Base URL; requests go to `{endpoint_url}/chat/completions`.
    pub endpoint_url: String,
    pub model_name: String,
    /// Environment variable holding the bearer token. Empty means no auth.
    pub api_key_env_var: String,
    pub request_timeout_secs: f64,
    pub max_retries: u32,
    pub retry_backoff_base_secs: f64,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://127.0.0.1:8000/v1".into(),
            model_name: "default".into(),
            api_key_env_var: "OPENAI_API_KEY".into(),
            request_timeout_secs: 120.0,
            max_retries: 3,
            retry_backoff_base_secs: 1.0,
            temperature: 0.0,
            max_output_tokens: 1024,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.request_timeout_secs.is_finite() && self.request_timeout_secs > 0.0) {
            return Err(BackendError::Config("request_timeout_secs must be > 0".into()));
        }
        if !(self.retry_backoff_base_secs.is_finite() && self.retry_backoff_base_secs >= 0.0) {
            return Err(BackendError::Config("retry_backoff_base_secs must be >= 0".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BackendError::Config("temperature must be >= 0".into()));
        }
        if self.model_name.trim().is_empty() {
            return Err(BackendError::Config("model_name must not be empty".into()));
        }
        Ok(())
    }
}

/// Assistant text plus per-call accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReply {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: f64,
    pub attempt_count: u32,
}

/// A model. Implementations must be callable from many threads at once.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, conv: &Conversation) -> Result<ModelReply, BackendError>;

    /// Identity of the model and anything else that determines its replies;
    /// part of the evaluation cache key.
    fn fingerprint(&self) -> String;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    fn complete(&self, conv: &Conversation) -> Result<ModelReply, BackendError> {
        (**self).complete(conv)
    }

    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete(&self, conv: &Conversation) -> Result<ModelReply, BackendError> {
        (**self).complete(conv)
    }

    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
}

/// Counts calls forwarded to an inner backend.
pub struct CountingBackend<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B: ChatBackend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl<B: ChatBackend> ChatBackend for CountingBackend<B> {
    fn complete(&self, conv: &Conversation) -> Result<ModelReply, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(conv)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
}

/// Nominal token cost charged per image by the in-process backends.
pub const IMAGE_TOKEN_ESTIMATE: u64 = 256;

/// Whitespace word count; the token estimate used by in-process backends.
pub fn estimate_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

pub fn estimate_prompt_tokens(conv: &Conversation) -> u64 {
    conv.turns.iter().map(|t| estimate_tokens(&t.text)).sum::<u64>()
        + IMAGE_TOKEN_ESTIMATE * conv.image_count() as u64
}
