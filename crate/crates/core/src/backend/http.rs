use std::time::{Duration, Instant};

use rand::Rng;
use tracing::{debug, warn};

use super::{wire, BackendConfig, BackendError, ChatBackend, ModelReply};
use crate::protocol::Conversation;

/// Blocking client for OpenAI-compatible chat-completions endpoints.
///
/// Retries HTTP 429, 5xx, timeouts and connection failures up to
/// `max_retries` times with exponential backoff plus jitter. 401/403 fail
/// immediately with [`BackendError::Auth`]; other 4xx fail immediately with
/// [`BackendError::Rejected`].
pub struct HttpBackend {
    cfg: BackendConfig,
    url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

enum Attempt {
    Done(String, u64, u64),
    Retry(String),
}

impl HttpBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        let api_key = if cfg.api_key_env_var.is_empty() {
            None
        } else {
            match std::env::var(&cfg.api_key_env_var) {
                Ok(k) if !k.is_empty() => Some(k),
                _ => {
                    warn!(var = %cfg.api_key_env_var, "API key variable unset; sending no Authorization header");
                    None
                }
            }
        };
        Self::with_api_key(cfg, api_key)
    }

    pub fn with_api_key(cfg: BackendConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        cfg.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.request_timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let url = format!("{}/chat/completions", cfg.endpoint_url.trim_end_matches('/'));
        Ok(Self {
            cfg,
            url,
            api_key,
            client,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    fn attempt(&self, body: &[u8]) -> Result<Attempt, BackendError> {
        let mut req = self
            .client
            .post(&self.url)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_vec());
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return Ok(Attempt::Retry(e.to_string())),
        };
        let status = resp.status().as_u16();
        let bytes = match resp.bytes() {
            Ok(b) => b,
            Err(e) => return Ok(Attempt::Retry(e.to_string())),
        };
        let text = || String::from_utf8_lossy(&bytes).chars().take(500).collect::<String>();
        match status {
            200..=299 => {
                let (t, p, c) = wire::parse_response(&bytes)?;
                Ok(Attempt::Done(t, p, c))
            }
            401 | 403 => Err(BackendError::Auth { status, body: text() }),
            429 | 500..=599 => Ok(Attempt::Retry(format!("HTTP {status}: {}", text()))),
            _ => Err(BackendError::Rejected { status, body: text() }),
        }
    }

    fn backoff(&self, retry: u32) -> Duration {
        let base = self.cfg.retry_backoff_base_secs * 2f64.powi(retry as i32);
        let jitter = rand::rng().random_range(0.0..=0.5);
        Duration::from_secs_f64(base * (1.0 + jitter))
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, conv: &Conversation) -> Result<ModelReply, BackendError> {
        conv.validate_for_submission()?;
        let req = wire::build_request(conv, &self.cfg.model_name, self.cfg.temperature, self.cfg.max_output_tokens);
        let body = serde_json::to_vec(&req).map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let start = Instant::now();
        let mut last_error = String::new();
        let attempts = self.cfg.max_retries + 1;
        for attempt in 1..=attempts {
            match self.attempt(&body)? {
                Attempt::Done(text, prompt_tokens, completion_tokens) => {
                    return Ok(ModelReply {
                        text,
                        prompt_tokens,
                        completion_tokens,
                        latency_ms: start.elapsed().as_secs_f64() * 1e3,
                        attempt_count: attempt,
                    })
                }
                Attempt::Retry(err) => {
                    debug!(attempt, error = %err, "transient backend failure");
                    last_error = err;
                    if attempt < attempts {
                        std::thread::sleep(self.backoff(attempt - 1));
                    }
                }
            }
        }
        Err(BackendError::Unavailable { attempts, last_error })
    }

    fn fingerprint(&self) -> String {
        format!(
            "http:{}:t={}:max_tokens={}",
            self.cfg.model_name, self.cfg.temperature, self.cfg.max_output_tokens
        )
    }
}
