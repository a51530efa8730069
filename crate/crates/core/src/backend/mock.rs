use serde::{Deserialize, Serialize};

use super::{estimate_prompt_tokens, estimate_tokens, BackendError, ChatBackend, ModelReply};
use crate::digest::sha256_hex;
use crate::protocol::Conversation;

/// One scripted reply. A rule matches when every present condition holds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    /// Number of images in the conversation (1 = stage one, 2 = stage two).
    #[serde(default)]
    pub images: Option<usize>,
    /// Substring the final user turn must contain.
    #[serde(default)]
    pub contains: Option<String>,
    pub reply: String,
}

/// Ordered rules; the first match wins.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    pub rules: Vec<ScriptRule>,
}

impl MockScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn on_stage(mut self, images: usize, reply: impl Into<String>) -> Self {
        self.rules.push(ScriptRule {
            images: Some(images),
            contains: None,
            reply: reply.into(),
        });
        self
    }

    pub fn when_contains(mut self, needle: impl Into<String>, reply: impl Into<String>) -> Self {
        self.rules.push(ScriptRule {
            images: None,
            contains: Some(needle.into()),
            reply: reply.into(),
        });
        self
    }

    pub fn otherwise(mut self, reply: impl Into<String>) -> Self {
        self.rules.push(ScriptRule {
            images: None,
            contains: None,
            reply: reply.into(),
        });
        self
    }

    /// Picks the reply for a conversation. Pure in `(self, conv)`.
    pub fn reply_for(&self, conv: &Conversation) -> Result<&str, BackendError> {
        let images = conv.image_count();
        let last_text = conv.turns.last().map(|t| t.text.as_str()).unwrap_or_default();
        self.rules
            .iter()
            .find(|r| {
                r.images.is_none_or(|n| n == images)
                    && r.contains.as_deref().is_none_or(|s| last_text.contains(s))
            })
            .map(|r| r.reply.as_str())
            .ok_or_else(|| BackendError::Script(format!("{images} image(s), last turn {last_text:?}")))
    }
}

/// Deterministic backend driven by a [`MockScript`].
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    script: MockScript,
}

impl ScriptedBackend {
    pub fn new(script: MockScript) -> Self {
        Self { script }
    }
}

/// Builds a reply with estimated token counts and zero latency.
pub(crate) fn in_process_reply(conv: &Conversation, text: String) -> ModelReply {
    ModelReply {
        prompt_tokens: estimate_prompt_tokens(conv),
        completion_tokens: estimate_tokens(&text),
        text,
        latency_ms: 0.0,
        attempt_count: 1,
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, conv: &Conversation) -> Result<ModelReply, BackendError> {
        conv.validate_for_submission()?;
        let text = self.script.reply_for(conv)?.to_string();
        Ok(in_process_reply(conv, text))
    }

    fn fingerprint(&self) -> String {
        let json = serde_json::to_string(&self.script).unwrap_or_default();
        format!("script:{}", &sha256_hex(&[json.as_bytes()])[..16])
    }
}
