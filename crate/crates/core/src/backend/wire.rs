//! OpenAI-compatible chat-completions wire format, both directions.
//!
//! Request body:
//!
//! ```json
//! {
//!   "model": "<model_name>",
//!   "messages": [
//!     {"role": "system", "content": "<text>"},
//!     {"role": "user", "content": [
//!       {"type": "image_url", "image_url": {"url": "data:image/png;base64,<...>"}},
//!       {"type": "text", "text": "<text>"}
//!     ]},
//!     {"role": "assistant", "content": "<text>"}
//!   ],
//!   "temperature": 0.0,
//!   "max_tokens": 1024
//! }
//! ```
//!
//! System and assistant content is a plain string; user content is a part
//! list with images first (in attachment order) and the text last. The reply
//! text is `choices[0].message.content`; token counts come from
//! `usage.prompt_tokens` and `usage.completion_tokens` (0 when absent).

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, ModelReply};
use crate::protocol::{Conversation, ImageAttachment, Role, Turn};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Value>,
    pub temperature: f64,
    pub max_tokens: u32,
}

pub fn data_url(att: &ImageAttachment) -> String {
    format!(
        "data:{};base64,{}",
        att.media_type,
        base64::engine::general_purpose::STANDARD.encode(&att.data)
    )
}

pub fn parse_data_url(url: &str) -> Result<ImageAttachment, BackendError> {
    let bad = |m: &str| BackendError::InvalidRequest(format!("image url: {m}"));
    let rest = url.strip_prefix("data:").ok_or_else(|| bad("only data URLs are supported"))?;
    let (media_type, payload) = rest
        .split_once(";base64,")
        .ok_or_else(|| bad("expected `;base64,`"))?;
    let data = base64::engine::general_purpose::STANDARD
        .decode(payload)
        .map_err(|e| bad(&e.to_string()))?;
    Ok(ImageAttachment {
        media_type: media_type.to_string(),
        data,
    })
}

pub fn build_request(conv: &Conversation, model: &str, temperature: f64, max_tokens: u32) -> ChatRequest {
    let messages = conv
        .turns
        .iter()
        .map(|t| match t.role {
            Role::System => json!({"role": "system", "content": t.text}),
            Role::Assistant => json!({"role": "assistant", "content": t.text}),
            Role::User => {
                let mut parts: Vec<Value> = t
                    .images
                    .iter()
                    .map(|img| json!({"type": "image_url", "image_url": {"url": data_url(img)}}))
                    .collect();
                parts.push(json!({"type": "text", "text": t.text}));
                json!({"role": "user", "content": parts})
            }
        })
        .collect();
    ChatRequest {
        model: model.to_string(),
        messages,
        temperature,
        max_tokens,
    }
}

/// Server side: turns a request body back into a conversation. Accepts
/// string or part-list content for every role.
pub fn parse_request(body: &[u8]) -> Result<(ChatRequest, Conversation), BackendError> {
    let bad = |m: String| BackendError::InvalidRequest(m);
    let req: ChatRequest = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
    let mut turns = Vec::with_capacity(req.messages.len());
    for (i, msg) in req.messages.iter().enumerate() {
        let role = match msg.get("role").and_then(Value::as_str) {
            Some("system") => Role::System,
            Some("user") => Role::User,
            Some("assistant") => Role::Assistant,
            other => return Err(bad(format!("message {i}: unsupported role {other:?}"))),
        };
        let mut text = String::new();
        let mut images = Vec::new();
        match msg.get("content") {
            Some(Value::String(s)) => text.push_str(s),
            Some(Value::Array(parts)) => {
                for part in parts {
                    match part.get("type").and_then(Value::as_str) {
                        Some("text") => {
                            if !text.is_empty() {
                                text.push('\n');
                            }
                            text.push_str(part.get("text").and_then(Value::as_str).unwrap_or_default());
                        }
                        Some("image_url") => {
                            let url = part
                                .pointer("/image_url/url")
                                .and_then(Value::as_str)
                                .ok_or_else(|| bad(format!("message {i}: image part without url")))?;
                            images.push(parse_data_url(url)?);
                        }
                        other => return Err(bad(format!("message {i}: unsupported part {other:?}"))),
                    }
                }
            }
            _ => return Err(bad(format!("message {i}: missing content"))),
        }
        turns.push(Turn { role, text, images });
    }
    Ok((req, Conversation::new(turns)))
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Debug, Deserialize)]
struct Message {
    content: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// Client side: extracts `(text, prompt_tokens, completion_tokens)`.
pub fn parse_response(body: &[u8]) -> Result<(String, u64, u64), BackendError> {
    let resp: ChatResponse =
        serde_json::from_slice(body).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
    let text = resp
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| BackendError::MalformedResponse("no choices[0].message.content".into()))?;
    let usage = resp.usage.unwrap_or_default();
    Ok((text, usage.prompt_tokens, usage.completion_tokens))
}

/// Server side: response body for a reply.
pub fn build_response(model: &str, reply: &ModelReply) -> Value {
    json!({
        "id": "chatcmpl-zoomrefine",
        "object": "chat.completion",
        "model": model,
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": reply.text},
            "finish_reason": "stop"
        }],
        "usage": {
            "prompt_tokens": reply.prompt_tokens,
            "completion_tokens": reply.completion_tokens,
            "total_tokens": reply.prompt_tokens + reply.completion_tokens
        }
    })
}

pub fn error_body(kind: &str, message: &str) -> Value {
    json!({"error": {"message": message, "type": kind}})
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Conversation {
        let img = ImageAttachment {
            media_type: "image/png".into(),
            data: vec![0x89, b'P', b'N', b'G', 1, 2, 3],
        };
        Conversation::new(vec![
            Turn::system("sys"),
            Turn::user("look", vec![img.clone()]),
            Turn::assistant("Answer: (A)"),
            Turn::user("again", vec![img]),
        ])
    }

    #[test]
    fn request_layout() {
        let req = build_request(&sample(), "m", 0.0, 64);
        let v = serde_json::to_value(&req).unwrap();
        assert_eq!(v["model"], "m");
        assert_eq!(v["max_tokens"], 64);
        assert_eq!(v["messages"][0], json!({"role": "system", "content": "sys"}));
        assert_eq!(v["messages"][1]["content"][0]["type"], "image_url");
        assert!(v["messages"][1]["content"][0]["image_url"]["url"]
            .as_str()
            .unwrap()
            .starts_with("data:image/png;base64,"));
        assert_eq!(v["messages"][1]["content"][1], json!({"type": "text", "text": "look"}));
        assert_eq!(v["messages"][2]["content"], "Answer: (A)");
    }

    #[test]
    fn request_round_trip() {
        let conv = sample();
        let body = serde_json::to_vec(&build_request(&conv, "m", 0.5, 10)).unwrap();
        let (req, back) = parse_request(&body).unwrap();
        assert_eq!(back, conv);
        assert_eq!(req.temperature, 0.5);
    }

    #[test]
    fn response_parsing() {
        let reply = ModelReply {
            text: "hi".into(),
            prompt_tokens: 3,
            completion_tokens: 1,
            latency_ms: 0.0,
            attempt_count: 1,
        };
        let body = serde_json::to_vec(&build_response("m", &reply)).unwrap();
        assert_eq!(parse_response(&body).unwrap(), ("hi".into(), 3, 1));
        assert_eq!(
            parse_response(br#"{"choices":[{"message":{"content":"x"}}]}"#).unwrap(),
            ("x".into(), 0, 0)
        );
        assert!(matches!(
            parse_response(br#"{"choices":[]}"#),
            Err(BackendError::MalformedResponse(_))
        ));
        assert!(parse_response(b"<html>").is_err());
    }

    #[test]
    fn bad_data_urls() {
        assert!(parse_data_url("https://example.com/a.png").is_err());
        assert!(parse_data_url("data:image/png;base64,@@@").is_err());
    }
}
