//! HTTP client for remote backends.
//!
//! Two wire profiles:
//!
//! * `native`: `POST {role, prompt, system?, images:[base64], mask?:base64, params}`
//!   answered by `{text?, image?:base64}`.
//! * `chat`: an OpenAI-style chat-completions body with image parts as data
//!   URLs; the reply text is `choices[0].message.content`. Text roles only.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendRequest, CallError, RawReply};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireProfile {
    #[default]
    Native,
    Chat,
}

#[derive(Debug, Clone)]
pub struct HttpBackend {
    name: String,
    url: String,
    token: Option<String>,
    profile: WireProfile,
    model: Option<String>,
    /// Send store ids instead of base64 payloads (co-located backends).
    send_store_ids: bool,
    client: Client,
}

#[derive(Debug, Serialize, Deserialize)]
struct NativeReply {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    image: Option<String>,
}

impl HttpBackend {
    pub fn new(
        name: impl Into<String>,
        url: impl Into<String>,
        profile: WireProfile,
        timeout: Duration,
    ) -> Result<Self, String> {
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| format!("cannot build http client: {e}"))?;
        Ok(HttpBackend {
            name: name.into(),
            url: url.into(),
            token: None,
            profile,
            model: None,
            send_store_ids: false,
            client,
        })
    }

    pub fn token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    pub fn model(mut self, model: Option<String>) -> Self {
        self.model = model;
        self
    }

    pub fn send_store_ids(mut self, yes: bool) -> Self {
        self.send_store_ids = yes;
        self
    }

    pub fn native_body(&self, req: &BackendRequest) -> Value {
        let mut body = json!({
            "role": req.role.as_str(),
            "prompt": req.prompt,
            "params": req.params,
        });
        if let Some(system) = &req.system {
            body["system"] = json!(system);
        }
        if self.send_store_ids && req.images.iter().all(|i| i.store_id.is_some()) {
            body["image_ids"] = json!(req.images.iter().map(|i| i.store_id.clone()).collect::<Vec<_>>());
        } else {
            body["images"] = json!(req.images.iter().map(|i| B64.encode(&i.bytes)).collect::<Vec<_>>());
        }
        if let Some(mask) = &req.mask {
            body["mask"] = json!(B64.encode(mask));
        }
        if let Some(model) = &self.model {
            body["model"] = json!(model);
        }
        body
    }

    pub fn chat_body(&self, req: &BackendRequest) -> Value {
        let mut messages = Vec::new();
        if let Some(system) = &req.system {
            messages.push(json!({"role": "system", "content": system}));
        }
        let mut parts: Vec<Value> = req
            .images
            .iter()
            .map(|i| {
                json!({
                    "type": "image_url",
                    "image_url": {"url": format!("data:{};base64,{}", i.media.mime(), B64.encode(&i.bytes))}
                })
            })
            .collect();
        parts.push(json!({"type": "text", "text": req.prompt}));
        messages.push(json!({"role": "user", "content": parts}));
        let mut body = json!({
            "messages": messages,
            "temperature": req.params.temperature,
        });
        if let Some(model) = &self.model {
            body["model"] = json!(model);
        }
        if let Some(max) = req.params.max_tokens {
            body["max_tokens"] = json!(max);
        }
        if let Some(seed) = req.params.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn post(&self, body: &Value) -> Result<Value, CallError> {
        let mut rb = self.client.post(&self.url).json(body);
        if let Some(token) = &self.token {
            rb = rb.bearer_auth(token);
        }
        let resp = rb
            .send()
            .map_err(|e| CallError::Transient(format!("transport: {e}")))?;
        let status = resp.status();
        if status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS {
            return Err(CallError::Transient(format!("http {status}")));
        }
        if !status.is_success() {
            return Err(CallError::Protocol(format!("http {status}")));
        }
        resp.json::<Value>()
            .map_err(|e| CallError::Protocol(format!("reply is not json: {e}")))
    }
}

/// Parse a native-profile reply body.
pub fn parse_native_reply(value: Value) -> Result<RawReply, CallError> {
    let reply: NativeReply = serde_json::from_value(value)
        .map_err(|e| CallError::Protocol(format!("malformed reply: {e}")))?;
    let image = reply
        .image
        .map(|b| B64.decode(b.as_bytes()))
        .transpose()
        .map_err(|e| CallError::Protocol(format!("bad base64 image: {e}")))?;
    Ok(RawReply {
        text: reply.text,
        image,
    })
}

/// Extract the assistant text from a chat-completions reply.
pub fn parse_chat_reply(value: &Value) -> Result<RawReply, CallError> {
    let content = value
        .pointer("/choices/0/message/content")
        .ok_or_else(|| CallError::Protocol("reply has no choices[0].message.content".into()))?;
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        _ => return Err(CallError::Protocol("unexpected content type".into())),
    };
    Ok(RawReply::text(text))
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn call(&self, req: &BackendRequest) -> Result<RawReply, CallError> {
        match self.profile {
            WireProfile::Native => parse_native_reply(self.post(&self.native_body(req))?),
            WireProfile::Chat => parse_chat_reply(&self.post(&self.chat_body(req))?),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BackendRole, ImageInput};
    use crate::model::MediaType;

    fn backend(profile: WireProfile) -> HttpBackend {
        HttpBackend::new("h", "http://127.0.0.1:9", profile, Duration::from_millis(50)).unwrap()
    }

    #[test]
    fn native_body_is_base64_exact() {
        let req = BackendRequest::new(BackendRole::Inpainter, "fill")
            .image(ImageInput {
                bytes: vec![0, 1, 2, 255],
                media: MediaType::Png,
                store_id: Some("abc".into()),
            })
            .mask(vec![9, 9]);
        let body = backend(WireProfile::Native).native_body(&req);
        assert_eq!(body["role"], "inpainter");
        assert_eq!(body["images"][0], "AAEC/w==");
        assert_eq!(body["mask"], "CQk=");
        assert_eq!(body["params"]["temperature"], 0.01);
        let by_id = backend(WireProfile::Native).send_store_ids(true).native_body(&req);
        assert_eq!(by_id["image_ids"][0], "abc");
        assert!(by_id.get("images").is_none());
    }

    #[test]
    fn chat_body_has_image_parts() {
        let req = BackendRequest::new(BackendRole::Subject, "What is it?")
            .system("Answer from the images.")
            .image(ImageInput {
                bytes: vec![1, 2, 3],
                media: MediaType::Jpeg,
                store_id: None,
            });
        let body = backend(WireProfile::Chat).model(Some("m".into())).chat_body(&req);
        assert_eq!(body["model"], "m");
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"][0]["image_url"]["url"], "data:image/jpeg;base64,AQID");
        assert_eq!(body["messages"][1]["content"][1]["text"], "What is it?");
    }

    #[test]
    fn reply_parsing() {
        let r = parse_native_reply(json!({"image": "AAEC/w=="})).unwrap();
        assert_eq!(r.image, Some(vec![0, 1, 2, 255]));
        assert!(parse_native_reply(json!({"image": "%%%"})).is_err());
        let r = parse_chat_reply(&json!({"choices": [{"message": {"content": "No."}}]})).unwrap();
        assert_eq!(r.text.as_deref(), Some("No."));
        let r = parse_chat_reply(&json!({"choices": [{"message": {"content": [{"type":"text","text":"a"},{"type":"text","text":"b"}]}}]})).unwrap();
        assert_eq!(r.text.as_deref(), Some("ab"));
        assert!(parse_chat_reply(&json!({})).is_err());
    }

    #[test]
    fn unreachable_endpoint_is_transient() {
        let err = backend(WireProfile::Native)
            .call(&BackendRequest::new(BackendRole::Judge, "q"))
            .unwrap_err();
        assert!(matches!(err, CallError::Transient(_)));
    }
}
