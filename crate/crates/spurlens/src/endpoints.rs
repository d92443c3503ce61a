//! Chat, detection and embedding endpoints: request types, wire formats and
//! blocking HTTP clients with retry.
//!
//! Wire formats:
//!
//! * chat: `POST {base}/chat/completions`, OpenAI-compatible; the reply is
//!   `choices[0].message.content`.
//! * detect: `POST {base}/detect` with `{image_b64, queries}`, answered by
//!   `{detections: [{box, label, score}]}`.
//! * embed: `POST {base}/embed` with `{input: [text]}` answered by
//!   `{embeddings}`, or `{images: [b64], pooled}` answered by `{embeddings}`
//!   when pooled and `{patch_embeddings}` (one list of patch vectors per
//!   image) otherwise.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use spurlens_core::dataset::ContentHash;
use spurlens_core::detection::DetectionOutput;
use url::Url;

use crate::error::{Error, Result};
use crate::loader::sha256;

/// Image bytes as stored on disk; never re-encoded before sending.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePayload {
    pub bytes: Arc<Vec<u8>>,
    pub mime: &'static str,
    pub hash: ContentHash,
}

impl ImagePayload {
    pub fn new(bytes: Vec<u8>) -> Self {
        let mime = image::guess_format(&bytes).map_or("application/octet-stream", |f| f.to_mime_type());
        let hash = sha256(&bytes);
        ImagePayload { bytes: Arc::new(bytes), mime, hash }
    }

    pub fn base64(&self) -> String {
        B64.encode(self.bytes.as_slice())
    }

    pub fn data_url(&self) -> String {
        format!("data:{};base64,{}", self.mime, self.base64())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Part {
    Text(String),
    Image(ImagePayload),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub role: Role,
    pub content: Vec<Part>,
}

impl Message {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Message { role, content: vec![Part::Text(text.into())] }
    }

    /// A user turn carrying the prompt followed by the image.
    pub fn with_image(text: impl Into<String>, image: ImagePayload) -> Self {
        Message { role: Role::User, content: vec![Part::Text(text.into()), Part::Image(image)] }
    }

    fn to_json(&self, image: &dyn Fn(&ImagePayload) -> Value) -> Value {
        let content = match self.content.as_slice() {
            [Part::Text(t)] => Value::String(t.clone()),
            parts => Value::Array(
                parts
                    .iter()
                    .map(|p| match p {
                        Part::Text(t) => json!({"type": "text", "text": t}),
                        Part::Image(img) => json!({"type": "image_url", "image_url": image(img)}),
                    })
                    .collect(),
            ),
        };
        json!({"role": self.role, "content": content})
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl ChatRequest {
    /// Deterministic decoding: temperature 0 and a fixed seed.
    pub fn new(model: &str, messages: Vec<Message>, seed: u64) -> Self {
        ChatRequest { model: model.to_string(), messages, temperature: 0.0, seed: Some(seed) }
    }

    fn to_json(&self, image: &dyn Fn(&ImagePayload) -> Value) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": self.messages.iter().map(|m| m.to_json(image)).collect::<Vec<_>>(),
            "temperature": self.temperature,
        });
        if let Some(seed) = self.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    pub fn wire_json(&self) -> Value {
        self.to_json(&|img| json!({"url": img.data_url()}))
    }

    /// Wire shape with every image replaced by its content hash.
    pub fn canonical_json(&self) -> Value {
        self.to_json(&|img| json!({"sha256": img.hash.to_hex()}))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectRequest {
    pub image: ImagePayload,
    pub queries: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EmbedRequest {
    Texts(Vec<String>),
    Images { images: Vec<ImagePayload>, pooled: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedResponse {
    Vectors(Vec<Vec<f64>>),
    Patches(Vec<Vec<Vec<f64>>>),
}

pub trait ChatEndpoint: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<String>;
}

pub trait DetectEndpoint: Send + Sync {
    fn detect(&self, request: &DetectRequest) -> Result<DetectionOutput>;
}

pub trait EmbedEndpoint: Send + Sync {
    fn embed(&self, request: &EmbedRequest) -> Result<EmbedResponse>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 3, initial_backoff_ms: 1000 }
    }
}

/// JSON-over-HTTP transport shared by the three endpoint clients.
pub struct HttpClient {
    agent: ureq::Agent,
    base: Url,
    api_key: Option<String>,
    retry: RetryPolicy,
    calls: AtomicU64,
}

enum Attempt {
    Retry(String),
    Fatal(Error),
}

impl HttpClient {
    pub fn new(base: Url, api_key: Option<String>, retry: RetryPolicy) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(600)))
            .build()
            .into();
        HttpClient { agent, base, api_key, retry, calls: AtomicU64::new(0) }
    }

    /// Requests sent over the network, counting retries.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.base.as_str().trim_end_matches('/'))
    }

    pub fn post_json(&self, endpoint: &str, path: &str, body: &Value) -> Result<Value> {
        let url = self.url(path);
        let attempts = self.retry.attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let wait = self.retry.initial_backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                log::debug!("{endpoint}: retry {attempt} in {wait} ms after: {last}");
                thread::sleep(Duration::from_millis(wait));
            }
            match self.try_once(endpoint, &url, body) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(m)) => last = m,
            }
        }
        Err(Error::Transport { endpoint: endpoint.to_string(), attempts, message: last })
    }

    fn try_once(&self, endpoint: &str, url: &str, body: &Value) -> std::result::Result<Value, Attempt> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut req = self.agent.post(url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| Attempt::Retry(e.to_string()))?;
        match status {
            200..=299 => serde_json::from_str(&text).map_err(|e| {
                Attempt::Fatal(Error::Protocol { endpoint: endpoint.into(), message: format!("invalid JSON: {e}") })
            }),
            429 | 500..=599 => Err(Attempt::Retry(format!("HTTP {status}: {}", snippet(&text)))),
            _ => Err(Attempt::Fatal(Error::Protocol {
                endpoint: endpoint.into(),
                message: format!("HTTP {status}: {}", snippet(&text)),
            })),
        }
    }
}

fn snippet(text: &str) -> &str {
    let end = text.char_indices().nth(300).map_or(text.len(), |(i, _)| i);
    &text[..end]
}

pub struct HttpChat(pub HttpClient);

impl ChatEndpoint for HttpChat {
    fn chat(&self, request: &ChatRequest) -> Result<String> {
        let v = self.0.post_json("chat", "chat/completions", &request.wire_json())?;
        parse_chat_reply(&v)
    }
}

/// `choices[0].message.content`, as a string or a list of text parts.
pub fn parse_chat_reply(v: &Value) -> Result<String> {
    let content = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| Error::Protocol { endpoint: "chat".into(), message: "missing choices[0].message.content".into() })?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts.iter().filter_map(|p| p.get("text").and_then(Value::as_str)).collect()),
        Value::Null => Ok(String::new()),
        other => Err(Error::Protocol { endpoint: "chat".into(), message: format!("unexpected content {other}") }),
    }
}

pub struct HttpDetect(pub HttpClient);

pub fn detect_body(request: &DetectRequest) -> Value {
    json!({"image_b64": request.image.base64(), "queries": request.queries})
}

/// Parse and validate a `/detect` reply.
pub fn parse_detect_reply(v: Value) -> Result<DetectionOutput> {
    let out: DetectionOutput = serde_json::from_value(v)
        .map_err(|e| Error::Protocol { endpoint: "detect".into(), message: format!("malformed reply: {e}") })?;
    out.validate().map_err(|message| Error::Protocol { endpoint: "detect".into(), message })?;
    Ok(out)
}

impl DetectEndpoint for HttpDetect {
    fn detect(&self, request: &DetectRequest) -> Result<DetectionOutput> {
        parse_detect_reply(self.0.post_json("detect", "detect", &detect_body(request))?)
    }
}

pub struct HttpEmbed(pub HttpClient);

pub fn embed_body(request: &EmbedRequest) -> Value {
    match request {
        EmbedRequest::Texts(t) => json!({"input": t}),
        EmbedRequest::Images { images, pooled } => {
            json!({"images": images.iter().map(ImagePayload::base64).collect::<Vec<_>>(), "pooled": pooled})
        }
    }
}

/// Parse an `/embed` reply, checking the count and a common dimension.
pub fn parse_embed_reply(request: &EmbedRequest, v: Value) -> Result<EmbedResponse> {
    let bad = |message: String| Error::Protocol { endpoint: "embed".into(), message };
    let n = match request {
        EmbedRequest::Texts(t) => t.len(),
        EmbedRequest::Images { images, .. } => images.len(),
    };
    let patches = matches!(request, EmbedRequest::Images { pooled: false, .. });
    let field = if patches { "patch_embeddings" } else { "embeddings" };
    let raw = v.get(field).cloned().ok_or_else(|| bad(format!("missing `{field}`")))?;
    let resp = if patches {
        EmbedResponse::Patches(serde_json::from_value(raw).map_err(|e| bad(e.to_string()))?)
    } else {
        EmbedResponse::Vectors(serde_json::from_value(raw).map_err(|e| bad(e.to_string()))?)
    };
    let vectors: Vec<&Vec<f64>> = match &resp {
        EmbedResponse::Vectors(v) => {
            if v.len() != n {
                return Err(bad(format!("expected {n} vectors, got {}", v.len())));
            }
            v.iter().collect()
        }
        EmbedResponse::Patches(p) => {
            if p.len() != n {
                return Err(bad(format!("expected {n} patch lists, got {}", p.len())));
            }
            if p.iter().any(Vec::is_empty) {
                return Err(bad("image with no patch embeddings".into()));
            }
            p.iter().flatten().collect()
        }
    };
    if let Some(first) = vectors.first() {
        let dim = first.len();
        if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
            return Err(bad("embedding dimensions differ".into()));
        }
        if vectors.iter().flat_map(|v| v.iter()).any(|x| !x.is_finite()) {
            return Err(bad("non-finite embedding value".into()));
        }
    }
    Ok(resp)
}

impl EmbedEndpoint for HttpEmbed {
    fn embed(&self, request: &EmbedRequest) -> Result<EmbedResponse> {
        parse_embed_reply(request, self.0.post_json("embed", "embed", &embed_body(request))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn png() -> Vec<u8> {
        let mut out = Vec::new();
        image::RgbImage::new(2, 2)
            .write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
            .unwrap();
        out
    }

    #[test]
    fn chat_wire_shape() {
        let img = ImagePayload::new(png());
        let req = ChatRequest::new("m", vec![Message::with_image("Is there a dog?", img.clone())], 7);
        let wire = req.wire_json();
        assert_eq!(wire["model"], "m");
        assert_eq!(wire["temperature"], 0.0);
        assert_eq!(wire["seed"], 7);
        assert_eq!(wire["messages"][0]["content"][0], json!({"type": "text", "text": "Is there a dog?"}));
        let url = wire["messages"][0]["content"][1]["image_url"]["url"].as_str().unwrap();
        assert!(url.starts_with("data:image/png;base64,"));
        assert_eq!(B64.decode(&url["data:image/png;base64,".len()..]).unwrap(), *img.bytes);
        let canon = req.canonical_json();
        assert_eq!(canon["messages"][0]["content"][1]["image_url"]["sha256"], img.hash.to_hex());
    }

    #[test]
    fn identical_bytes_share_canonical_form() {
        let a = ChatRequest::new("m", vec![Message::with_image("q", ImagePayload::new(png()))], 0);
        let b = ChatRequest::new("m", vec![Message::with_image("q", ImagePayload::new(png()))], 0);
        assert_eq!(a.canonical_json(), b.canonical_json());
    }

    #[test]
    fn chat_reply_forms() {
        assert_eq!(parse_chat_reply(&json!({"choices": [{"message": {"content": "Yes."}}]})).unwrap(), "Yes.");
        let parts = json!({"choices": [{"message": {"content": [{"type": "text", "text": "No"}]}}]});
        assert_eq!(parse_chat_reply(&parts).unwrap(), "No");
        assert!(parse_chat_reply(&json!({"choices": []})).is_err());
    }

    #[test]
    fn detect_reply_validation_names_the_value() {
        let ok = json!({"detections": [{"box": [0.1, 0.1, 0.5, 0.5], "label": "road", "score": 0.8}]});
        assert_eq!(parse_detect_reply(ok).unwrap().detections.len(), 1);
        let bad = json!({"detections": [{"box": [0.1, 0.1, 0.5, 0.5], "label": "road", "score": 1.2}]});
        let err = parse_detect_reply(bad).unwrap_err().to_string();
        assert!(err.contains("1.2"), "{err}");
        let unordered = json!({"detections": [{"box": [0.6, 0.1, 0.5, 0.5], "label": "road", "score": 0.2}]});
        assert!(parse_detect_reply(unordered).is_err());
    }

    #[test]
    fn embed_reply_checks_shape() {
        let texts = EmbedRequest::Texts(vec!["a".into(), "b".into()]);
        assert_eq!(embed_body(&texts), json!({"input": ["a", "b"]}));
        let ok = parse_embed_reply(&texts, json!({"embeddings": [[1.0, 0.0], [0.0, 1.0]]})).unwrap();
        assert_eq!(ok, EmbedResponse::Vectors(vec![vec![1.0, 0.0], vec![0.0, 1.0]]));
        assert!(parse_embed_reply(&texts, json!({"embeddings": [[1.0, 0.0], [0.0]]})).is_err());
        assert!(parse_embed_reply(&texts, json!({"embeddings": [[1.0, 0.0]]})).is_err());
        let imgs = EmbedRequest::Images { images: vec![ImagePayload::new(png())], pooled: false };
        assert_eq!(embed_body(&imgs)["pooled"], false);
        let p = parse_embed_reply(&imgs, json!({"patch_embeddings": [[[1.0], [3.0]]]})).unwrap();
        assert_eq!(p, EmbedResponse::Patches(vec![vec![vec![1.0], vec![3.0]]]));
    }
}
