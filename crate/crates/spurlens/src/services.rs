//! Endpoint access through the response cache.
//!
//! Cache keys never depend on endpoint URLs, so a run can be replayed against
//! a different host or fully offline. Chat keys cover the whole request with
//! images replaced by their hashes. Detection keys are
//! `(image hash, sorted queries, detector id)`.

use std::sync::Arc;

use serde::Serialize;
use serde_json::json;
use spurlens_core::detection::DetectionOutput;

use crate::config::{endpoint_url, RunConfig};
use crate::endpoints::{
    ChatEndpoint, ChatRequest, DetectEndpoint, DetectRequest, EmbedEndpoint, EmbedRequest, EmbedResponse, HttpChat,
    HttpClient, HttpDetect, HttpEmbed, ImagePayload, Message,
};
use crate::error::{Error, Result};
use crate::store::{canonicalize, key_of, Cache, EndpointKind};

pub struct Services {
    pub cache: Arc<Cache>,
    chat: Option<Arc<dyn ChatEndpoint>>,
    detect: Option<Arc<dyn DetectEndpoint>>,
    embed: Option<Arc<dyn EmbedEndpoint>>,
    pub chat_model: String,
    pub detector_id: String,
    pub embed_model: String,
    pub max_inflight: usize,
    /// Sent as the `seed` parameter of every chat request.
    pub chat_seed: u64,
    offline: bool,
}

/// Builder-style construction, mainly for tests with in-process endpoints.
pub struct ServicesBuilder {
    inner: Services,
}

impl ServicesBuilder {
    pub fn chat(mut self, model: &str, ep: Option<Arc<dyn ChatEndpoint>>) -> Self {
        self.inner.chat_model = model.to_string();
        self.inner.chat = ep;
        self
    }

    pub fn detect(mut self, id: &str, ep: Option<Arc<dyn DetectEndpoint>>) -> Self {
        self.inner.detector_id = id.to_string();
        self.inner.detect = ep;
        self
    }

    pub fn embed(mut self, model: &str, ep: Option<Arc<dyn EmbedEndpoint>>) -> Self {
        self.inner.embed_model = model.to_string();
        self.inner.embed = ep;
        self
    }

    pub fn max_inflight(mut self, n: usize) -> Self {
        self.inner.max_inflight = n.max(1);
        self
    }

    pub fn chat_seed(mut self, seed: u64) -> Self {
        self.inner.chat_seed = seed;
        self
    }

    pub fn offline(mut self, offline: bool) -> Self {
        self.inner.offline = offline;
        self
    }

    pub fn build(self) -> Services {
        self.inner
    }
}

#[derive(Serialize)]
struct DetectKey<'a> {
    detector: &'a str,
    image: String,
    queries: &'a [String],
}

impl Services {
    pub fn builder(cache: Arc<Cache>) -> ServicesBuilder {
        ServicesBuilder {
            inner: Services {
                cache,
                chat: None,
                detect: None,
                embed: None,
                chat_model: String::new(),
                detector_id: String::new(),
                embed_model: String::new(),
                max_inflight: 8,
                chat_seed: 0,
                offline: false,
            },
        }
    }

    /// HTTP endpoints from the configuration; none are built when offline.
    pub fn from_config(cfg: &RunConfig, offline: bool) -> Result<Self> {
        let cache = Arc::new(Cache::open(cfg.cache_dir())?);
        let mut b = Services::builder(cache).max_inflight(cfg.max_inflight).chat_seed(cfg.seed).offline(offline);
        let client = |name: &str, ep: &crate::config::EndpointConfig| -> Result<HttpClient> {
            Ok(HttpClient::new(endpoint_url(name, ep)?, ep.api_key.clone(), cfg.retry))
        };
        if let Some(ep) = &cfg.endpoints.chat {
            let live: Option<Arc<dyn ChatEndpoint>> =
                if offline { None } else { Some(Arc::new(HttpChat(client("chat", ep)?))) };
            b = b.chat(&ep.model, live);
        }
        if let Some(ep) = &cfg.endpoints.detect {
            let live: Option<Arc<dyn DetectEndpoint>> =
                if offline { None } else { Some(Arc::new(HttpDetect(client("detect", ep)?))) };
            b = b.detect(&ep.model, live);
        }
        if let Some(ep) = &cfg.endpoints.embed {
            let live: Option<Arc<dyn EmbedEndpoint>> =
                if offline { None } else { Some(Arc::new(HttpEmbed(client("embed", ep)?))) };
            b = b.embed(&ep.model, live);
        }
        Ok(b.build())
    }

    fn unavailable(&self, kind: &'static str, canonical: &[u8]) -> Error {
        if self.offline {
            Error::CacheMiss { kind, key: hex::encode(key_of(canonical)) }
        } else {
            Error::Config(format!("no {kind} endpoint configured"))
        }
    }

    pub fn chat(&self, request: &ChatRequest) -> Result<String> {
        self.chat_keyed(request).map(|(reply, _)| reply)
    }

    /// Reply plus the hex cache key it is stored under.
    pub fn chat_keyed(&self, request: &ChatRequest) -> Result<(String, String)> {
        let canonical = canonicalize(&request.canonical_json())?;
        let key = hex::encode(key_of(&canonical));
        let bytes = self.cache.get_or_call(EndpointKind::Chat, &canonical, || match &self.chat {
            Some(ep) => ep.chat(request).map(String::into_bytes),
            None => Err(self.unavailable("chat", &canonical)),
        })?;
        let reply = String::from_utf8(bytes).map_err(|_| Error::Cache("cached chat reply is not UTF-8".into()))?;
        Ok((reply, key))
    }

    /// Single-turn text-only question.
    pub fn ask(&self, prompt: &str) -> Result<String> {
        let req = ChatRequest::new(&self.chat_model, vec![Message::text(crate::endpoints::Role::User, prompt)], self.chat_seed);
        self.chat(&req)
    }

    /// One request per image carrying every query, sorted and de-duplicated.
    pub fn detect(&self, image: &ImagePayload, queries: &[String]) -> Result<DetectionOutput> {
        let mut queries = queries.to_vec();
        queries.sort();
        queries.dedup();
        let canonical = canonicalize(&DetectKey { detector: &self.detector_id, image: image.hash.to_hex(), queries: &queries })?;
        let bytes = self.cache.get_or_call(EndpointKind::Detect, &canonical, || match &self.detect {
            Some(ep) => {
                let out = ep.detect(&DetectRequest { image: image.clone(), queries: queries.clone() })?;
                out.validate().map_err(|message| Error::Protocol { endpoint: "detect".into(), message })?;
                serde_json::to_vec(&out).map_err(|e| Error::Cache(e.to_string()))
            }
            None => Err(self.unavailable("detect", &canonical)),
        })?;
        let out: DetectionOutput =
            serde_json::from_slice(&bytes).map_err(|e| Error::Cache(format!("cached detection unreadable: {e}")))?;
        out.validate().map_err(|message| Error::Protocol { endpoint: "detect".into(), message })?;
        Ok(out)
    }

    pub fn embed(&self, request: &EmbedRequest) -> Result<EmbedResponse> {
        let key = match request {
            EmbedRequest::Texts(t) => json!({"model": self.embed_model, "input": t}),
            EmbedRequest::Images { images, pooled } => json!({
                "model": self.embed_model,
                "images": images.iter().map(|i| i.hash.to_hex()).collect::<Vec<_>>(),
                "pooled": pooled,
            }),
        };
        let canonical = canonicalize(&key)?;
        let bytes = self.cache.get_or_call(EndpointKind::Embed, &canonical, || match &self.embed {
            Some(ep) => serde_json::to_vec(&ep.embed(request)?).map_err(|e| Error::Cache(e.to_string())),
            None => Err(self.unavailable("embed", &canonical)),
        })?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Cache(format!("cached embedding unreadable: {e}")))
    }

    /// Text embeddings, one vector per input.
    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        match self.embed(&EmbedRequest::Texts(texts.to_vec()))? {
            EmbedResponse::Vectors(v) => Ok(v),
            EmbedResponse::Patches(_) => Err(Error::Protocol { endpoint: "embed".into(), message: "expected vectors".into() }),
        }
    }
}
