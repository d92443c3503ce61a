//! Mock endpoints and the planted-cue fixture shared by integration tests.
//!
//! The mock chat model answers the two generation prompts with a fixed cue
//! list, every filter question with the answer that keeps the cue (except
//! that `DISTRACTOR_FAILING` fails detectability), and every image question
//! with "Yes" with probability 0.95 when the image carries the planted tag
//! and 0.60 otherwise. Draws are a hash of (mock seed, image hash, prompt),
//! so a rerun sees identical answers. The mock detector scores the planted
//! cue 0.95 on tagged images and 0.02 elsewhere; every other cue gets a
//! hash-derived score in [0, 0.9).

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use base64::Engine;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use spurlens_core::lemma::lemmatize;
use spurlens_core::proposal::{FilterKind, PromptVariant};
use spurlens_core::rng::Stream;

pub const TARGET: &str = "widget";
pub const PLANTED: &str = "lanyard";
pub const DISTRACTOR_FAILING: &str = "spoon";
pub const OTHER_CLASS: &str = "gadget";
pub const P_TAGGED: f64 = 0.95;
pub const P_UNTAGGED: f64 = 0.60;
pub const PLANTED_GAP: f64 = P_TAGGED - P_UNTAGGED;

pub const OBJECTS: [&str; 16] = [
    "lanyard", "spoon", "bicycle", "umbrella", "kettle", "backpack", "bottle", "lamp", "clock", "pillow", "basket",
    "ladder", "bucket", "scarf", "guitar", "candle",
];
pub const BACKGROUNDS: [&str; 16] = [
    "beach", "forest", "kitchen", "garage", "meadow", "office", "desert", "river", "street", "library", "stadium",
    "bakery", "harbor", "orchard", "tunnel", "rooftop",
];

fn hash_unit(parts: &[&[u8]]) -> f64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap()) as f64 / 2f64.powi(64)
}

#[derive(Default)]
pub struct Counters {
    pub chat: AtomicUsize,
    pub detect: AtomicUsize,
    pub embed: AtomicUsize,
    pub unexpected: AtomicUsize,
}

impl Counters {
    pub fn total(&self) -> usize {
        self.chat.load(Ordering::SeqCst) + self.detect.load(Ordering::SeqCst) + self.embed.load(Ordering::SeqCst)
    }
}

/// Behaviour switches the tests flip at runtime.
#[derive(Default)]
pub struct Faults {
    /// Image hashes for which the detector reports an out-of-range score.
    pub bad_score_images: BTreeSet<String>,
    /// Remaining chat requests to fail with HTTP 500.
    pub chat_500s: usize,
}

pub struct MockState {
    pub seed: u64,
    /// sha256 hex of image bytes -> tagged
    pub tagged: HashMap<String, bool>,
    canned: HashMap<String, String>,
    pub counters: Counters,
    pub faults: Mutex<Faults>,
}

impl MockState {
    pub fn new(seed: u64, tagged: HashMap<String, bool>) -> Self {
        let mut canned = HashMap::new();
        canned.insert(PromptVariant::Objects.prompt(16, TARGET), numbered(&OBJECTS));
        canned.insert(PromptVariant::Background.prompt(16, TARGET), numbered(&BACKGROUNDS));
        for raw in OBJECTS.iter().chain(&BACKGROUNDS) {
            let feature = lemmatize(raw);
            for f in FilterKind::ALL {
                let mut yes = f.desired_yes();
                if *raw == DISTRACTOR_FAILING && f == FilterKind::Detectability {
                    yes = !yes;
                }
                canned.insert(f.prompt(&feature, TARGET), if yes { "Yes." } else { "No." }.to_string());
            }
        }
        MockState { seed, tagged, canned, counters: Counters::default(), faults: Mutex::new(Faults::default()) }
    }

    fn chat(&self, body: &Value) -> (u16, Value) {
        self.counters.chat.fetch_add(1, Ordering::SeqCst);
        {
            let mut f = self.faults.lock().unwrap();
            if f.chat_500s > 0 {
                f.chat_500s -= 1;
                return (500, json!({"error": "injected"}));
            }
        }
        let messages = body["messages"].as_array().cloned().unwrap_or_default();
        let mut image_hash = None;
        let mut last_text = String::new();
        for m in &messages {
            if m["role"] != "user" {
                continue;
            }
            match &m["content"] {
                Value::String(s) => last_text = s.clone(),
                Value::Array(parts) => {
                    for p in parts {
                        if p["type"] == "text" {
                            last_text = p["text"].as_str().unwrap_or_default().to_string();
                        } else if let Some(url) = p["image_url"]["url"].as_str() {
                            let b64 = url.split_once(',').map_or(url, |(_, b)| b);
                            let bytes = base64::engine::general_purpose::STANDARD.decode(b64).unwrap();
                            image_hash = Some(hex::encode(Sha256::digest(&bytes)));
                        }
                    }
                }
                _ => {}
            }
        }
        let content = match image_hash {
            Some(h) => {
                let p = if self.tagged.get(&h).copied().unwrap_or(false) { P_TAGGED } else { P_UNTAGGED };
                let u = hash_unit(&[&self.seed.to_le_bytes(), h.as_bytes(), last_text.as_bytes()]);
                if u < p { "Yes, it is." } else { "No." }.to_string()
            }
            None => match self.canned.get(&last_text) {
                Some(c) => c.clone(),
                None => {
                    self.counters.unexpected.fetch_add(1, Ordering::SeqCst);
                    "No.".to_string()
                }
            },
        };
        (200, json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]}))
    }

    fn detect(&self, body: &Value) -> (u16, Value) {
        self.counters.detect.fetch_add(1, Ordering::SeqCst);
        let Some(b64) = body["image_b64"].as_str() else { return (400, json!({"error": "no image"})) };
        let Ok(bytes) = base64::engine::general_purpose::STANDARD.decode(b64) else {
            return (400, json!({"error": "bad base64"}));
        };
        let h = hex::encode(Sha256::digest(&bytes));
        let queries: Vec<String> = body["queries"].as_array().map_or_else(Vec::new, |q| {
            q.iter().filter_map(|v| v.as_str().map(str::to_string)).collect()
        });
        if queries.is_empty() {
            return (400, json!({"error": "empty query list"}));
        }
        let bad = self.faults.lock().unwrap().bad_score_images.contains(&h);
        let tagged = self.tagged.get(&h).copied().unwrap_or(false);
        let detections: Vec<Value> = queries
            .iter()
            .map(|q| {
                let score = if bad {
                    1.2
                } else if q == PLANTED {
                    if tagged { 0.95 } else { 0.02 }
                } else {
                    0.9 * hash_unit(&[h.as_bytes(), q.as_bytes()])
                };
                json!({"box": [0.1, 0.1, 0.5, 0.5], "label": q, "score": score})
            })
            .collect();
        (200, json!({"detections": detections}))
    }

    fn embed(&self, body: &Value) -> (u16, Value) {
        self.counters.embed.fetch_add(1, Ordering::SeqCst);
        let vec_for = |seed: &[u8], shift: f64| -> Vec<f64> {
            (0..4u8).map(|i| hash_unit(&[seed, &[i]]) + if i == 0 { shift } else { 0.0 }).collect()
        };
        if let Some(texts) = body["input"].as_array() {
            let v: Vec<Vec<f64>> = texts.iter().map(|t| vec_for(t.as_str().unwrap_or_default().as_bytes(), 0.0)).collect();
            return (200, json!({"embeddings": v}));
        }
        if let Some(images) = body["images"].as_array() {
            let v: Vec<Vec<f64>> = images
                .iter()
                .map(|b| {
                    let bytes = base64::engine::general_purpose::STANDARD.decode(b.as_str().unwrap_or_default()).unwrap();
                    let h = hex::encode(Sha256::digest(&bytes));
                    let shift = if self.tagged.get(&h).copied().unwrap_or(false) { 2.0 } else { 0.0 };
                    vec_for(h.as_bytes(), shift)
                })
                .collect();
            return if body["pooled"] == true {
                (200, json!({"embeddings": v}))
            } else {
                (200, json!({"patch_embeddings": v.into_iter().map(|x| vec![x.clone(), x]).collect::<Vec<_>>()}))
            };
        }
        (400, json!({"error": "unsupported"}))
    }
}

fn numbered(items: &[&str]) -> String {
    items.iter().enumerate().map(|(i, s)| format!("{}. {s}. It often appears nearby.\n", i + 1)).collect()
}

pub struct MockServer {
    pub state: Arc<MockState>,
    server: Arc<tiny_http::Server>,
    workers: Vec<std::thread::JoinHandle<()>>,
    pub base_url: String,
}

impl MockServer {
    pub fn start(state: Arc<MockState>) -> Self {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").unwrap());
        let port = server.server_addr().to_ip().unwrap().port();
        let workers = (0..8)
            .map(|_| {
                let (server, state) = (server.clone(), state.clone());
                std::thread::spawn(move || {
                    for mut req in server.incoming_requests() {
                        let mut text = String::new();
                        req.as_reader().read_to_string(&mut text).unwrap();
                        let body: Value = serde_json::from_str(&text).unwrap_or(Value::Null);
                        let url = req.url().to_string();
                        let (status, reply) = if url.ends_with("/chat/completions") {
                            state.chat(&body)
                        } else if url.ends_with("/detect") {
                            state.detect(&body)
                        } else if url.ends_with("/embed") {
                            state.embed(&body)
                        } else {
                            (404, json!({"error": "no route"}))
                        };
                        let resp = tiny_http::Response::from_string(reply.to_string()).with_status_code(status);
                        let _ = req.respond(resp);
                    }
                })
            })
            .collect();
        MockServer { state, server, workers, base_url: format!("http://127.0.0.1:{port}/v1") }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

/// Planted-cue dataset on disk.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub manifest: PathBuf,
    /// image id -> tagged
    pub tagged_ids: BTreeMap<String, bool>,
    /// sha256 hex -> tagged
    pub tagged_hashes: HashMap<String, bool>,
}

fn tiny_png(i: usize) -> Vec<u8> {
    let mut img = image::RgbImage::new(4, 4);
    for (j, p) in img.pixels_mut().enumerate() {
        let v = (i * 16 + j) as u32;
        *p = image::Rgb([(v & 0xff) as u8, ((v >> 8) & 0xff) as u8, (j * 13) as u8]);
    }
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png).unwrap();
    out
}

impl Fixture {
    /// `n` distinct images of the target; a seeded half carries the tag.
    pub fn planted(n: usize, seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        let ids: Vec<String> = (0..n).map(|i| format!("images/img_{i:04}.png")).collect();
        let tagged: BTreeSet<String> = Stream::for_purpose(seed, "fixture/tags").sample(&ids, n / 2).into_iter().collect();
        let mut manifest = String::from("# planted-cue fixture\n");
        let (mut tagged_ids, mut tagged_hashes) = (BTreeMap::new(), HashMap::new());
        for (i, id) in ids.iter().enumerate() {
            let bytes = tiny_png(i);
            std::fs::write(dir.path().join(id), &bytes).unwrap();
            manifest.push_str(&format!("{id}\t{TARGET}\n"));
            let t = tagged.contains(id);
            tagged_ids.insert(id.clone(), t);
            tagged_hashes.insert(hex::encode(Sha256::digest(&bytes)), t);
        }
        let path = dir.path().join("annotations.tsv");
        std::fs::write(&path, manifest).unwrap();
        Fixture { dir, manifest: path, tagged_ids, tagged_hashes }
    }

    /// Appends `m` untagged images of another class, for commands that need
    /// negatives of the target.
    pub fn with_negatives(self, m: usize) -> Self {
        let mut manifest = std::fs::read_to_string(&self.manifest).unwrap();
        let first = self.tagged_ids.len();
        for i in first..first + m {
            let id = format!("images/neg_{i:04}.png");
            std::fs::write(self.path().join(&id), tiny_png(i)).unwrap();
            manifest.push_str(&format!("{id}\t{OTHER_CLASS}\n"));
        }
        std::fs::write(&self.manifest, manifest).unwrap();
        self
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    /// Config JSON for this fixture against `base_url`.
    pub fn config(&self, base_url: &str, out: &Path, cache: &Path) -> Value {
        json!({
            "dataset": {"path": self.manifest, "format": "simple_manifest", "name": "planted"},
            "endpoints": {
                "chat": {"base_url": base_url, "model": "mock-chat"},
                "detect": {"base_url": base_url, "model": "mock-detector"},
                "embed": {"base_url": base_url, "model": "mock-embed"}
            },
            "k": 50,
            "seed": 0,
            "max_inflight": 8,
            "out_dir": out,
            "cache_dir": cache,
            "retry": {"attempts": 2, "initial_backoff_ms": 1}
        })
    }

    pub fn write_config(&self, base_url: &str, out: &Path, cache: &Path) -> PathBuf {
        let p = self.path().join("config.json");
        std::fs::write(&p, serde_json::to_string_pretty(&self.config(base_url, out, cache)).unwrap()).unwrap();
        p
    }
}
