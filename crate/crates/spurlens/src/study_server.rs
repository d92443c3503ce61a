//! HTTP API for the human validation study.
//!
//! Routes:
//! - `GET /api/tasks/next?annotator=ID` returns the next unjudged task for
//!   that annotator, or `{"done": true, ...}` when none remain. The bucket is
//!   never exposed.
//! - `POST /api/judgments` with `{task_id, annotator_id, present}` appends a
//!   judgment; 404 for an unknown task, 409 for a repeat by the same
//!   annotator.
//! - `GET /api/metrics` returns pooled and per-annotator agreement and, where
//!   per-image rates are loaded, the human-labeled gap per target.
//! - `GET /api/image/{image_id}` returns the image bytes.
//!
//! Judgments are appended to a JSON-lines file under one writer lock; reads
//! work on an immutable snapshot swapped in after each accepted write.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, PoisonError, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use spurlens_core::gaps::{GapKind, GapMeta, GapReport, Rate};
use spurlens_core::study::{agreement, human_gap, majority_labels, Agreement, AnnotationTask, HumanJudgment, JudgmentLog};
use spurlens_core::Error as CoreError;

use crate::endpoints::ImagePayload;
use crate::error::{Error, Result};
use crate::loader::LoadedDataset;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentSubmission {
    pub task_id: String,
    pub annotator_id: String,
    pub present: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HumanGapSummary {
    pub target: String,
    pub feature: String,
    pub n_present: usize,
    pub n_absent: usize,
    pub report: Option<GapReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub n_tasks: usize,
    pub n_judgments: usize,
    /// None until both buckets have at least one judgment.
    pub pooled: Option<Agreement>,
    pub per_annotator: BTreeMap<String, Option<Agreement>>,
    pub human_gaps: Vec<HumanGapSummary>,
}

/// Settings for the human-gap part of the metrics.
#[derive(Debug, Clone, Default)]
pub struct HumanGapSettings {
    /// target -> image id -> model rate
    pub rates: BTreeMap<String, BTreeMap<String, Rate>>,
    pub k: usize,
    pub model: String,
    pub strategy: String,
    pub seed: u64,
}

pub struct StudyState {
    snapshot: RwLock<Arc<JudgmentLog>>,
    writer: Mutex<File>,
    images: Option<Arc<LoadedDataset>>,
    gap: HumanGapSettings,
}

pub struct Response {
    pub status: u16,
    pub content_type: &'static str,
    pub body: Vec<u8>,
}

impl Response {
    fn json(status: u16, v: &impl Serialize) -> Self {
        Response { status, content_type: "application/json", body: serde_json::to_vec(v).unwrap_or_default() }
    }

    fn error(status: u16, message: impl Into<String>) -> Self {
        Self::json(status, &json!({ "error": message.into() }))
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl StudyState {
    /// Opens (or creates) the judgment log and replays earlier judgments.
    pub fn open(
        tasks: Vec<AnnotationTask>,
        judgments_path: &Path,
        images: Option<Arc<LoadedDataset>>,
        gap: HumanGapSettings,
    ) -> Result<Self> {
        let mut log = JudgmentLog::new(tasks);
        if judgments_path.exists() {
            let f = File::open(judgments_path).map_err(|e| Error::io(judgments_path, e))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(judgments_path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let j: HumanJudgment = serde_json::from_str(&line).map_err(|e| Error::Field {
                    path: judgments_path.to_path_buf(),
                    field: format!("line {}", i + 1),
                    message: e.to_string(),
                })?;
                log.submit(j)?;
            }
        }
        if let Some(dir) = judgments_path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(judgments_path)
            .map_err(|e| Error::io(judgments_path, e))?;
        Ok(StudyState { snapshot: RwLock::new(Arc::new(log)), writer: Mutex::new(writer), images, gap })
    }

    pub fn snapshot(&self) -> Arc<JudgmentLog> {
        self.snapshot.read().unwrap_or_else(PoisonError::into_inner).clone()
    }

    pub fn submit(&self, s: JudgmentSubmission) -> std::result::Result<HumanJudgment, Response> {
        if s.annotator_id.trim().is_empty() {
            return Err(Response::error(400, "annotator_id must be non-empty"));
        }
        let mut file = self.writer.lock().unwrap_or_else(PoisonError::into_inner);
        let mut log = (*self.snapshot()).clone();
        let j = HumanJudgment { task_id: s.task_id, annotator_id: s.annotator_id, present: s.present, submitted_at: unix_now() };
        match log.submit(j.clone()) {
            Ok(()) => {}
            Err(e @ CoreError::UnknownTask(_)) => return Err(Response::error(404, e.to_string())),
            Err(e @ CoreError::DuplicateJudgment { .. }) => return Err(Response::error(409, e.to_string())),
            Err(e) => return Err(Response::error(400, e.to_string())),
        }
        let mut line = serde_json::to_vec(&j).unwrap_or_default();
        line.push(b'\n');
        if let Err(e) = file.write_all(&line).and_then(|_| file.flush()) {
            return Err(Response::error(500, format!("persisting judgment: {e}")));
        }
        *self.snapshot.write().unwrap_or_else(PoisonError::into_inner) = Arc::new(log);
        Ok(j)
    }

    fn task_view(&self, log: &JudgmentLog, annotator: &str) -> Value {
        let total = log.task_map().len();
        let done = log.judgments().iter().filter(|j| j.annotator_id == annotator).count();
        match log.next_task(annotator) {
            Some(t) => json!({
                "done": false,
                "task_id": t.task_id,
                "image_id": t.image_id,
                "image_url": format!("/api/image/{}", encode_path_segment(&t.image_id)),
                "target": t.target,
                "feature": t.feature,
                "progress": {"done": done, "total": total},
            }),
            None => json!({"done": true, "progress": {"done": done, "total": total}}),
        }
    }

    pub fn metrics(&self) -> Metrics {
        let log = self.snapshot();
        let tasks = log.task_map();
        let pooled = agreement(log.judgments(), tasks).ok();
        let per_annotator = log
            .annotators()
            .into_iter()
            .map(|a| {
                let mine: Vec<HumanJudgment> = log.judgments().iter().filter(|j| j.annotator_id == a).cloned().collect();
                (a.to_string(), agreement(&mine, tasks).ok())
            })
            .collect();
        Metrics {
            n_tasks: tasks.len(),
            n_judgments: log.judgments().len(),
            pooled,
            per_annotator,
            human_gaps: self.human_gaps(&log),
        }
    }

    /// Human gap per (target, feature) with K capped by the smaller label
    /// side; none while a side is empty.
    fn human_gaps(&self, log: &JudgmentLog) -> Vec<HumanGapSummary> {
        let mut groups: BTreeMap<(String, String), Vec<HumanJudgment>> = BTreeMap::new();
        for j in log.judgments() {
            if let Some(t) = log.task(&j.task_id) {
                groups.entry((t.target.clone(), t.feature.clone())).or_default().push(j.clone());
            }
        }
        let mut out = Vec::new();
        for ((target, feature), js) in groups {
            let Some(rates) = self.gap.rates.get(&target) else { continue };
            let Ok(labels) = majority_labels(&js, log.task_map()) else { continue };
            let labels: BTreeMap<String, bool> = labels.into_iter().filter(|(id, _)| rates.contains_key(id)).collect();
            let n_present = labels.values().filter(|p| **p).count();
            let n_absent = labels.len() - n_present;
            let k = self.gap.k.min(n_present).min(n_absent);
            let meta = GapMeta {
                kind: GapKind::Pa,
                model: self.gap.model.clone(),
                target: target.clone(),
                feature: feature.clone(),
                strategy: self.gap.strategy.clone(),
            };
            let report = if k == 0 { None } else { human_gap(&labels, rates, k, meta, self.gap.seed).ok() };
            out.push(HumanGapSummary { target, feature, n_present, n_absent, report });
        }
        out
    }

    fn image(&self, id: &str) -> Response {
        let Some(data) = &self.images else { return Response::error(404, "no image source configured") };
        if data.dataset.get(id).is_none() {
            return Response::error(404, format!("unknown image `{id}`"));
        }
        match data.image_bytes(id) {
            Ok(bytes) => {
                let mime = ImagePayload::new(bytes.clone()).mime;
                Response { status: 200, content_type: mime, body: bytes }
            }
            Err(e) => Response::error(500, e.to_string()),
        }
    }

    /// Route one request. `url` is the path plus optional query string.
    pub fn handle(&self, method: &str, url: &str, body: &[u8]) -> Response {
        let parsed = match url::Url::parse("http://study.local").and_then(|b| b.join(url)) {
            Ok(u) => u,
            Err(e) => return Response::error(400, format!("bad url: {e}")),
        };
        let path = parsed.path();
        match (method, path) {
            ("GET", "/api/tasks/next") => {
                let Some(annotator) = parsed.query_pairs().find(|(k, _)| k == "annotator").map(|(_, v)| v.into_owned()) else {
                    return Response::error(400, "missing `annotator` query parameter");
                };
                if annotator.trim().is_empty() {
                    return Response::error(400, "annotator must be non-empty");
                }
                Response::json(200, &self.task_view(&self.snapshot(), &annotator))
            }
            ("POST", "/api/judgments") => match serde_json::from_slice::<JudgmentSubmission>(body) {
                Ok(s) => match self.submit(s) {
                    Ok(j) => {
                        let view = self.task_view(&self.snapshot(), &j.annotator_id);
                        Response::json(201, &json!({"accepted": j, "next": view}))
                    }
                    Err(r) => r,
                },
                Err(e) => Response::error(400, format!("invalid judgment: {e}")),
            },
            ("GET", "/api/metrics") => Response::json(200, &self.metrics()),
            ("GET", p) if p.starts_with("/api/image/") => {
                let raw = &p["/api/image/".len()..];
                match decode_path_segment(raw) {
                    Some(id) => self.image(&id),
                    None => Response::error(400, "bad image id encoding"),
                }
            }
            (_, "/api/tasks/next" | "/api/judgments" | "/api/metrics") => Response::error(405, "method not allowed"),
            _ => Response::error(404, format!("no route for {method} {path}")),
        }
    }
}

fn encode_path_segment(s: &str) -> String {
    url::form_urlencoded::byte_serialize(s.as_bytes()).collect::<String>().replace('+', "%20")
}

fn decode_path_segment(s: &str) -> Option<String> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let h = std::str::from_utf8(bytes.get(i + 1..i + 3)?).ok()?;
            out.push(u8::from_str_radix(h, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}

/// A running server; dropping it does not stop the workers, call `stop`.
pub struct StudyServer {
    server: Arc<tiny_http::Server>,
    workers: Vec<std::thread::JoinHandle<()>>,
    pub addr: std::net::SocketAddr,
}

impl StudyServer {
    pub fn start(state: Arc<StudyState>, addr: &str, threads: usize) -> Result<Self> {
        let server = tiny_http::Server::http(addr).map_err(|e| Error::Config(format!("binding {addr}: {e}")))?;
        let local = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::Config(format!("{addr} is not an IP address")))?;
        let server = Arc::new(server);
        let workers = (0..threads.max(1))
            .map(|_| {
                let (server, state) = (server.clone(), state.clone());
                std::thread::spawn(move || {
                    for mut req in server.incoming_requests() {
                        let mut body = Vec::new();
                        let resp = match req.as_reader().read_to_end(&mut body) {
                            Ok(_) => state.handle(req.method().as_str(), req.url(), &body),
                            Err(e) => Response::error(400, format!("reading body: {e}")),
                        };
                        let header = tiny_http::Header::from_bytes("Content-Type", resp.content_type)
                            .expect("static header is valid");
                        let out = tiny_http::Response::from_data(resp.body).with_status_code(resp.status).with_header(header);
                        if let Err(e) = req.respond(out) {
                            log::warn!("study server: {e}");
                        }
                    }
                })
            })
            .collect();
        Ok(StudyServer { server, workers, addr: local })
    }

    pub fn stop(self) {
        self.server.unblock();
        for _ in 1..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers {
            let _ = w.join();
        }
    }

    /// Block until the workers exit.
    pub fn wait(self) {
        for w in self.workers {
            let _ = w.join();
        }
    }
}

pub fn load_tasks(path: &Path) -> Result<Vec<AnnotationTask>> {
    crate::pipeline::read_json(path)
}

pub fn default_judgments_path(tasks_path: &Path) -> PathBuf {
    tasks_path.with_file_name("judgments.jsonl")
}
