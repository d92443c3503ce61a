//! Content-addressed response cache.
//!
//! Each endpoint kind owns two files in the cache directory:
//!
//! * `<kind>.log`: append-only records, each
//!   `"SLC1" | key[32] | created_at u64 | req_len u32 | request | resp_len u32 | response | sha256(response)[32]`
//!   with integers little-endian. `key` is the SHA-256 of the canonical request.
//! * `<kind>.idx`: fixed 48-byte entries `key[32] | offset u64 | len u64`
//!   pointing into the log, in append order.
//!
//! On open the index is loaded, any log tail it does not cover is scanned and
//! indexed, and a torn final record is truncated. Every read re-verifies both
//! digests; a corrupt record is ignored and the value refetched. The newest
//! record for a key wins.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, PoisonError, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Key = [u8; 32];

const MAGIC: &[u8; 4] = b"SLC1";
const IDX_ENTRY: usize = 48;
const HEADER: usize = 4 + 32 + 8 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointKind {
    Chat,
    Detect,
    Embed,
}

impl EndpointKind {
    pub const ALL: [EndpointKind; 3] = [EndpointKind::Chat, EndpointKind::Detect, EndpointKind::Embed];

    pub fn as_str(self) -> &'static str {
        match self {
            EndpointKind::Chat => "chat",
            EndpointKind::Detect => "detect",
            EndpointKind::Embed => "embed",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

/// Sorted object keys, shortest round-trip floats, no whitespace. Callers
/// replace image bytes by their content hash before serializing.
pub fn canonicalize<T: Serialize>(request: &T) -> Result<Vec<u8>> {
    let value = serde_json::to_value(request).map_err(|e| Error::Cache(format!("request not serializable: {e}")))?;
    serde_json::to_vec(&value).map_err(|e| Error::Cache(format!("request not serializable: {e}")))
}

pub fn key_of(canonical: &[u8]) -> Key {
    Sha256::digest(canonical).into()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEntry {
    pub kind: EndpointKind,
    pub key: Key,
    pub request_canonical: Vec<u8>,
    pub response: Vec<u8>,
    pub created_at: u64,
}

#[derive(Debug, Default)]
pub struct CacheStats {
    pub hits: AtomicU64,
    /// Number of caller invocations.
    pub misses: AtomicU64,
    pub corrupt: AtomicU64,
}

struct Writer {
    log: File,
    idx: File,
    end: u64,
}

struct KindLog {
    index: RwLock<HashMap<Key, (u64, u64)>>,
    writer: Mutex<Writer>,
    reader: Mutex<File>,
}

type Slot = Arc<Mutex<()>>;

pub struct Cache {
    dir: PathBuf,
    logs: [KindLog; 3],
    inflight: Mutex<HashMap<(EndpointKind, Key), Slot>>,
    stats: CacheStats,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(PoisonError::into_inner)
}

fn encode_record(key: &Key, created_at: u64, request: &[u8], response: &[u8]) -> Result<Vec<u8>> {
    let req_len = u32::try_from(request.len()).map_err(|_| Error::Cache("request too large".into()))?;
    let resp_len = u32::try_from(response.len()).map_err(|_| Error::Cache("response too large".into()))?;
    let mut buf = Vec::with_capacity(HEADER + request.len() + 4 + response.len() + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(key);
    buf.extend_from_slice(&created_at.to_le_bytes());
    buf.extend_from_slice(&req_len.to_le_bytes());
    buf.extend_from_slice(request);
    buf.extend_from_slice(&resp_len.to_le_bytes());
    buf.extend_from_slice(response);
    buf.extend_from_slice(&Sha256::digest(response));
    Ok(buf)
}

struct Decoded {
    key: Key,
    created_at: u64,
    request: Vec<u8>,
    response: Vec<u8>,
    response_digest: Key,
}

/// Decode the record at the start of `buf`. `Ok(None)` means the buffer ends
/// mid-record; `Err` means the bytes are not a record.
fn decode_record(buf: &[u8]) -> std::result::Result<Option<(Decoded, usize)>, &'static str> {
    if buf.len() < HEADER {
        return Ok(None);
    }
    if &buf[..4] != MAGIC {
        return Err("bad record magic");
    }
    let key: Key = buf[4..36].try_into().expect("slice of 32");
    let created_at = u64::from_le_bytes(buf[36..44].try_into().expect("slice of 8"));
    let req_len = u32::from_le_bytes(buf[44..48].try_into().expect("slice of 4")) as usize;
    let mut at = HEADER;
    if buf.len() < at + req_len + 4 {
        return Ok(None);
    }
    let request = buf[at..at + req_len].to_vec();
    at += req_len;
    let resp_len = u32::from_le_bytes(buf[at..at + 4].try_into().expect("slice of 4")) as usize;
    at += 4;
    if buf.len() < at + resp_len + 32 {
        return Ok(None);
    }
    let response = buf[at..at + resp_len].to_vec();
    at += resp_len;
    let response_digest: Key = buf[at..at + 32].try_into().expect("slice of 32");
    at += 32;
    Ok(Some((Decoded { key, created_at, request, response, response_digest }, at)))
}

impl Decoded {
    fn verify(&self) -> bool {
        key_of(&self.request) == self.key && <Key>::from(Sha256::digest(&self.response)) == self.response_digest
    }
}

impl KindLog {
    fn open(dir: &Path, kind: EndpointKind) -> Result<Self> {
        let log_path = dir.join(format!("{}.log", kind.as_str()));
        let idx_path = dir.join(format!("{}.idx", kind.as_str()));
        let open = |p: &Path| {
            OpenOptions::new().read(true).append(true).create(true).open(p).map_err(|e| Error::io(p, e))
        };
        let log = open(&log_path)?;
        let mut idx = open(&idx_path)?;
        let log_len = log.metadata().map_err(|e| Error::io(&log_path, e))?.len();

        let mut idx_bytes = Vec::new();
        idx.read_to_end(&mut idx_bytes).map_err(|e| Error::io(&idx_path, e))?;
        let mut index = HashMap::new();
        let mut end = 0u64;
        let mut valid_entries = 0usize;
        for chunk in idx_bytes.chunks_exact(IDX_ENTRY) {
            let key: Key = chunk[..32].try_into().expect("slice of 32");
            let off = u64::from_le_bytes(chunk[32..40].try_into().expect("slice of 8"));
            let len = u64::from_le_bytes(chunk[40..48].try_into().expect("slice of 8"));
            if off != end || off + len > log_len {
                break;
            }
            index.insert(key, (off, len));
            end = off + len;
            valid_entries += 1;
        }
        if valid_entries * IDX_ENTRY != idx_bytes.len() {
            log::warn!("{}: dropping {} stale index bytes", idx_path.display(), idx_bytes.len() - valid_entries * IDX_ENTRY);
            idx.set_len((valid_entries * IDX_ENTRY) as u64).map_err(|e| Error::io(&idx_path, e))?;
        }

        // index the part of the log written after the last index append
        let mut tail = Vec::new();
        let mut reader = File::open(&log_path).map_err(|e| Error::io(&log_path, e))?;
        reader.seek(SeekFrom::Start(end)).map_err(|e| Error::io(&log_path, e))?;
        reader.read_to_end(&mut tail).map_err(|e| Error::io(&log_path, e))?;
        let mut at = 0usize;
        loop {
            match decode_record(&tail[at..]) {
                Ok(Some((rec, used))) => {
                    let off = end + at as u64;
                    index.insert(rec.key, (off, used as u64));
                    idx.write_all(&idx_entry(&rec.key, off, used as u64)).map_err(|e| Error::io(&idx_path, e))?;
                    at += used;
                }
                Ok(None) if at == tail.len() => break,
                outcome => {
                    let why = if outcome.is_ok() { "torn record" } else { "unreadable record" };
                    log::warn!("{}: truncating {} bytes ({why})", log_path.display(), tail.len() - at);
                    log.set_len(end + at as u64).map_err(|e| Error::io(&log_path, e))?;
                    break;
                }
            }
        }
        let end = end + at as u64;
        Ok(KindLog { index: RwLock::new(index), writer: Mutex::new(Writer { log, idx, end }), reader: Mutex::new(reader) })
    }

    fn read(&self, off: u64, len: u64) -> std::io::Result<Vec<u8>> {
        let mut f = lock(&self.reader);
        f.seek(SeekFrom::Start(off))?;
        let mut buf = vec![0; len as usize];
        f.read_exact(&mut buf)?;
        Ok(buf)
    }
}

fn idx_entry(key: &Key, off: u64, len: u64) -> [u8; IDX_ENTRY] {
    let mut e = [0u8; IDX_ENTRY];
    e[..32].copy_from_slice(key);
    e[32..40].copy_from_slice(&off.to_le_bytes());
    e[40..].copy_from_slice(&len.to_le_bytes());
    e
}

impl Cache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let logs = [
            KindLog::open(&dir, EndpointKind::Chat)?,
            KindLog::open(&dir, EndpointKind::Detect)?,
            KindLog::open(&dir, EndpointKind::Embed)?,
        ];
        Ok(Cache { dir, logs, inflight: Mutex::new(HashMap::new()), stats: CacheStats::default() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn stats(&self) -> &CacheStats {
        &self.stats
    }

    fn log_path(&self, kind: EndpointKind) -> PathBuf {
        self.dir.join(format!("{}.log", kind.as_str()))
    }

    pub fn contains(&self, kind: EndpointKind, key: &Key) -> bool {
        self.logs[kind.slot()].index.read().unwrap_or_else(PoisonError::into_inner).contains_key(key)
    }

    /// Verified entry for `key`, or `None` when absent or corrupt.
    pub fn get(&self, kind: EndpointKind, key: &Key) -> Result<Option<CacheEntry>> {
        let log = &self.logs[kind.slot()];
        let Some((off, len)) = log.index.read().unwrap_or_else(PoisonError::into_inner).get(key).copied() else {
            return Ok(None);
        };
        let bytes = log.read(off, len).map_err(|e| Error::io(self.log_path(kind), e))?;
        match decode_record(&bytes) {
            Ok(Some((rec, _))) if rec.key == *key && rec.verify() => Ok(Some(CacheEntry {
                kind,
                key: rec.key,
                request_canonical: rec.request,
                response: rec.response,
                created_at: rec.created_at,
            })),
            _ => {
                log.index.write().unwrap_or_else(PoisonError::into_inner).remove(key);
                self.stats.corrupt.fetch_add(1, Ordering::Relaxed);
                log::warn!("{} cache entry {} failed verification; refetching", kind.as_str(), hex::encode(key));
                Ok(None)
            }
        }
    }

    /// Append a record; the write is a single `write_all` on an append-mode
    /// file, so a crash leaves at most a torn tail that the next open removes.
    pub fn put(&self, kind: EndpointKind, request_canonical: &[u8], response: &[u8]) -> Result<Key> {
        let key = key_of(request_canonical);
        let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let record = encode_record(&key, created_at, request_canonical, response)?;
        let log = &self.logs[kind.slot()];
        let mut w = lock(&log.writer);
        let off = w.end;
        let path = self.log_path(kind);
        w.log.write_all(&record).and_then(|_| w.log.flush()).map_err(|e| Error::io(&path, e))?;
        w.end += record.len() as u64;
        let entry = idx_entry(&key, off, record.len() as u64);
        w.idx.write_all(&entry).map_err(|e| Error::io(self.dir.join(format!("{}.idx", kind.as_str())), e))?;
        log.index.write().unwrap_or_else(PoisonError::into_inner).insert(key, (off, record.len() as u64));
        Ok(key)
    }

    /// Cached response for the request, invoking `caller` at most once per key
    /// across concurrent callers.
    pub fn get_or_call<F>(&self, kind: EndpointKind, request_canonical: &[u8], caller: F) -> Result<Vec<u8>>
    where
        F: FnOnce() -> Result<Vec<u8>>,
    {
        let key = key_of(request_canonical);
        if let Some(e) = self.get(kind, &key)? {
            self.stats.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(e.response);
        }
        let slot = lock(&self.inflight).entry((kind, key)).or_default().clone();
        let guard = lock(&slot);
        let outcome = match self.get(kind, &key) {
            Ok(Some(e)) => {
                self.stats.hits.fetch_add(1, Ordering::Relaxed);
                Ok(e.response)
            }
            Ok(None) => {
                self.stats.misses.fetch_add(1, Ordering::Relaxed);
                caller().and_then(|resp| self.put(kind, request_canonical, &resp).map(|_| resp))
            }
            Err(e) => Err(e),
        };
        lock(&self.inflight).remove(&(kind, key));
        drop(guard);
        outcome
    }

    /// Every verified record of a kind in log order, newest last.
    pub fn entries(&self, kind: EndpointKind) -> Result<Vec<CacheEntry>> {
        let path = self.log_path(kind);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = Vec::new();
        let mut at = 0;
        while let Ok(Some((rec, used))) = decode_record(&bytes[at..]) {
            at += used;
            if rec.verify() {
                out.push(CacheEntry {
                    kind,
                    key: rec.key,
                    request_canonical: rec.request,
                    response: rec.response,
                    created_at: rec.created_at,
                });
            }
        }
        Ok(out)
    }
}
