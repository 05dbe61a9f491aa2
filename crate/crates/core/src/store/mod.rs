//! Append-only twin repository.
//!
//! Layout of a store directory:
//!
//! * `twins.log`: one JSON record per line, each a serialized twin plus
//!   `version` and `schema_version` keys. Only newline-terminated lines count.
//! * `twins.idx`: a header line `{schema_version, log_len}` followed by one
//!   `{id, offsets}` line per twin. Rewritten periodically; a stale index is
//!   extended by scanning the log past `log_len`.
//! * `audit.log`: one JSON line per write.
//! * `LOCK`: held exclusively by the single writer.

pub mod query;

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::matcher::natural_cmp;
use crate::model::{validate_twin, CensoredDuration, DigitalTwin, ResponseRecord, TreatmentEvent, ValidationReport};
use crate::parse;
pub use query::{Predicate, QueryError};

pub const SCHEMA_VERSION: &str = "1";
const LOG: &str = "twins.log";
const INDEX: &str = "twins.idx";
const AUDIT: &str = "audit.log";
const LOCK: &str = "LOCK";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store at {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("twin `{0}` not found")]
    NotFound(String),
    #[error("twin failed validation: {}", .0.errors().map(|f| format!("{}: {}", f.field, f.message)).collect::<Vec<_>>().join("; "))]
    Invalid(ValidationReport),
    #[error("field `{0}` cannot be changed by an outcome update")]
    ImmutableField(String),
    #[error("bad outcome update: {0}")]
    BadUpdate(String),
    #[error("corrupt record at byte {offset}: {message}")]
    Corrupt { offset: u64, message: String },
    #[error("record schema {found} does not match store schema {expected}; migration required")]
    SchemaMismatch { found: String, expected: String },
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreHandle {
    pub path: PathBuf,
    pub count: usize,
    pub schema_version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PutReceipt {
    pub id: String,
    pub version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionedTwin {
    pub version: u32,
    pub twin: DigitalTwin,
}

#[derive(Debug, Clone)]
struct Entry {
    latest: Arc<DigitalTwin>,
    offsets: Vec<u64>,
}

/// An immutable view of the store at one point in the log.
#[derive(Debug, Clone, Default)]
pub struct Snapshot {
    entries: BTreeMap<String, Entry>,
    log_len: u64,
}

impl Snapshot {
    pub fn count(&self) -> usize {
        self.entries.len()
    }

    pub fn log_len(&self) -> u64 {
        self.log_len
    }

    pub fn get(&self, id: &str) -> Option<&DigitalTwin> {
        self.entries.get(id).map(|e| e.latest.as_ref())
    }

    pub fn version(&self, id: &str) -> Option<u32> {
        self.entries.get(id).map(|e| e.offsets.len() as u32)
    }

    /// Latest versions in natural id order.
    pub fn all(&self) -> Vec<&DigitalTwin> {
        let mut v: Vec<&DigitalTwin> = self.entries.values().map(|e| e.latest.as_ref()).collect();
        v.sort_by(|a, b| natural_cmp(&a.id, &b.id));
        v
    }

    pub fn twins(&self) -> Vec<DigitalTwin> {
        self.all().into_iter().cloned().collect()
    }

    pub fn filter(&self, predicate: &Predicate) -> Vec<DigitalTwin> {
        self.all()
            .into_iter()
            .filter(|t| predicate.matches(t))
            .cloned()
            .collect()
    }

    pub fn query(&self, src: &str) -> Result<Vec<DigitalTwin>> {
        Ok(self.filter(&Predicate::parse(src)?))
    }

    fn record(&mut self, twin: DigitalTwin, offset: u64) -> u32 {
        let id = twin.id.clone();
        let entry = self.entries.entry(id).or_insert_with(|| Entry {
            latest: Arc::new(twin.clone()),
            offsets: Vec::new(),
        });
        entry.latest = Arc::new(twin);
        entry.offsets.push(offset);
        entry.offsets.len() as u32
    }
}

fn encode(twin: &DigitalTwin, version: u32) -> String {
    let mut obj = match serde_json::to_value(twin).expect("twin serialization is infallible") {
        Value::Object(m) => m,
        _ => unreachable!("twins serialize as objects"),
    };
    obj.insert("version".into(), Value::from(version));
    obj.insert("schema_version".into(), Value::from(SCHEMA_VERSION));
    let mut line = serde_json::to_string(&Value::Object(obj)).expect("value serialization is infallible");
    line.push('\n');
    line
}

fn decode(line: &[u8], offset: u64) -> Result<(DigitalTwin, u32)> {
    let corrupt = |message: String| StoreError::Corrupt { offset, message };
    let mut obj: Map<String, Value> = serde_json::from_slice(line).map_err(|e| corrupt(e.to_string()))?;
    let version = obj
        .remove("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| corrupt("missing version".into()))? as u32;
    match obj.remove("schema_version") {
        Some(Value::String(s)) if s == SCHEMA_VERSION => {}
        Some(other) => {
            return Err(StoreError::SchemaMismatch {
                found: other.as_str().unwrap_or("?").to_string(),
                expected: SCHEMA_VERSION.into(),
            })
        }
        None => return Err(corrupt("missing schema_version".into())),
    }
    let twin = serde_json::from_value(Value::Object(obj)).map_err(|e| corrupt(e.to_string()))?;
    Ok((twin, version))
}

/// Appends every complete line of `bytes` (which starts at log offset
/// `base`) to the snapshot and returns the offset after the last one.
fn scan(snap: &mut Snapshot, bytes: &[u8], base: u64) -> Result<u64> {
    let mut pos = 0usize;
    while let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') {
        let line = &bytes[pos..pos + nl];
        let offset = base + pos as u64;
        if !line.iter().all(u8::is_ascii_whitespace) {
            let (twin, version) = decode(line, offset)?;
            let expected = snap.version(&twin.id).unwrap_or(0) + 1;
            if version != expected {
                return Err(StoreError::Corrupt {
                    offset,
                    message: format!("version {version} of `{}` follows version {}", twin.id, expected - 1),
                });
            }
            snap.record(twin, offset);
        }
        pos += nl + 1;
    }
    Ok(base + pos as u64)
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexHeader {
    schema_version: String,
    log_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexLine {
    id: String,
    offsets: Vec<u64>,
}

fn read_line_at(file: &mut File, offset: u64) -> std::io::Result<Vec<u8>> {
    file.seek(SeekFrom::Start(offset))?;
    let mut buf = Vec::new();
    BufReader::new(file).read_until(b'\n', &mut buf)?;
    if buf.last() == Some(&b'\n') {
        buf.pop();
    }
    Ok(buf)
}

/// Loads latest versions through the index; `None` means the index is
/// unusable and a full scan is needed.
fn load_from_index(dir: &Path, log: &mut File, log_size: u64) -> Option<Snapshot> {
    let text = std::fs::read_to_string(dir.join(INDEX)).ok()?;
    let mut lines = text.lines();
    let header: IndexHeader = serde_json::from_str(lines.next()?).ok()?;
    if header.schema_version != SCHEMA_VERSION || header.log_len > log_size {
        return None;
    }
    if header.log_len > 0 {
        let mut last = [0u8];
        log.seek(SeekFrom::Start(header.log_len - 1)).ok()?;
        log.read_exact(&mut last).ok()?;
        if last[0] != b'\n' {
            return None;
        }
    }
    let mut snap = Snapshot {
        log_len: header.log_len,
        ..Default::default()
    };
    for line in lines {
        let entry: IndexLine = serde_json::from_str(line).ok()?;
        let last = *entry.offsets.last()?;
        if entry.offsets.iter().any(|o| *o >= header.log_len) {
            return None;
        }
        let (twin, version) = decode(&read_line_at(log, last).ok()?, last).ok()?;
        if twin.id != entry.id || version as usize != entry.offsets.len() {
            return None;
        }
        snap.entries.insert(
            entry.id,
            Entry {
                latest: Arc::new(twin),
                offsets: entry.offsets,
            },
        );
    }
    Some(snap)
}

/// Reads the store directory into a snapshot. Returns the snapshot and the
/// physical log size, which exceeds `log_len` when the tail is torn.
fn load(dir: &Path) -> Result<(Snapshot, u64)> {
    let path = dir.join(LOG);
    let mut log = match File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Snapshot::default(), 0)),
        Err(e) => return Err(e.into()),
    };
    let size = log.metadata()?.len();
    let mut snap = load_from_index(dir, &mut log, size).unwrap_or_default();
    log.seek(SeekFrom::Start(snap.log_len))?;
    let mut rest = Vec::new();
    log.read_to_end(&mut rest)?;
    let base = snap.log_len;
    snap.log_len = scan(&mut snap, &rest, base)?;
    Ok((snap, size))
}

pub fn read_snapshot(dir: impl AsRef<Path>) -> Result<Snapshot> {
    Ok(load(dir.as_ref())?.0)
}

#[derive(Debug, Clone)]
pub struct StoreOptions {
    /// Rewrite the index after this many writes.
    pub index_every: usize,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions { index_every: 64 }
    }
}

struct Writer {
    log: File,
    audit: File,
    _lock: File,
    since_index: usize,
}

/// The single-writer handle. Readers take snapshots and never block writes
/// for longer than a pointer swap.
pub struct TwinStore {
    dir: PathBuf,
    opts: StoreOptions,
    writer: Mutex<Writer>,
    current: RwLock<Arc<Snapshot>>,
}

impl std::fmt::Debug for TwinStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TwinStore")
            .field("dir", &self.dir)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Serialize)]
struct AuditEntry<'a> {
    ts: String,
    action: &'a str,
    id: &'a str,
    version: u32,
    #[serde(skip_serializing_if = "<[_]>::is_empty")]
    fields: &'a [&'a str],
}

impl TwinStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        Self::open_with(dir, StoreOptions::default())
    }

    pub fn open_with(dir: impl AsRef<Path>, opts: StoreOptions) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(dir.join(LOCK))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(std::fs::TryLockError::WouldBlock) => return Err(StoreError::Locked(dir)),
            Err(std::fs::TryLockError::Error(e)) => return Err(e.into()),
        }
        let (snap, size) = load(&dir)?;
        let log = OpenOptions::new().create(true).append(true).open(dir.join(LOG))?;
        if size > snap.log_len {
            log::warn!("discarding {} torn bytes at end of {}", size - snap.log_len, LOG);
            log.set_len(snap.log_len)?;
            log.sync_all()?;
        }
        let audit = OpenOptions::new().create(true).append(true).open(dir.join(AUDIT))?;
        let store = TwinStore {
            dir,
            opts,
            writer: Mutex::new(Writer {
                log,
                audit,
                _lock: lock,
                since_index: 0,
            }),
            current: RwLock::new(Arc::new(snap)),
        };
        store.flush_index()?;
        Ok(store)
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.current.read().expect("snapshot lock poisoned").clone()
    }

    pub fn handle(&self) -> StoreHandle {
        StoreHandle {
            path: self.dir.clone(),
            count: self.count(),
            schema_version: SCHEMA_VERSION.into(),
        }
    }

    pub fn count(&self) -> usize {
        self.snapshot().count()
    }

    pub fn get(&self, id: &str) -> Result<DigitalTwin> {
        self.snapshot()
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(id.into()))
    }

    pub fn query(&self, src: &str) -> Result<Vec<DigitalTwin>> {
        self.snapshot().query(src)
    }

    /// Every stored version of a twin, oldest first.
    pub fn history(&self, id: &str) -> Result<Vec<VersionedTwin>> {
        let snap = self.snapshot();
        let entry = snap.entries.get(id).ok_or_else(|| StoreError::NotFound(id.into()))?;
        let mut log = File::open(self.dir.join(LOG))?;
        entry
            .offsets
            .iter()
            .map(|&off| {
                let (twin, version) = decode(&read_line_at(&mut log, off)?, off)?;
                Ok(VersionedTwin { version, twin })
            })
            .collect()
    }

    /// Validates and appends a twin. An existing id gets a new version.
    pub fn put(&self, twin: DigitalTwin) -> Result<PutReceipt> {
        let report = validate_twin(&twin);
        if !report.is_admissible() {
            return Err(StoreError::Invalid(report));
        }
        self.append(twin, "put", &[])
    }

    pub fn put_all(&self, twins: impl IntoIterator<Item = DigitalTwin>) -> Result<Vec<PutReceipt>> {
        twins.into_iter().map(|t| self.put(t)).collect()
    }

    /// Appends a new version carrying updated outcome fields.
    pub fn record_outcome(&self, id: &str, update: &OutcomeUpdate) -> Result<PutReceipt> {
        let fields = update.fields();
        if fields.is_empty() {
            return Err(StoreError::BadUpdate("no fields to update".into()));
        }
        let mut twin = self.get(id)?;
        update.apply(&mut twin);
        let report = validate_twin(&twin);
        if !report.is_admissible() {
            return Err(StoreError::Invalid(report));
        }
        self.append(twin, "record_outcome", &fields)
    }

    fn append(&self, twin: DigitalTwin, action: &str, fields: &[&str]) -> Result<PutReceipt> {
        let mut w = self.writer.lock().expect("writer lock poisoned");
        let mut snap = (*self.snapshot()).clone();
        let version = snap.version(&twin.id).unwrap_or(0) + 1;
        let line = encode(&twin, version);
        let offset = snap.log_len;
        if let Err(e) = w.log.write_all(line.as_bytes()).and_then(|_| w.log.sync_data()) {
            // roll back a partial line so later appends stay aligned
            let _ = w.log.set_len(offset);
            return Err(e.into());
        }
        snap.log_len = offset + line.len() as u64;
        let id = twin.id.clone();
        snap.record(twin, offset);

        let entry = AuditEntry {
            ts: chrono::Utc::now().to_rfc3339(),
            action,
            id: &id,
            version,
            fields,
        };
        let mut audit_line = serde_json::to_string(&entry).expect("audit serialization is infallible");
        audit_line.push('\n');
        w.audit.write_all(audit_line.as_bytes())?;

        *self.current.write().expect("snapshot lock poisoned") = Arc::new(snap);
        w.since_index += 1;
        if w.since_index >= self.opts.index_every {
            w.since_index = 0;
            drop(w);
            self.flush_index()?;
        }
        Ok(PutReceipt { id, version })
    }

    /// Rewrites the index to cover the whole log.
    pub fn flush_index(&self) -> Result<()> {
        let snap = self.snapshot();
        let mut out = serde_json::to_string(&IndexHeader {
            schema_version: SCHEMA_VERSION.into(),
            log_len: snap.log_len,
        })
        .expect("header serialization is infallible");
        out.push('\n');
        for (id, e) in &snap.entries {
            out.push_str(
                &serde_json::to_string(&IndexLine {
                    id: id.clone(),
                    offsets: e.offsets.clone(),
                })
                .expect("index serialization is infallible"),
            );
            out.push('\n');
        }
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        tmp.write_all(out.as_bytes())?;
        tmp.as_file().sync_data()?;
        tmp.persist(self.dir.join(INDEX)).map_err(|e| e.error)?;
        Ok(())
    }
}

impl Drop for TwinStore {
    fn drop(&mut self) {
        if let Err(e) = self.flush_index() {
            log::warn!("could not write index on close: {e}");
        }
    }
}

/// Outcome fields that may change after a twin is stored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutcomeUpdate {
    #[serde(rename = "PFS", default, skip_serializing_if = "Option::is_none")]
    pub pfs: Option<CensoredDuration>,
    #[serde(rename = "OS", default, skip_serializing_if = "Option::is_none")]
    pub os: Option<CensoredDuration>,
    #[serde(
        rename = "study treatment response",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub study_response: Option<ResponseRecord>,
    #[serde(rename = "previous treatments", default, skip_serializing_if = "Option::is_none")]
    pub previous_treatments: Option<Vec<TreatmentEvent>>,
}

impl OutcomeUpdate {
    pub fn fields(&self) -> Vec<&'static str> {
        let mut f = Vec::new();
        if self.pfs.is_some() {
            f.push("PFS");
        }
        if self.os.is_some() {
            f.push("OS");
        }
        if self.study_response.is_some() {
            f.push("study treatment response");
        }
        if self.previous_treatments.is_some() {
            f.push("previous treatments");
        }
        f
    }

    pub fn apply(&self, twin: &mut DigitalTwin) {
        if let Some(v) = &self.pfs {
            twin.pfs = v.clone();
        }
        if let Some(v) = &self.os {
            twin.os = v.clone();
        }
        if let Some(v) = &self.study_response {
            twin.study_response = v.clone();
        }
        if let Some(v) = &self.previous_treatments {
            twin.previous_treatments = v.clone();
        }
    }

    /// Accepts schema or snake-case keys; string values go through the
    /// domain parsers, objects are taken as structured values.
    pub fn from_json(value: &Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| StoreError::BadUpdate("expected an object".into()))?;
        let mut u = OutcomeUpdate::default();
        for (k, v) in obj {
            let bad = |e: String| StoreError::BadUpdate(format!("{k}: {e}"));
            match k.as_str() {
                "PFS" | "pfs" | "OS" | "os" => {
                    let d = match v {
                        Value::String(s) => {
                            let o = parse::parse_duration(s);
                            o.value
                                .ok_or_else(|| bad(o.note.unwrap_or_else(|| "unparseable duration".into())))?
                        }
                        other => serde_json::from_value(other.clone()).map_err(|e| bad(e.to_string()))?,
                    };
                    if k.eq_ignore_ascii_case("pfs") {
                        u.pfs = Some(d);
                    } else {
                        u.os = Some(d);
                    }
                }
                "study treatment response" | "study_response" => {
                    u.study_response = Some(match v {
                        Value::String(s) => {
                            let o = parse::parse_response(s);
                            o.value
                                .ok_or_else(|| bad(o.note.unwrap_or_else(|| "unparseable response".into())))?
                        }
                        other => serde_json::from_value(other.clone()).map_err(|e| bad(e.to_string()))?,
                    });
                }
                "previous treatments" | "previous_treatments" => {
                    u.previous_treatments = Some(match v {
                        Value::String(s) => {
                            let o = parse::parse_treatments(s);
                            o.value
                                .ok_or_else(|| bad(o.note.unwrap_or_else(|| "unparseable treatments".into())))?
                        }
                        other => serde_json::from_value(other.clone()).map_err(|e| bad(e.to_string()))?,
                    });
                }
                other => return Err(StoreError::ImmutableField(other.to_string())),
            }
        }
        Ok(u)
    }
}

/// Reads twins from a JSON-lines file.
pub fn read_twins_jsonl(path: &Path) -> Result<Vec<DigitalTwin>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in BufReader::new(file).lines() {
        let line = line?;
        let len = line.len() as u64 + 1;
        if !line.trim().is_empty() {
            out.push(DigitalTwin::from_json(&line).map_err(|e| StoreError::Corrupt {
                offset,
                message: e.to_string(),
            })?);
        }
        offset += len;
    }
    Ok(out)
}

/// Groups ids by how many versions they have; useful for audits.
pub fn version_histogram(snap: &Snapshot) -> HashMap<u32, usize> {
    let mut h = HashMap::new();
    for e in snap.entries.values() {
        *h.entry(e.offsets.len() as u32).or_insert(0) += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Source;

    fn twin(id: &str) -> DigitalTwin {
        let mut t = DigitalTwin::new(id, Source::Institutional, "doc");
        t.diagnosis = "UCS".into();
        t
    }

    #[test]
    fn put_get_supersede() {
        let dir = tempfile::tempdir().unwrap();
        let store = TwinStore::open(dir.path()).unwrap();
        assert_eq!(store.put(twin("a")).unwrap().version, 1);
        let mut v2 = twin("a");
        v2.gender = Some("female".into());
        assert_eq!(store.put(v2.clone()).unwrap().version, 2);
        assert_eq!(store.count(), 1);
        assert_eq!(store.get("a").unwrap(), v2);
        assert_eq!(store.history("a").unwrap().len(), 2);
        assert!(matches!(store.get("zzz"), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn invalid_twin_rejected_without_write() {
        let dir = tempfile::tempdir().unwrap();
        let store = TwinStore::open(dir.path()).unwrap();
        let before = store.snapshot().log_len();
        assert!(matches!(store.put(twin("")), Err(StoreError::Invalid(_))));
        assert_eq!(store.snapshot().log_len(), before);
    }

    #[test]
    fn second_writer_is_locked_out() {
        let dir = tempfile::tempdir().unwrap();
        let _a = TwinStore::open(dir.path()).unwrap();
        assert!(matches!(TwinStore::open(dir.path()), Err(StoreError::Locked(_))));
    }

    #[test]
    fn reopen_uses_and_extends_index() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = TwinStore::open_with(dir.path(), StoreOptions { index_every: 2 }).unwrap();
            for i in 0..5 {
                store.put(twin(&format!("t{i}"))).unwrap();
            }
            store.put(twin("t0")).unwrap();
        }
        let store = TwinStore::open(dir.path()).unwrap();
        assert_eq!(store.count(), 5);
        assert_eq!(store.snapshot().version("t0"), Some(2));
    }

    #[test]
    fn outcome_update_rules() {
        let dir = tempfile::tempdir().unwrap();
        let store = TwinStore::open(dir.path()).unwrap();
        store.put(twin("a")).unwrap();
        let u = OutcomeUpdate::from_json(&serde_json::json!({"PFS": ">30 (ongoing)"})).unwrap();
        assert_eq!(store.record_outcome("a", &u).unwrap().version, 2);
        let got = store.get("a").unwrap();
        assert_eq!(got.pfs.months, Some(30.0));
        assert!(got.pfs.censored);
        assert!(matches!(
            OutcomeUpdate::from_json(&serde_json::json!({"diagnosis": "x"})),
            Err(StoreError::ImmutableField(f)) if f == "diagnosis"
        ));
        assert!(matches!(store.record_outcome("nope", &u), Err(StoreError::NotFound(_))));
        let audit = std::fs::read_to_string(dir.path().join(AUDIT)).unwrap();
        assert_eq!(audit.lines().count(), 2);
        assert!(audit.lines().last().unwrap().contains("record_outcome"));
    }
}
