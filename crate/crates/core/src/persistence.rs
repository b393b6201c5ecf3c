//! Durable append-only event log (JSON Lines) and per-track state snapshots.

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use thiserror::Error;

use crate::events::{ArenaEvent, EventBody, EventKind, RegistrationPayload, VotePayload};
use crate::track::TrackId;

/// Longest batch window accepted for [`SyncPolicy::Batched`].
pub const MAX_BATCH_WINDOW: Duration = Duration::from_millis(5);

#[derive(Debug, Error)]
pub enum LogError {
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("log corrupted at position {position}: {message}")]
    Corrupt { position: u64, message: String },
    #[error("scan start {from} is past the end of the log ({len})")]
    OutOfRange { from: u64, len: u64 },
    #[error("invalid log configuration: {0}")]
    Config(String),
    #[error("log i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// One line of the event log.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRecord {
    pub event_id: String,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track: Option<TrackId>,
    pub seq: u64,
    pub enqueued_at: DateTime<Utc>,
    pub payload: Box<RawValue>,
}

impl PartialEq for LogRecord {
    fn eq(&self, other: &Self) -> bool {
        self.event_id == other.event_id
            && self.kind == other.kind
            && self.track == other.track
            && self.seq == other.seq
            && self.enqueued_at == other.enqueued_at
            && self.payload.get() == other.payload.get()
    }
}

fn raw<T: Serialize>(value: &T) -> Box<RawValue> {
    // Serializing plain data structs into JSON cannot fail.
    serde_json::value::to_raw_value(value).expect("payload serializes")
}

impl LogRecord {
    pub fn from_event(event: &ArenaEvent) -> Self {
        let payload = match &event.body {
            EventBody::Vote(v) => raw(v),
            EventBody::Registration(r) => raw(r),
            EventBody::RegressionTick => raw(&serde_json::Map::new()),
        };
        Self {
            event_id: event.event_id.clone(),
            kind: event.kind(),
            track: event.track,
            seq: event.seq,
            enqueued_at: event.enqueued_at,
            payload,
        }
    }

    pub fn to_event(&self) -> Result<ArenaEvent, LogError> {
        let bad = |e: serde_json::Error| LogError::Malformed(format!("{}: {e}", self.event_id));
        let body = match self.kind {
            EventKind::Vote => {
                EventBody::Vote(serde_json::from_str::<VotePayload>(self.payload.get()).map_err(bad)?)
            }
            EventKind::Registration => EventBody::Registration(
                serde_json::from_str::<RegistrationPayload>(self.payload.get()).map_err(bad)?,
            ),
            EventKind::RegressionTick => EventBody::RegressionTick,
        };
        Ok(ArenaEvent {
            event_id: self.event_id.clone(),
            track: self.track,
            seq: self.seq,
            enqueued_at: self.enqueued_at,
            body,
        })
    }

    pub fn validate(&self) -> Result<(), LogError> {
        if self.event_id.is_empty() {
            return Err(LogError::Malformed("empty event_id".into()));
        }
        if self.seq == 0 {
            return Err(LogError::Malformed(format!("{}: seq starts at 1", self.event_id)));
        }
        if self.kind.is_track_scoped() != self.track.is_some() {
            return Err(LogError::Malformed(format!(
                "{}: track field does not match kind {:?}",
                self.event_id, self.kind
            )));
        }
        self.to_event().map(drop)
    }

    pub fn to_line(&self) -> Result<String, LogError> {
        self.validate()?;
        let line = serde_json::to_string(self).map_err(|e| LogError::Malformed(e.to_string()))?;
        debug_assert!(!line.contains('\n'));
        Ok(line)
    }

    pub fn from_line(line: &str) -> Result<Self, LogError> {
        let record: LogRecord =
            serde_json::from_str(line).map_err(|e| LogError::Malformed(e.to_string()))?;
        record.validate()?;
        Ok(record)
    }
}

/// Append-only storage for log records. Positions are 0-based record indices.
pub trait EventLog: Send {
    /// Makes `record` durable (per the log's sync policy) and returns its position.
    fn append(&mut self, record: &LogRecord) -> Result<u64, LogError>;

    /// Records at positions `from..len()`, in append order.
    fn scan(&self, from: u64) -> Result<Vec<LogRecord>, LogError>;

    fn len(&self) -> u64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Forces any pending batched writes to stable storage.
    fn sync(&mut self) -> Result<(), LogError> {
        Ok(())
    }
}

impl EventLog for Box<dyn EventLog> {
    fn append(&mut self, record: &LogRecord) -> Result<u64, LogError> {
        (**self).append(record)
    }
    fn scan(&self, from: u64) -> Result<Vec<LogRecord>, LogError> {
        (**self).scan(from)
    }
    fn len(&self) -> u64 {
        (**self).len()
    }
    fn sync(&mut self) -> Result<(), LogError> {
        (**self).sync()
    }
}

/// Volatile log for tests and simulations. Records still go through the
/// line encoding so both backends accept and reject the same inputs.
#[derive(Debug, Default)]
pub struct MemoryLog {
    lines: Vec<String>,
}

impl MemoryLog {
    pub fn new() -> Self {
        Self::default()
    }
}

impl EventLog for MemoryLog {
    fn append(&mut self, record: &LogRecord) -> Result<u64, LogError> {
        let line = record.to_line()?;
        self.lines.push(line);
        Ok(self.lines.len() as u64 - 1)
    }

    fn scan(&self, from: u64) -> Result<Vec<LogRecord>, LogError> {
        let len = self.len();
        if from > len {
            return Err(LogError::OutOfRange { from, len });
        }
        self.lines[from as usize..]
            .iter()
            .map(|l| LogRecord::from_line(l))
            .collect()
    }

    fn len(&self) -> u64 {
        self.lines.len() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SyncPolicy {
    /// `fsync` after every record.
    #[default]
    EveryAppend,
    /// Records reach the OS on every append but are only forced to disk
    /// once per window. A machine crash may lose up to one window of
    /// acknowledged records.
    Batched { window: Duration },
}

/// JSON Lines file log.
#[derive(Debug)]
pub struct FileLog {
    path: PathBuf,
    file: File,
    len: u64,
    policy: SyncPolicy,
    last_sync: Instant,
    dirty: bool,
}

struct Parsed {
    records: Vec<LogRecord>,
    /// Byte length of the complete-line prefix.
    valid_bytes: usize,
    torn_tail: bool,
}

fn parse_lines(bytes: &[u8], skip: u64) -> Result<Parsed, LogError> {
    let mut records = Vec::new();
    let mut offset = 0usize;
    let mut position = 0u64;
    while offset < bytes.len() {
        let Some(nl) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            return Ok(Parsed {
                records,
                valid_bytes: offset,
                torn_tail: true,
            });
        };
        let line = &bytes[offset..offset + nl];
        let corrupt = |message: String| LogError::Corrupt { position, message };
        let text = std::str::from_utf8(line).map_err(|e| corrupt(e.to_string()))?;
        let record = LogRecord::from_line(text).map_err(|e| corrupt(e.to_string()))?;
        if position >= skip {
            records.push(record);
        }
        offset += nl + 1;
        position += 1;
    }
    Ok(Parsed {
        records,
        valid_bytes: offset,
        torn_tail: false,
    })
}

impl FileLog {
    /// Opens or creates the log at `path`. A partial trailing line left by a
    /// crash is truncated; a corrupt complete line is an error.
    pub fn open(path: impl AsRef<Path>, policy: SyncPolicy) -> Result<Self, LogError> {
        if let SyncPolicy::Batched { window } = policy {
            if window > MAX_BATCH_WINDOW {
                return Err(LogError::Config(format!(
                    "batch window {window:?} exceeds {MAX_BATCH_WINDOW:?}"
                )));
            }
        }
        let path = path.as_ref().to_owned();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let parsed = parse_lines(&bytes, u64::MAX)?;
        let len = bytes[..parsed.valid_bytes]
            .iter()
            .filter(|&&b| b == b'\n')
            .count() as u64;
        if parsed.torn_tail {
            tracing::warn!(
                path = %path.display(),
                dropped_bytes = bytes.len() - parsed.valid_bytes,
                "truncating torn record at end of event log"
            );
            file.set_len(parsed.valid_bytes as u64)?;
            file.sync_all()?;
        }
        Ok(Self {
            path,
            file,
            len,
            policy,
            last_sync: Instant::now(),
            dirty: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn policy(&self) -> SyncPolicy {
        self.policy
    }
}

impl EventLog for FileLog {
    fn append(&mut self, record: &LogRecord) -> Result<u64, LogError> {
        let mut line = record.to_line()?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        match self.policy {
            SyncPolicy::EveryAppend => self.file.sync_data()?,
            SyncPolicy::Batched { window } => {
                self.dirty = true;
                if self.last_sync.elapsed() >= window {
                    self.sync()?;
                }
            }
        }
        self.len += 1;
        Ok(self.len - 1)
    }

    fn scan(&self, from: u64) -> Result<Vec<LogRecord>, LogError> {
        if from > self.len {
            return Err(LogError::OutOfRange { from, len: self.len });
        }
        let bytes = fs::read(&self.path)?;
        let parsed = parse_lines(&bytes, from)?;
        if parsed.torn_tail {
            tracing::warn!(path = %self.path.display(), "ignoring torn record at end of event log");
        }
        Ok(parsed.records)
    }

    fn len(&self) -> u64 {
        self.len
    }

    fn sync(&mut self) -> Result<(), LogError> {
        if self.dirty {
            self.file.sync_data()?;
            self.dirty = false;
        }
        self.last_sync = Instant::now();
        Ok(())
    }
}

impl Drop for FileLog {
    fn drop(&mut self) {
        if let Err(e) = self.sync() {
            tracing::warn!("final event log sync failed: {e}");
        }
    }
}

/// Per-track full-state snapshots stored as `<dir>/<track>-<seq>.json`.
#[derive(Debug, Clone)]
pub struct SnapshotStore {
    dir: PathBuf,
}

impl SnapshotStore {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, LogError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    fn file_name(track: TrackId, seq: u64) -> String {
        format!("{track}-{seq:020}.json")
    }

    pub fn save<T: Serialize>(&self, track: TrackId, seq: u64, value: &T) -> Result<PathBuf, LogError> {
        let path = self.dir.join(Self::file_name(track, seq));
        let tmp = path.with_extension("json.tmp");
        let bytes = serde_json::to_vec(value).map_err(|e| LogError::Malformed(e.to_string()))?;
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    /// Sequence numbers with a stored snapshot for `track`, ascending.
    pub fn list(&self, track: TrackId) -> Result<Vec<u64>, LogError> {
        let prefix = format!("{track}-");
        let mut seqs = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let name = entry?.file_name();
            let Some(name) = name.to_str() else { continue };
            if let Some(seq) = name
                .strip_prefix(&prefix)
                .and_then(|s| s.strip_suffix(".json"))
                .and_then(|s| s.parse::<u64>().ok())
            {
                seqs.push(seq);
            }
        }
        seqs.sort_unstable();
        Ok(seqs)
    }

    pub fn load<T: DeserializeOwned>(&self, track: TrackId, seq: u64) -> Result<T, LogError> {
        let bytes = fs::read(self.dir.join(Self::file_name(track, seq)))?;
        serde_json::from_slice(&bytes).map_err(|e| LogError::Malformed(e.to_string()))
    }

    pub fn load_latest<T: DeserializeOwned>(&self, track: TrackId) -> Result<Option<(u64, T)>, LogError> {
        match self.list(track)?.last() {
            Some(&seq) => Ok(Some((seq, self.load(track, seq)?))),
            None => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rating::Outcome;

    fn vote_record(seq: u64) -> LogRecord {
        LogRecord::from_event(&ArenaEvent {
            event_id: format!("e{seq}"),
            track: Some(TrackId::Ideation),
            seq,
            enqueued_at: "2026-01-01T00:00:00Z".parse().unwrap(),
            body: EventBody::Vote(VotePayload {
                battle_id: format!("b{seq}"),
                model_a: "x".into(),
                model_b: "y".into(),
                outcome: Outcome::WIN,
                voter_id: "u".into(),
                submitted_at: "2026-01-01T00:00:00Z".parse().unwrap(),
            }),
        })
    }

    #[test]
    fn line_format_field_order() {
        let line = vote_record(1).to_line().unwrap();
        assert!(line.starts_with(
            r#"{"event_id":"e1","kind":"vote","track":"ideation","seq":1,"enqueued_at":"2026-01-01T00:00:00Z","payload":{"#
        ), "{line}");
        let tick = LogRecord::from_event(&ArenaEvent {
            event_id: "t".into(),
            track: None,
            seq: 1,
            enqueued_at: "2026-01-01T00:00:00Z".parse().unwrap(),
            body: EventBody::RegressionTick,
        });
        assert_eq!(
            tick.to_line().unwrap(),
            r#"{"event_id":"t","kind":"regression_tick","seq":1,"enqueued_at":"2026-01-01T00:00:00Z","payload":{}}"#
        );
    }

    #[test]
    fn malformed_records_are_rejected_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = FileLog::open(dir.path().join("log.jsonl"), SyncPolicy::EveryAppend).unwrap();
        let mut r = vote_record(1);
        r.track = None;
        assert!(matches!(log.append(&r), Err(LogError::Malformed(_))));
        let mut r = vote_record(1);
        r.payload = RawValue::from_string("{\"nope\":1}".into()).unwrap();
        assert!(log.append(&r).is_err());
        assert_eq!(log.len(), 0);
        assert_eq!(fs::read(log.path()).unwrap().len(), 0);
    }

    #[test]
    fn append_and_scan() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let mut log = FileLog::open(&path, SyncPolicy::EveryAppend).unwrap();
        assert_eq!(log.append(&vote_record(1)).unwrap(), 0);
        assert_eq!(log.append(&vote_record(2)).unwrap(), 1);
        assert_eq!(log.append(&vote_record(3)).unwrap(), 2);
        let all = log.scan(0).unwrap();
        assert_eq!(all, vec![vote_record(1), vote_record(2), vote_record(3)]);
        assert_eq!(log.scan(2).unwrap(), vec![vote_record(3)]);
        assert!(log.scan(3).unwrap().is_empty());
        assert!(matches!(log.scan(4), Err(LogError::OutOfRange { .. })));
    }

    #[test]
    fn reopen_continues_positions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        {
            let mut log = FileLog::open(&path, SyncPolicy::EveryAppend).unwrap();
            log.append(&vote_record(1)).unwrap();
            log.append(&vote_record(2)).unwrap();
        }
        let mut log = FileLog::open(&path, SyncPolicy::EveryAppend).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(log.append(&vote_record(3)).unwrap(), 2);
    }

    #[test]
    fn torn_tail_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        {
            let mut log = FileLog::open(&path, SyncPolicy::EveryAppend).unwrap();
            for s in 1..=3 {
                log.append(&vote_record(s)).unwrap();
            }
        }
        let full = vote_record(4).to_line().unwrap();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(&full.as_bytes()[..full.len() / 2]).unwrap();
        drop(f);

        let mut log = FileLog::open(&path, SyncPolicy::EveryAppend).unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(log.scan(0).unwrap().len(), 3);
        assert_eq!(log.append(&vote_record(4)).unwrap(), 3);
        assert_eq!(log.scan(0).unwrap().last().unwrap(), &vote_record(4));
    }

    #[test]
    fn mid_file_corruption_names_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let mut text = String::new();
        text.push_str(&vote_record(1).to_line().unwrap());
        text.push_str("\n{not json}\n");
        text.push_str(&vote_record(3).to_line().unwrap());
        text.push('\n');
        fs::write(&path, text).unwrap();
        match FileLog::open(&path, SyncPolicy::EveryAppend) {
            Err(LogError::Corrupt { position, .. }) => assert_eq!(position, 1),
            other => panic!("expected corruption, got {other:?}"),
        }
    }

    #[test]
    fn batch_window_is_capped() {
        let dir = tempfile::tempdir().unwrap();
        let policy = SyncPolicy::Batched {
            window: Duration::from_millis(6),
        };
        assert!(matches!(
            FileLog::open(dir.path().join("l"), policy),
            Err(LogError::Config(_))
        ));
        let policy = SyncPolicy::Batched {
            window: Duration::from_millis(5),
        };
        let mut log = FileLog::open(dir.path().join("l"), policy).unwrap();
        log.append(&vote_record(1)).unwrap();
        log.sync().unwrap();
        assert_eq!(log.scan(0).unwrap().len(), 1);
    }

    #[test]
    fn snapshot_store_latest() {
        let dir = tempfile::tempdir().unwrap();
        let store = SnapshotStore::new(dir.path()).unwrap();
        assert!(store.load_latest::<u32>(TrackId::Reviewer).unwrap().is_none());
        store.save(TrackId::Reviewer, 9, &9u32).unwrap();
        store.save(TrackId::Reviewer, 12, &12u32).unwrap();
        store.save(TrackId::Ideation, 50, &50u32).unwrap();
        assert_eq!(store.list(TrackId::Reviewer).unwrap(), vec![9, 12]);
        assert_eq!(store.load_latest::<u32>(TrackId::Reviewer).unwrap(), Some((12, 12)));
    }

    #[test]
    fn memory_log_matches_file_semantics() {
        let mut log = MemoryLog::new();
        assert_eq!(log.append(&vote_record(1)).unwrap(), 0);
        let mut bad = vote_record(2);
        bad.seq = 0;
        assert!(log.append(&bad).is_err());
        assert_eq!(log.scan(0).unwrap(), vec![vote_record(1)]);
        assert!(log.scan(2).is_err());
    }
}
