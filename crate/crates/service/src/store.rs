use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::Serialize;

use crate::clock::{Clock, Ids};
use crate::config::TrialConfig;
use crate::error::ApiError;
use crate::session::{Event, ExportDoc, RecordReply, ResponseRequest, Session, SessionStatus};

const DEFAULT_SNAPSHOT_EVERY: usize = 20;

struct Slot {
    /// Held for the whole of a mutation; guards the log file.
    writer: Mutex<Option<File>>,
    /// Published immutable state for readers.
    current: RwLock<Arc<Session>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionSummary {
    pub id: String,
    pub status: SessionStatus,
    pub n: usize,
    pub policy: String,
}

/// All sessions, optionally persisted under a data directory.
pub struct Store {
    dir: Option<PathBuf>,
    clock: Arc<dyn Clock>,
    ids: Arc<dyn Ids>,
    snapshot_every: usize,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
}

impl Store {
    /// A store without persistence.
    pub fn in_memory(clock: Arc<dyn Clock>, ids: Arc<dyn Ids>) -> Self {
        Store {
            dir: None,
            clock,
            ids,
            snapshot_every: DEFAULT_SNAPSHOT_EVERY,
            sessions: RwLock::new(HashMap::new()),
        }
    }

    /// Opens `dir`, creating it if needed, and replays every stored session.
    pub fn open(dir: impl Into<PathBuf>, clock: Arc<dyn Clock>, ids: Arc<dyn Ids>) -> Result<Self, ApiError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let store = Store {
            dir: Some(dir.clone()),
            ..Store::in_memory(clock, ids)
        };
        let mut names: Vec<String> = Vec::new();
        for entry in fs::read_dir(&dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            let id = name
                .strip_suffix(".jsonl")
                .or_else(|| name.strip_suffix(".snapshot.json"));
            if let Some(id) = id {
                if !names.iter().any(|n| n == id) {
                    names.push(id.to_string());
                }
            }
        }
        names.sort();
        for id in names {
            let session = store.recover(&id)?;
            let file = store.open_log(&id)?;
            store.insert(session, file);
        }
        Ok(store)
    }

    pub fn with_snapshot_every(mut self, every: usize) -> Self {
        self.snapshot_every = every.max(1);
        self
    }

    fn log_path(&self, id: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{id}.jsonl")))
    }

    fn snapshot_path(&self, id: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{id}.snapshot.json")))
    }

    fn open_log(&self, id: &str) -> Result<Option<File>, ApiError> {
        match self.log_path(id) {
            Some(p) => Ok(Some(OpenOptions::new().append(true).open(p)?)),
            None => Ok(None),
        }
    }

    /// Rebuilds one session from its log, falling back to the snapshot when
    /// the log is missing or shorter.
    fn recover(&self, id: &str) -> Result<Session, ApiError> {
        let log_path = self.log_path(id).expect("persistent store");
        let snap_path = self.snapshot_path(id).expect("persistent store");
        let from_log = if log_path.exists() { Some(read_log(&log_path)?) } else { None };
        let from_snap = if snap_path.exists() {
            let doc: ExportDoc = serde_json::from_slice(&fs::read(&snap_path)?)
                .map_err(|e| ApiError::internal(format!("{}: {e}", snap_path.display())))?;
            Some(doc)
        } else {
            None
        };
        let doc = match (from_log, from_snap) {
            (Some(log), Some(snap)) => {
                if snap.events.len() > log.events.len() && snap.events.starts_with(&log.events) {
                    snap
                } else if log.events.starts_with(&snap.events) {
                    log
                } else {
                    return Err(ApiError::internal(format!("log and snapshot of `{id}` disagree")));
                }
            }
            (Some(log), None) => log,
            (None, Some(snap)) => snap,
            (None, None) => return Err(ApiError::not_found(id)),
        };
        let session = Session::from_export(doc)?;
        // Rewrite the log so it holds exactly the recovered events.
        write_atomic(&log_path, log_text(&session).as_bytes())?;
        Ok(session)
    }

    fn insert(&self, session: Session, file: Option<File>) {
        let slot = Slot {
            writer: Mutex::new(file),
            current: RwLock::new(Arc::new(session)),
        };
        let id = slot.current.read().id().to_string();
        self.sessions.write().insert(id, Arc::new(slot));
    }

    fn slot(&self, id: &str) -> Result<Arc<Slot>, ApiError> {
        self.sessions.read().get(id).cloned().ok_or_else(|| ApiError::not_found(id))
    }

    fn persist_new(&self, session: &Session) -> Result<Option<File>, ApiError> {
        let Some(path) = self.log_path(session.id()) else {
            return Ok(None);
        };
        write_atomic(&path, log_text(session).as_bytes())?;
        self.write_snapshot(session)?;
        self.open_log(session.id())
    }

    fn write_snapshot(&self, session: &Session) -> Result<(), ApiError> {
        if let Some(p) = self.snapshot_path(session.id()) {
            let body = serde_json::to_vec_pretty(&session.export()).map_err(|e| ApiError::internal(e.to_string()))?;
            write_atomic(&p, &body)?;
        }
        Ok(())
    }

    /// Creates a session and returns it.
    pub fn create(&self, mut config: TrialConfig) -> Result<Arc<Session>, ApiError> {
        if config.seed.is_none() {
            config.seed = Some(self.ids.new_seed());
        }
        let id = self.ids.new_id();
        let session = Session::create(id.clone(), self.clock.now(), config)?;
        let mut sessions = self.sessions.write();
        if sessions.contains_key(&id) {
            return Err(ApiError::internal(format!("id `{id}` already in use")));
        }
        let file = self.persist_new(&session)?;
        let session = Arc::new(session);
        sessions.insert(
            id,
            Arc::new(Slot {
                writer: Mutex::new(file),
                current: RwLock::new(session.clone()),
            }),
        );
        Ok(session)
    }

    /// Recreates an exported session under its original id.
    pub fn import(&self, doc: ExportDoc) -> Result<Arc<Session>, ApiError> {
        validate_id(&doc.id)?;
        let session = Session::from_export(doc)?;
        let mut sessions = self.sessions.write();
        if sessions.contains_key(session.id()) {
            return Err(ApiError::conflict("already_exists", format!("trial `{}` already exists", session.id())));
        }
        let file = self.persist_new(&session)?;
        let session = Arc::new(session);
        sessions.insert(
            session.id().to_string(),
            Arc::new(Slot {
                writer: Mutex::new(file),
                current: RwLock::new(session.clone()),
            }),
        );
        Ok(session)
    }

    /// Current immutable state of a session.
    pub fn get(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        Ok(self.slot(id)?.current.read().clone())
    }

    pub fn list(&self) -> Vec<SessionSummary> {
        let mut v: Vec<SessionSummary> = self
            .sessions
            .read()
            .values()
            .map(|slot| {
                let s = slot.current.read().clone();
                SessionSummary {
                    id: s.id().to_string(),
                    status: s.status(),
                    n: s.engine().n(),
                    policy: s.engine().policy().label(),
                }
            })
            .collect();
        v.sort_by(|a, b| a.id.cmp(&b.id));
        v
    }

    /// Records one response. The event is on disk before this returns.
    pub fn record(&self, id: &str, req: &ResponseRequest) -> Result<RecordReply, ApiError> {
        let slot = self.slot(id)?;
        let mut file = slot.writer.lock();
        let mut next = Session::clone(&slot.current.read());
        let event = next.prepare(req, self.clock.now())?;
        let decision = next.apply(event.clone())?;
        if let Some(f) = file.as_mut() {
            append_event(f, &event)?;
            let n = next.engine().n();
            if n % self.snapshot_every == 0 || next.status() == SessionStatus::Completed {
                self.write_snapshot(&next)?;
            }
        }
        let reply = next.reply(decision);
        *slot.current.write() = Arc::new(next);
        Ok(reply)
    }
}

fn validate_id(id: &str) -> Result<(), ApiError> {
    let ok = !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(ApiError::bad_request("ids use 1-64 letters, digits, `-` or `_`").with_field("id"))
    }
}

fn log_text(session: &Session) -> String {
    let mut out = String::new();
    for ev in std::iter::once(&session.created_event()).chain(session.events()) {
        out.push_str(&serde_json::to_string(ev).expect("events serialize"));
        out.push('\n');
    }
    out
}

fn append_event(f: &mut File, ev: &Event) -> Result<(), ApiError> {
    let mut line = serde_json::to_string(ev).map_err(|e| ApiError::internal(e.to_string()))?;
    line.push('\n');
    f.write_all(line.as_bytes())?;
    f.sync_data()?;
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ApiError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent() {
        // Persist the rename itself.
        File::open(dir)?.sync_all()?;
    }
    Ok(())
}

/// Reads a log; a torn final line (no trailing newline) is dropped.
fn read_log(path: &Path) -> Result<ExportDoc, ApiError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    let mut header = None;
    let mut line = String::new();
    let mut lineno = 0;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        lineno += 1;
        if !line.ends_with('\n') {
            break;
        }
        let ev: Event = serde_json::from_str(line.trim_end())
            .map_err(|e| ApiError::internal(format!("{}:{lineno}: {e}", path.display())))?;
        match ev {
            Event::Created { id, created_at, config } if header.is_none() => header = Some((id, created_at, config)),
            Event::Created { .. } => {
                return Err(ApiError::internal(format!("{}:{lineno}: repeated creation event", path.display())))
            }
            other if header.is_some() => events.push(other),
            _ => return Err(ApiError::internal(format!("{}: missing creation event", path.display()))),
        }
    }
    let (id, created_at, config) =
        header.ok_or_else(|| ApiError::internal(format!("{}: empty log", path.display())))?;
    Ok(ExportDoc {
        format: crate::session::EXPORT_FORMAT.into(),
        version: crate::session::EXPORT_VERSION,
        id,
        created_at,
        config,
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_filename_safe() {
        assert!(validate_id("trial-1_a").is_ok());
        for bad in ["", "../x", "a b", "a/b", &"x".repeat(65)] {
            assert!(validate_id(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn torn_tail_is_ignored_but_corruption_is_not() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        fs::write(&p, "{\"type\":\"cre").unwrap();
        assert!(read_log(&p).is_err());
        fs::write(&p, "garbage\n").unwrap();
        assert!(read_log(&p).is_err());
    }
}
