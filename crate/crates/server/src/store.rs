//! Durable event log backends.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use pubcluster_core::{parse_log, Event, ReplayError};

use crate::config::FsyncPolicy;

/// Append-only sink for command groups. An append either persists the whole
/// group or reports failure and leaves the log as it was.
pub trait EventStore: Send {
    fn append(&mut self, events: &[Event]) -> io::Result<()>;

    /// Everything appended so far, in order.
    fn load(&self) -> Result<Vec<Event>, ReplayError>;
}

pub const LOG_FILE: &str = "events.jsonl";

pub struct FileStore {
    path: PathBuf,
    file: File,
    len: u64,
    fsync: FsyncPolicy,
}

impl FileStore {
    pub fn open(dir: &Path, fsync: FsyncPolicy) -> io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOG_FILE);
        let file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)?;
        let len = file.metadata()?.len();
        Ok(Self {
            path,
            file,
            len,
            fsync,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl EventStore for FileStore {
    fn append(&mut self, events: &[Event]) -> io::Result<()> {
        let mut buf = String::new();
        for e in events {
            buf.push_str(&e.to_json_line());
            buf.push('\n');
        }
        let result = self.file.write_all(buf.as_bytes()).and_then(|()| match self.fsync {
            FsyncPolicy::Always => self.file.sync_data(),
            FsyncPolicy::Never => Ok(()),
        });
        match result {
            Ok(()) => {
                self.len += buf.len() as u64;
                Ok(())
            }
            Err(e) => {
                // drop whatever part of the group made it to disk
                let _ = self.file.set_len(self.len);
                Err(e)
            }
        }
    }

    fn load(&self) -> Result<Vec<Event>, ReplayError> {
        let text = std::fs::read_to_string(&self.path).map_err(|e| ReplayError::CorruptLog {
            seq: 0,
            reason: e.to_string(),
        })?;
        parse_log(&text)
    }
}

#[derive(Default)]
pub struct MemoryStore {
    events: Vec<Event>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl EventStore for MemoryStore {
    fn append(&mut self, events: &[Event]) -> io::Result<()> {
        self.events.extend_from_slice(events);
        Ok(())
    }

    fn load(&self) -> Result<Vec<Event>, ReplayError> {
        Ok(self.events.clone())
    }
}

/// In-memory store whose appends can be made to fail on demand; used to
/// exercise storage-failure handling.
#[derive(Default)]
pub struct FlakyStore {
    inner: MemoryStore,
    failing: Arc<AtomicBool>,
}

impl FlakyStore {
    pub fn new() -> (Self, Arc<AtomicBool>) {
        let failing = Arc::new(AtomicBool::new(false));
        (
            Self {
                inner: MemoryStore::new(),
                failing: failing.clone(),
            },
            failing,
        )
    }
}

impl EventStore for FlakyStore {
    fn append(&mut self, events: &[Event]) -> io::Result<()> {
        if self.failing.load(Ordering::SeqCst) {
            return Err(io::Error::other("injected storage failure"));
        }
        self.inner.append(events)
    }

    fn load(&self) -> Result<Vec<Event>, ReplayError> {
        self.inner.load()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use pubcluster_core::EventKind;

    fn ev(seq: u64) -> Event {
        Event {
            seq,
            tick: seq,
            kind: EventKind::TickAdvanced,
            payload: serde_json::json!({ "tick": seq }),
        }
    }

    #[test]
    fn file_store_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = FileStore::open(dir.path(), FsyncPolicy::Always).unwrap();
        store.append(&[ev(1), ev(2)]).unwrap();
        store.append(&[ev(3)]).unwrap();
        drop(store);
        let store = FileStore::open(dir.path(), FsyncPolicy::Never).unwrap();
        assert_eq!(store.load().unwrap(), vec![ev(1), ev(2), ev(3)]);
        let text = std::fs::read_to_string(store.path()).unwrap();
        assert!(text.starts_with(r#"{"seq":1,"tick":1,"kind":"TickAdvanced","payload":{"tick":1}}"#));
    }

    #[test]
    fn flaky_store_fails_on_demand() {
        let (mut store, failing) = FlakyStore::new();
        store.append(&[ev(1)]).unwrap();
        failing.store(true, Ordering::SeqCst);
        assert!(store.append(&[ev(2)]).is_err());
        assert_eq!(store.load().unwrap(), vec![ev(1)]);
    }
}
