//! Append-only event storage.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;

use crate::error::ServiceError;
use crate::session::EventRecord;

pub trait EventStore: Send + Sync {
    /// Durably appends one event to a trial's log.
    fn append(&self, trial_id: &str, record: &EventRecord) -> Result<(), ServiceError>;

    /// Every trial's log, in event order.
    fn load_all(&self) -> Result<Vec<(String, Vec<EventRecord>)>, ServiceError>;
}

/// One JSON Lines file per trial, synced after every append.
#[derive(Debug)]
pub struct FileStore {
    dir: PathBuf,
    lock: Mutex<()>,
}

impl FileStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)
            .map_err(|e| ServiceError::Storage(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir,
            lock: Mutex::new(()),
        })
    }

    pub fn path_for(&self, trial_id: &str) -> PathBuf {
        self.dir.join(format!("{trial_id}.jsonl"))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

fn storage(path: &Path, e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Storage(format!("{}: {e}", path.display()))
}

/// Parses a JSON Lines event log.
pub fn read_log(path: &Path) -> Result<Vec<EventRecord>, ServiceError> {
    let file = fs::File::open(path).map_err(|e| storage(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| storage(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| ServiceError::Corrupt(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

impl EventStore for FileStore {
    fn append(&self, trial_id: &str, record: &EventRecord) -> Result<(), ServiceError> {
        let path = self.path_for(trial_id);
        let mut line = serde_json::to_string(record).map_err(|e| storage(&path, e))?;
        line.push('\n');
        let _guard = self.lock.lock();
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| storage(&path, e))?;
        file.write_all(line.as_bytes()).map_err(|e| storage(&path, e))?;
        file.sync_data().map_err(|e| storage(&path, e))
    }

    fn load_all(&self) -> Result<Vec<(String, Vec<EventRecord>)>, ServiceError> {
        let mut paths: Vec<PathBuf> = fs::read_dir(&self.dir)
            .map_err(|e| storage(&self.dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        paths
            .into_iter()
            .map(|p| {
                let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                read_log(&p).map(|events| (id, events))
            })
            .collect()
    }
}

/// Volatile store for tests and throwaway servers.
#[derive(Debug, Default)]
pub struct MemoryStore {
    logs: Mutex<BTreeMap<String, Vec<EventRecord>>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn log(&self, trial_id: &str) -> Vec<EventRecord> {
        self.logs.lock().get(trial_id).cloned().unwrap_or_default()
    }
}

impl EventStore for MemoryStore {
    fn append(&self, trial_id: &str, record: &EventRecord) -> Result<(), ServiceError> {
        self.logs
            .lock()
            .entry(trial_id.to_string())
            .or_default()
            .push(record.clone());
        Ok(())
    }

    fn load_all(&self) -> Result<Vec<(String, Vec<EventRecord>)>, ServiceError> {
        Ok(self
            .logs
            .lock()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect())
    }
}
