use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{EngineError, Job};
use crate::store::{write_atomic, CellStatus};

/// Per-row state kept in a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowCheckpoint {
    pub status: CellStatus,
    pub response_hash: Option<String>,
}

/// Persisted state of one batch session. Written after every row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub job: Job,
    pub ledger_path: PathBuf,
    /// Row count of the table when the session started.
    pub table_rows: usize,
    pub completed: BTreeMap<usize, RowCheckpoint>,
    /// Run ids of every run in this session, oldest first.
    pub runs: Vec<String>,
    pub checkpoint_path: PathBuf,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl SessionState {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, EngineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| EngineError::io(path, e))?;
        let state: SessionState = serde_json::from_str(&text).map_err(|e| EngineError::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let [start, end] = state.job.row_range;
        if let Some(r) = state.completed.keys().find(|r| **r < start || **r >= end) {
            return Err(EngineError::Checkpoint {
                path: path.to_path_buf(),
                message: format!("completed row {r} outside row range [{start}, {end})"),
            });
        }
        Ok(state)
    }

    pub fn save(&mut self) -> Result<(), EngineError> {
        self.updated_at = Utc::now();
        if let Some(dir) = self.checkpoint_path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| EngineError::io(dir, e))?;
        }
        let json = serde_json::to_vec_pretty(self).expect("session state serializes");
        write_atomic(&self.checkpoint_path, &json)?;
        Ok(())
    }

    /// Rows of the range that still need a successful call.
    pub fn pending(&self) -> Vec<usize> {
        let [start, end] = self.job.row_range;
        (start..end)
            .filter(|r| !matches!(self.completed.get(r), Some(c) if c.status == CellStatus::Ok))
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        let [start, end] = self.job.row_range;
        (start..end).all(|r| self.completed.contains_key(&r))
    }
}

/// `.sessions/` directory next to `table`.
pub fn sessions_dir(table: &Path) -> PathBuf {
    table_dir(table).join(".sessions")
}

pub(crate) fn table_dir(table: &Path) -> PathBuf {
    match table.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Finds a checkpoint from either a path or a bare session id.
pub fn resolve_checkpoint(reference: &str, table: Option<&Path>) -> PathBuf {
    let as_path = PathBuf::from(reference);
    if as_path.extension().is_some_and(|e| e == "json") || as_path.components().count() > 1 {
        return as_path;
    }
    let dir = table.map(sessions_dir).unwrap_or_else(|| PathBuf::from(".sessions"));
    dir.join(format!("{reference}.json"))
}

/// Exclusive advisory lock on `<table>.lock`, released on drop.
#[derive(Debug)]
pub struct TableLock {
    _file: File,
    path: PathBuf,
}

impl TableLock {
    pub fn acquire(table: &Path) -> Result<Self, EngineError> {
        let mut name = table.file_name().unwrap_or_default().to_os_string();
        name.push(".lock");
        let path = table.with_file_name(name);
        let file = File::options()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| EngineError::io(&path, e))?;
        match file.try_lock() {
            Ok(()) => Ok(TableLock { _file: file, path }),
            Err(std::fs::TryLockError::WouldBlock) => Err(EngineError::Locked(table.to_path_buf())),
            Err(std::fs::TryLockError::Error(e)) => Err(EngineError::io(&path, e)),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
