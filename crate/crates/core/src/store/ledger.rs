use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{CellStatus, Result, StoreError};
use crate::content_hash;
use crate::provider::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input: Option<u64>,
    pub output: Option<u64>,
}

/// Outcome of one row within a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowOutcome {
    pub row_index: usize,
    /// Hash of the rendered prompt; absent for skipped rows.
    pub prompt_hash: Option<String>,
    pub response_hash: Option<String>,
    pub status: CellStatus,
    pub latency_ms: u64,
    pub token_usage: TokenUsage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One line of the ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    /// Batch session this run belongs to; resumed runs share it.
    #[serde(default)]
    pub session_id: Option<String>,
    pub timestamp: DateTime<Utc>,
    pub module: String,
    /// Model configuration; never carries key material, only the name of
    /// the environment variable that holds it.
    pub model_config: Option<ModelConfig>,
    #[serde(default)]
    pub template_name: Option<String>,
    pub template_hash: String,
    pub template_body: String,
    pub source: PathBuf,
    pub row_range: [usize; 2],
    pub output_column: String,
    pub per_row: Vec<RowOutcome>,
    /// False when the run stopped before covering its row range.
    #[serde(default = "default_true")]
    pub completed: bool,
    /// Module-specific parameters (e.g. the tabulation policy).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<serde_json::Value>,
}

fn default_true() -> bool {
    true
}

impl RunRecord {
    pub fn validate(&self) -> Result<()> {
        if content_hash(&self.template_body) != self.template_hash {
            return Err(StoreError::InvalidRecord(format!(
                "run {}: template_hash does not match template_body",
                self.run_id
            )));
        }
        let [start, end] = self.row_range;
        if start > end {
            return Err(StoreError::InvalidRecord(format!(
                "run {}: row range [{start}, {end}) is inverted",
                self.run_id
            )));
        }
        if let Some(r) = self.per_row.iter().find(|r| r.row_index < start || r.row_index >= end) {
            return Err(StoreError::InvalidRecord(format!(
                "run {}: row {} outside range [{start}, {end})",
                self.run_id, r.row_index
            )));
        }
        Ok(())
    }

    fn matches(&self, filter: &HistoryFilter) -> bool {
        if let Some(model) = &filter.model {
            let Some(cfg) = &self.model_config else {
                return false;
            };
            if &cfg.model_id != model && &cfg.selector() != model {
                return false;
            }
        }
        if let Some(col) = &filter.column {
            if &self.output_column != col {
                return false;
            }
        }
        if let Some(since) = filter.since {
            if self.timestamp < since {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, Default)]
pub struct HistoryFilter {
    /// Matches either the bare model id or `<kind>:<model_id>`.
    pub model: Option<String>,
    pub column: Option<String>,
    pub since: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LedgerWarning {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct HistoryQuery {
    /// Newest first.
    pub records: Vec<RunRecord>,
    pub warnings: Vec<LedgerWarning>,
}

/// Append-only JSONL run ledger.
#[derive(Debug, Clone)]
pub struct Ledger {
    path: PathBuf,
}

impl Ledger {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Ledger { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one record as one line. Existing bytes are never rewritten.
    pub fn append(&self, record: &RunRecord) -> Result<()> {
        record.validate()?;
        if let Some(parent) = self.path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| StoreError::io(parent, e))?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&self.path)
            .map_err(|e| StoreError::io(&self.path, e))?;

        let mut existing = String::new();
        file.read_to_string(&mut existing)
            .map_err(|e| StoreError::io(&self.path, e))?;
        if existing_run_ids(&existing).contains(record.run_id.as_str()) {
            return Err(StoreError::DuplicateRun(record.run_id.clone()));
        }

        let mut line = serde_json::to_string(record).expect("RunRecord serializes");
        line.push('\n');
        // A torn last line from a crashed writer must not swallow this record.
        if !existing.is_empty() && !existing.ends_with('\n') {
            line.insert(0, '\n');
        }
        file.seek(SeekFrom::End(0))
            .map_err(|e| StoreError::io(&self.path, e))?;
        file.write_all(line.as_bytes())
            .map_err(|e| StoreError::io(&self.path, e))?;
        file.sync_data().map_err(|e| StoreError::io(&self.path, e))
    }

    /// Records matching every set filter field, newest first. Unparseable
    /// lines become warnings; the remaining records are still returned.
    pub fn query(&self, filter: &HistoryFilter) -> Result<HistoryQuery> {
        let text = std::fs::read_to_string(&self.path).map_err(|e| StoreError::io(&self.path, e))?;
        let mut out = HistoryQuery::default();
        let mut found = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<RunRecord>(line) {
                Ok(rec) => {
                    if rec.matches(filter) {
                        found.push((i, rec));
                    }
                }
                Err(e) => out.warnings.push(LedgerWarning {
                    line: i + 1,
                    message: e.to_string(),
                }),
            }
        }
        found.sort_by(|(la, a), (lb, b)| b.timestamp.cmp(&a.timestamp).then(lb.cmp(la)));
        out.records = found.into_iter().map(|(_, r)| r).collect();
        Ok(out)
    }

    pub fn all(&self) -> Result<HistoryQuery> {
        self.query(&HistoryFilter::default())
    }
}

fn existing_run_ids(text: &str) -> HashSet<&str> {
    #[derive(Deserialize)]
    struct IdOnly<'a> {
        #[serde(borrow)]
        run_id: &'a str,
    }
    text.lines()
        .filter_map(|l| serde_json::from_str::<IdOnly>(l).ok())
        .map(|r| r.run_id)
        .collect()
}
