//! Tabular workspace and run ledger.
//!
//! A [`SegmentTable`] is a CSV file with one row per analytic unit. Column
//! roles come from the header names alone:
//!
//! | header                 | role                          |
//! |------------------------|-------------------------------|
//! | `data`                 | [`ColumnRole::Data`] (exactly one) |
//! | `context_<k>`, k >= 1  | [`ColumnRole::Context`]       |
//! | `out:<label>:<pass>`   | [`ColumnRole::Output`]        |
//! | anything else          | [`ColumnRole::Id`]            |
//!
//! The [`Ledger`] is a JSONL file holding one [`RunRecord`] per line.

mod ledger;
mod table;

use std::path::PathBuf;

pub use ledger::{HistoryFilter, HistoryQuery, Ledger, LedgerWarning, RowOutcome, RunRecord, TokenUsage};
pub use table::{
    infer_column, is_output_column, load_table, parse_output_column, CellOutput, CellStatus,
    ColumnRole, ColumnSpec, Row, SegmentTable,
};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("row index {index} out of range (table has {len} rows)")]
    Index { index: usize, len: usize },
    #[error("run id {0} already present in ledger")]
    DuplicateRun(String),
    #[error("invalid run record: {0}")]
    InvalidRecord(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl StoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StoreError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// Write `bytes` to `path` through a sibling temp file and a rename, so
/// readers see either the old or the new content.
pub(crate) fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;

    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "table".into());
    let tmp = dir.join(format!(".{file_name}.tmp-{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| StoreError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| StoreError::io(&tmp, e))?;
        f.sync_all().map_err(|e| StoreError::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| StoreError::io(path, e))
}
