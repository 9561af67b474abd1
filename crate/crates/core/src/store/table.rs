use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{write_atomic, Result, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    Id,
    Data,
    Context,
    Output,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub role: ColumnRole,
    /// Pass tag of an output column (`pass1` in `out:score:pass1`).
    pub pass_tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Row {
    pub index: usize,
    pub doc_id: String,
    pub values: BTreeMap<String, String>,
}

impl Row {
    pub fn get(&self, column: &str) -> Option<&str> {
        self.values.get(column).map(String::as_str)
    }

    /// The data cell; every valid table has one.
    pub fn data(&self) -> &str {
        self.get("data").unwrap_or("")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Error,
    Skipped,
}

impl CellStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::Error => "error",
            CellStatus::Skipped => "skipped",
        }
    }
}

/// One model output destined for an output cell.
///
/// Only `ok` outputs put text into the table; `error` and `skipped` cells
/// are left empty and their status lives in the checkpoint and ledger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellOutput {
    pub raw_text: String,
    pub status: CellStatus,
    pub run_id: String,
}

impl CellOutput {
    pub fn ok(raw_text: impl Into<String>, run_id: impl Into<String>) -> Self {
        CellOutput {
            raw_text: raw_text.into(),
            status: CellStatus::Ok,
            run_id: run_id.into(),
        }
    }

    pub fn error(run_id: impl Into<String>) -> Self {
        CellOutput {
            raw_text: String::new(),
            status: CellStatus::Error,
            run_id: run_id.into(),
        }
    }

    pub fn skipped(run_id: impl Into<String>) -> Self {
        CellOutput {
            raw_text: String::new(),
            status: CellStatus::Skipped,
            run_id: run_id.into(),
        }
    }

    fn cell_value(&self) -> &str {
        match self.status {
            CellStatus::Ok => &self.raw_text,
            CellStatus::Error | CellStatus::Skipped => "",
        }
    }
}

fn column_name_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[A-Za-z0-9_:.\-]+$").unwrap())
}

fn output_column_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^out:([A-Za-z0-9_.\-]+):([A-Za-z0-9_.\-]+)$").unwrap())
}

fn context_column_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^context_([1-9][0-9]*)$").unwrap())
}

/// Splits `out:<label>:<pass>` into `(label, pass)`.
pub fn parse_output_column(name: &str) -> Result<(&str, &str)> {
    let caps = output_column_re().captures(name).ok_or_else(|| {
        StoreError::Schema(format!(
            "output column {name:?} does not match out:<label>:<pass>"
        ))
    })?;
    Ok((caps.get(1).unwrap().as_str(), caps.get(2).unwrap().as_str()))
}

pub fn is_output_column(name: &str) -> bool {
    output_column_re().is_match(name)
}

/// Position of a context column (`context_3` -> 3).
pub(crate) fn context_ordinal(name: &str) -> Option<usize> {
    context_column_re()
        .captures(name)
        .and_then(|c| c.get(1).unwrap().as_str().parse().ok())
}

/// Infers a column's role from its header name.
pub fn infer_column(name: &str) -> Result<ColumnSpec> {
    if !column_name_re().is_match(name) {
        return Err(StoreError::Schema(format!(
            "invalid column name {name:?}: expected [A-Za-z0-9_:.-]+"
        )));
    }
    if name.starts_with("out:") {
        let (_, pass) = parse_output_column(name)?;
        return Ok(ColumnSpec {
            name: name.to_string(),
            role: ColumnRole::Output,
            pass_tag: Some(pass.to_string()),
        });
    }
    let role = if name == "data" {
        ColumnRole::Data
    } else if context_ordinal(name).is_some() {
        ColumnRole::Context
    } else {
        ColumnRole::Id
    };
    Ok(ColumnSpec {
        name: name.to_string(),
        role,
        pass_tag: None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentTable {
    pub columns: Vec<ColumnSpec>,
    pub rows: Vec<Row>,
    pub source_path: PathBuf,
}

pub fn load_table(path: impl AsRef<Path>) -> Result<SegmentTable> {
    SegmentTable::load(path)
}

impl SegmentTable {
    /// An empty table with the given header.
    pub fn new(header: &[&str], source_path: impl Into<PathBuf>) -> Result<Self> {
        let columns = header
            .iter()
            .map(|n| infer_column(n))
            .collect::<Result<Vec<_>>>()?;
        Self::check_columns(&columns)?;
        Ok(SegmentTable {
            columns,
            rows: Vec::new(),
            source_path: source_path.into(),
        })
    }

    fn check_columns(columns: &[ColumnSpec]) -> Result<()> {
        let mut seen = HashSet::new();
        for c in columns {
            if !seen.insert(c.name.as_str()) {
                return Err(StoreError::Schema(format!("duplicate column {:?}", c.name)));
            }
        }
        match columns.iter().filter(|c| c.role == ColumnRole::Data).count() {
            1 => Ok(()),
            0 => Err(StoreError::Schema("table has no `data` column".into())),
            n => Err(StoreError::Schema(format!("table has {n} data columns"))),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| StoreError::io(path, e))?;
        Self::from_csv_bytes(&bytes, path)
    }

    pub fn from_csv_bytes(bytes: &[u8], source_path: impl Into<PathBuf>) -> Result<Self> {
        let source_path = source_path.into();
        let format_err = |message: String| StoreError::Format {
            path: source_path.clone(),
            message,
        };
        let bytes = bytes.strip_prefix(b"\xEF\xBB\xBF").unwrap_or(bytes);
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(bytes);
        let mut records = reader.records();
        let header = match records.next() {
            Some(Ok(h)) => h,
            Some(Err(e)) => return Err(format_err(e.to_string())),
            None => return Err(format_err("missing header row".into())),
        };
        if header.iter().all(str::is_empty) {
            return Err(format_err("missing header row".into()));
        }
        let names: Vec<&str> = header.iter().collect();
        let mut table = SegmentTable::new(&names, source_path.clone())?;
        for (line, record) in records.enumerate() {
            let record = record.map_err(|e| format_err(e.to_string()))?;
            if record.len() != names.len() {
                return Err(format_err(format!(
                    "record {} has {} fields, header has {}",
                    line + 1,
                    record.len(),
                    names.len()
                )));
            }
            table.push_row(record.iter().map(str::to_string).collect())?;
        }
        Ok(table)
    }

    /// Appends a row given values in column order.
    pub fn push_row(&mut self, values: Vec<String>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(StoreError::Schema(format!(
                "row has {} values, table has {} columns",
                values.len(),
                self.columns.len()
            )));
        }
        let values: BTreeMap<String, String> = self
            .columns
            .iter()
            .map(|c| c.name.clone())
            .zip(values)
            .collect();
        let doc_id = values
            .get("doc_id")
            .or_else(|| values.get("id"))
            .cloned()
            .unwrap_or_default();
        self.rows.push(Row {
            index: self.rows.len(),
            doc_id,
            values,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<&ColumnSpec> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.column(name).is_some()
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    /// Context columns ordered by their ordinal.
    pub fn context_columns(&self) -> Vec<&ColumnSpec> {
        let mut ctx: Vec<_> = self
            .columns
            .iter()
            .filter(|c| c.role == ColumnRole::Context)
            .collect();
        ctx.sort_by_key(|c| context_ordinal(&c.name));
        ctx
    }

    /// All values of one column, in row order.
    pub fn column_values(&self, name: &str) -> Result<Vec<&str>> {
        if !self.has_column(name) {
            return Err(StoreError::Schema(format!("no column named {name:?}")));
        }
        Ok(self.rows.iter().map(|r| r.get(name).unwrap_or("")).collect())
    }

    /// Distinct doc ids in first-appearance order with their row counts.
    pub fn documents(&self) -> Vec<(&str, usize)> {
        let mut out: Vec<(&str, usize)> = Vec::new();
        for row in &self.rows {
            match out.iter_mut().find(|(id, _)| *id == row.doc_id) {
                Some((_, n)) => *n += 1,
                None => out.push((&row.doc_id, 1)),
            }
        }
        out
    }

    fn ensure_column(&mut self, name: &str) -> Result<()> {
        if self.has_column(name) {
            return Ok(());
        }
        let spec = infer_column(name)?;
        self.columns.push(spec);
        for row in &mut self.rows {
            row.values.insert(name.to_string(), String::new());
        }
        Ok(())
    }

    /// Applies output cells in memory, creating the column if needed.
    /// Only the targeted cells change.
    pub fn apply_outputs(&mut self, column: &str, cells: &BTreeMap<usize, CellOutput>) -> Result<()> {
        parse_output_column(column)?;
        for (&index, cell) in cells {
            if index >= self.rows.len() {
                return Err(StoreError::Index {
                    index,
                    len: self.rows.len(),
                });
            }
            if cell.status == CellStatus::Ok && cell.raw_text.is_empty() {
                return Err(StoreError::Schema(format!(
                    "row {index}: ok output with empty text"
                )));
            }
        }
        self.ensure_column(column)?;
        for (&index, cell) in cells {
            self.rows[index]
                .values
                .insert(column.to_string(), cell.cell_value().to_string());
        }
        Ok(())
    }

    /// Applies output cells and persists the table to `source_path`.
    pub fn write_outputs(&mut self, column: &str, cells: &BTreeMap<usize, CellOutput>) -> Result<()> {
        self.apply_outputs(column, cells)?;
        self.save()
    }

    /// Sets a plain (non-output-grammar-checked) derived column value.
    /// Used for extraction columns such as `out:score.score:pass1`.
    pub fn set_cells(&mut self, column: &str, values: &BTreeMap<usize, String>) -> Result<()> {
        for &index in values.keys() {
            if index >= self.rows.len() {
                return Err(StoreError::Index {
                    index,
                    len: self.rows.len(),
                });
            }
        }
        self.ensure_column(column)?;
        for (&index, v) in values {
            self.rows[index].values.insert(column.to_string(), v.clone());
        }
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        writer
            .write_record(self.columns.iter().map(|c| c.name.as_str()))
            .expect("write to Vec");
        for row in &self.rows {
            writer
                .write_record(self.columns.iter().map(|c| row.get(&c.name).unwrap_or("")))
                .expect("write to Vec");
        }
        writer.into_inner().expect("flush to Vec")
    }

    pub fn save(&self) -> Result<()> {
        self.save_to(&self.source_path)
    }

    pub fn save_to(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_csv_bytes())
    }
}
