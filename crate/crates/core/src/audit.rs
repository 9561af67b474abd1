//! Replays ledger records against their source tables.
//!
//! A record carries the full template body, so every prompt it sent can be
//! re-rendered from the record and the table alone. The prompt hash of each
//! re-rendered row is compared with the one stored in the record.

use serde::Serialize;

use crate::content_hash;
use crate::promptlib::{PromptError, PromptTemplate};
use crate::store::{RunRecord, SegmentTable, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("run {0} has no rendered prompts to replay")]
    NotReplayable(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Mismatch {
    pub row_index: usize,
    pub recorded: String,
    /// Hash of the re-rendered prompt, or the render error.
    pub replayed: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditReport {
    pub run_id: String,
    pub rows_checked: usize,
    pub mismatches: Vec<Mismatch>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Re-renders every row of `record` that carries a prompt hash, reading the
/// table from the record's source path.
pub fn verify_record(record: &RunRecord) -> Result<AuditReport, AuditError> {
    let table = SegmentTable::load(&record.source)?;
    verify_against(record, &table)
}

pub fn verify_against(record: &RunRecord, table: &SegmentTable) -> Result<AuditReport, AuditError> {
    if record.module != "run" {
        return Err(AuditError::NotReplayable(record.run_id.clone()));
    }
    let name = record.template_name.as_deref().unwrap_or("replay");
    let template = PromptTemplate::new(name, record.template_body.clone())?;
    let mut report = AuditReport {
        run_id: record.run_id.clone(),
        rows_checked: 0,
        mismatches: Vec::new(),
    };
    for outcome in &record.per_row {
        let Some(recorded) = &outcome.prompt_hash else {
            continue;
        };
        report.rows_checked += 1;
        let replayed = match table.rows.get(outcome.row_index) {
            Some(row) => match template.render(row) {
                Ok(prompt) => content_hash(&prompt),
                Err(e) => format!("render failed: {e}"),
            },
            None => format!("row {} missing from table", outcome.row_index),
        };
        if &replayed != recorded {
            report.mismatches.push(Mismatch {
                row_index: outcome.row_index,
                recorded: recorded.clone(),
                replayed,
            });
        }
    }
    Ok(report)
}
