//! Batch execution of one template over a row range.
//!
//! Every row is rendered on its own and sent as a single-turn request with
//! no history, so a row's prompt depends only on that row. Up to
//! `parallelism` requests are in flight at once; results are committed by a
//! single writer on the calling thread, in completion order, as
//! table cell → checkpoint → progress event. After the last row one
//! [`RunRecord`] is appended to the ledger with per-row entries in row
//! order.
//!
//! A session can be interrupted at any point and resumed from its
//! checkpoint. Resuming re-sends every row that is not yet `ok`; cell
//! writes are idempotent, so with a deterministic provider the final table
//! is the same as for an uninterrupted run.

mod session;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::Instant;

use chrono::Utc;
use serde::{Deserialize, Serialize};

pub use session::{resolve_checkpoint, sessions_dir, RowCheckpoint, SessionState, TableLock};

use crate::content_hash;
use crate::promptlib::{PromptError, PromptTemplate};
use crate::provider::{ChatRequest, ModelConfig, Provider, ProviderError};
use crate::store::{
    parse_output_column, CellOutput, CellStatus, Ledger, Row, RowOutcome, RunRecord, SegmentTable, StoreError,
    TokenUsage,
};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("invalid job: {0}")]
    InvalidJob(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("checkpoint is stale: table had {expected} rows, now has {found}")]
    StaleCheckpoint { expected: usize, found: usize },
    #[error("{0} is locked by another run")]
    Locked(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl EngineError {
    fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EngineError::Io {
            path: path.into(),
            source,
        }
    }
}

/// One pass of a template over `[start, end)` of a table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub table_path: PathBuf,
    pub template: PromptTemplate,
    pub config: ModelConfig,
    pub row_range: [usize; 2],
    pub output_column: String,
    pub pass_tag: String,
    pub parallelism: usize,
    /// Ledger file; defaults to `ledger.jsonl` next to the table.
    pub ledger_path: Option<PathBuf>,
}

impl Job {
    pub const DEFAULT_PARALLELISM: usize = 4;

    pub fn new(
        table_path: impl Into<PathBuf>,
        template: PromptTemplate,
        config: ModelConfig,
        output_column: impl Into<String>,
        row_range: [usize; 2],
    ) -> Result<Self, EngineError> {
        let output_column = output_column.into();
        let (_, pass) = parse_output_column(&output_column)?;
        Ok(Job {
            table_path: table_path.into(),
            template,
            config,
            row_range,
            pass_tag: pass.to_string(),
            output_column,
            parallelism: Self::DEFAULT_PARALLELISM,
            ledger_path: None,
        })
    }

    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        self.parallelism = parallelism;
        self
    }

    pub fn with_ledger(mut self, path: impl Into<PathBuf>) -> Self {
        self.ledger_path = Some(path.into());
        self
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.ledger_path
            .clone()
            .unwrap_or_else(|| session::table_dir(&self.table_path).join("ledger.jsonl"))
    }

    fn validate(&self, table: &SegmentTable) -> Result<(), EngineError> {
        parse_output_column(&self.output_column)?;
        if self.parallelism == 0 {
            return Err(EngineError::InvalidJob("parallelism must be >= 1".into()));
        }
        let [start, end] = self.row_range;
        if start > end || end > table.len() {
            return Err(EngineError::InvalidJob(format!(
                "row range [{start}, {end}) outside table of {} rows",
                table.len()
            )));
        }
        self.config
            .validate()
            .map_err(|e| EngineError::InvalidJob(e.to_string()))?;
        self.template.check_table(table)?;
        Ok(())
    }
}

/// Renders one row into a single-turn request.
pub fn build_request(template: &PromptTemplate, row: &Row) -> Result<ChatRequest, PromptError> {
    Ok(ChatRequest::user(template.render(row)?))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub ok: usize,
    pub error: usize,
    pub skipped: usize,
    /// Rows already `ok` from an earlier run of the session.
    pub carried: usize,
    /// Rows left unprocessed because the run stopped early.
    pub pending: usize,
}

impl RunCounts {
    pub fn total(&self) -> usize {
        self.ok + self.error + self.skipped + self.carried + self.pending
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason", content = "detail")]
pub enum StopReason {
    Cancelled,
    StopAfter(usize),
    AuthFailure(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub session_id: String,
    pub counts: RunCounts,
    pub wall_time_ms: u64,
    pub checkpoint_path: PathBuf,
    pub ledger_path: PathBuf,
    /// Set when the run ended before covering its range.
    pub stopped: Option<StopReason>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProgressEvent {
    pub row: usize,
    pub status: CellStatus,
    pub elapsed_ms: u64,
}

pub trait ProgressSink: Send + Sync {
    fn event(&self, event: &ProgressEvent);
}

pub struct NoProgress;

impl ProgressSink for NoProgress {
    fn event(&self, _: &ProgressEvent) {}
}

/// One JSON object per line on standard error.
pub struct StderrProgress;

impl ProgressSink for StderrProgress {
    fn event(&self, event: &ProgressEvent) {
        let line = serde_json::to_string(event).expect("event serializes");
        let _ = writeln!(std::io::stderr().lock(), "{line}");
    }
}

struct RowResult {
    row: usize,
    cell_text: Option<String>,
    outcome: RowOutcome,
    auth_failure: Option<String>,
}

pub struct Engine {
    provider: Arc<dyn Provider>,
    progress: Arc<dyn ProgressSink>,
    cancel: Arc<AtomicBool>,
    stop_after: Option<usize>,
}

impl Engine {
    pub fn new(provider: Arc<dyn Provider>) -> Self {
        Engine {
            provider,
            progress: Arc::new(NoProgress),
            cancel: Arc::new(AtomicBool::new(false)),
            stop_after: None,
        }
    }

    pub fn with_progress(mut self, sink: Arc<dyn ProgressSink>) -> Self {
        self.progress = sink;
        self
    }

    /// Setting the flag stops dispatch; in-flight rows are still committed.
    pub fn cancel_token(&self) -> Arc<AtomicBool> {
        self.cancel.clone()
    }

    pub fn with_cancel_token(mut self, token: Arc<AtomicBool>) -> Self {
        self.cancel = token;
        self
    }

    /// Simulates a crash after `rows` commits: dispatch stops and rows that
    /// complete afterwards are discarded.
    pub fn with_stop_after(mut self, rows: usize) -> Self {
        self.stop_after = Some(rows);
        self
    }

    /// Starts a new session for `job`, with the table path made absolute.
    pub fn run_job(&self, mut job: Job) -> Result<RunResult, EngineError> {
        job.table_path = std::fs::canonicalize(&job.table_path).map_err(|e| EngineError::io(&job.table_path, e))?;
        let _lock = TableLock::acquire(&job.table_path)?;
        let table = SegmentTable::load(&job.table_path)?;
        job.validate(&table)?;
        let session_id = uuid::Uuid::new_v4().to_string();
        let now = Utc::now();
        let mut state = SessionState {
            checkpoint_path: sessions_dir(&job.table_path).join(format!("{session_id}.json")),
            session_id,
            ledger_path: job.ledger_path(),
            table_rows: table.len(),
            completed: BTreeMap::new(),
            runs: Vec::new(),
            created_at: now,
            updated_at: now,
            job,
        };
        self.execute(&mut state, table)
    }

    /// Continues the session stored at `checkpoint`.
    pub fn resume(&self, checkpoint: impl AsRef<Path>) -> Result<RunResult, EngineError> {
        let mut state = SessionState::load(checkpoint.as_ref())?;
        state.checkpoint_path = checkpoint.as_ref().to_path_buf();
        let _lock = TableLock::acquire(&state.job.table_path)?;
        let table = SegmentTable::load(&state.job.table_path)?;
        if table.len() != state.table_rows {
            return Err(EngineError::StaleCheckpoint {
                expected: state.table_rows,
                found: table.len(),
            });
        }
        state.job.validate(&table)?;
        self.execute(&mut state, table)
    }

    fn execute(&self, state: &mut SessionState, mut table: SegmentTable) -> Result<RunResult, EngineError> {
        let started = Instant::now();
        let run_id = uuid::Uuid::new_v4().to_string();
        state.runs.push(run_id.clone());
        let job = state.job.clone();
        let todo = state.pending();
        let carried = (job.row_range[1] - job.row_range[0]) - todo.len();

        table.apply_outputs(&job.output_column, &BTreeMap::new())?;
        table.save()?;
        state.save()?;

        let work: Vec<Row> = todo.iter().map(|&r| table.rows[r].clone()).collect();
        let next = AtomicUsize::new(0);
        let halt = AtomicBool::new(false);
        let mut outcomes: Vec<RowOutcome> = Vec::new();
        let mut counts = RunCounts {
            carried,
            ..RunCounts::default()
        };
        let mut stopped = None;
        let mut commit_error = None;

        std::thread::scope(|scope| {
            let (tx, rx) = mpsc::channel::<RowResult>();
            let workers = job.parallelism.min(todo.len());
            for _ in 0..workers {
                let tx = tx.clone();
                let (work, next, halt, template) = (&work, &next, &halt, &job.template);
                let cancel = &self.cancel;
                let provider = self.provider.as_ref();
                scope.spawn(move || loop {
                    if halt.load(Ordering::SeqCst) || cancel.load(Ordering::SeqCst) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(row) = work.get(i) else { break };
                    let result = process_row(provider, template, row);
                    if tx.send(result).is_err() {
                        break;
                    }
                });
            }
            drop(tx);

            for result in rx {
                if commit_error.is_some() || matches!(stopped, Some(StopReason::StopAfter(_))) {
                    continue;
                }
                if let Err(e) = self.commit(state, &mut table, &job, &run_id, &result, started) {
                    halt.store(true, Ordering::SeqCst);
                    commit_error = Some(e);
                    continue;
                }
                match result.outcome.status {
                    CellStatus::Ok => counts.ok += 1,
                    CellStatus::Error => counts.error += 1,
                    CellStatus::Skipped => counts.skipped += 1,
                }
                outcomes.push(result.outcome);
                if let Some(msg) = result.auth_failure {
                    halt.store(true, Ordering::SeqCst);
                    stopped.get_or_insert(StopReason::AuthFailure(msg));
                }
                if let Some(k) = self.stop_after {
                    if outcomes.len() >= k {
                        halt.store(true, Ordering::SeqCst);
                        stopped = Some(StopReason::StopAfter(k));
                    }
                }
            }
        });

        if let Some(e) = commit_error {
            return Err(e);
        }
        counts.pending = todo.len() - outcomes.len();
        if counts.pending > 0 && stopped.is_none() {
            stopped = Some(StopReason::Cancelled);
        }
        outcomes.sort_by_key(|o| o.row_index);

        let record = RunRecord {
            run_id: run_id.clone(),
            session_id: Some(state.session_id.clone()),
            timestamp: Utc::now(),
            module: "run".into(),
            model_config: Some(job.config.clone()),
            template_name: Some(job.template.name.clone()),
            template_hash: job.template.version_hash.clone(),
            template_body: job.template.body.clone(),
            source: job.table_path.clone(),
            row_range: job.row_range,
            output_column: job.output_column.clone(),
            per_row: outcomes,
            completed: counts.pending == 0,
            params: Some(serde_json::json!({
                "pass_tag": job.pass_tag,
                "parallelism": job.parallelism,
            })),
        };
        Ledger::new(&state.ledger_path).append(&record)?;

        Ok(RunResult {
            run_id,
            session_id: state.session_id.clone(),
            counts,
            wall_time_ms: started.elapsed().as_millis() as u64,
            checkpoint_path: state.checkpoint_path.clone(),
            ledger_path: state.ledger_path.clone(),
            stopped,
        })
    }

    fn commit(
        &self,
        state: &mut SessionState,
        table: &mut SegmentTable,
        job: &Job,
        run_id: &str,
        result: &RowResult,
        started: Instant,
    ) -> Result<(), EngineError> {
        let cell = match (&result.cell_text, result.outcome.status) {
            (Some(text), CellStatus::Ok) => CellOutput::ok(text.clone(), run_id),
            (_, CellStatus::Skipped) => CellOutput::skipped(run_id),
            _ => CellOutput::error(run_id),
        };
        table.write_outputs(&job.output_column, &BTreeMap::from([(result.row, cell)]))?;
        state.completed.insert(
            result.row,
            RowCheckpoint {
                status: result.outcome.status,
                response_hash: result.outcome.response_hash.clone(),
            },
        );
        state.save()?;
        self.progress.event(&ProgressEvent {
            row: result.row,
            status: result.outcome.status,
            elapsed_ms: started.elapsed().as_millis() as u64,
        });
        Ok(())
    }
}

fn process_row(provider: &dyn Provider, template: &PromptTemplate, row: &Row) -> RowResult {
    let mut outcome = RowOutcome {
        row_index: row.index,
        prompt_hash: None,
        response_hash: None,
        status: CellStatus::Skipped,
        latency_ms: 0,
        token_usage: TokenUsage::default(),
        error: None,
    };
    let request = match build_request(template, row) {
        Ok(r) => r,
        Err(PromptError::EmptyData(_)) => {
            return RowResult {
                row: row.index,
                cell_text: None,
                outcome,
                auth_failure: None,
            }
        }
        Err(e) => {
            outcome.status = CellStatus::Error;
            outcome.error = Some(e.to_string());
            return RowResult {
                row: row.index,
                cell_text: None,
                outcome,
                auth_failure: None,
            };
        }
    };
    outcome.prompt_hash = Some(content_hash(&request.user));
    let call_started = Instant::now();
    let reply = provider.complete(&request).and_then(|r| {
        if r.text.is_empty() {
            Err(ProviderError::MalformedResponse {
                path: "text".into(),
                message: "empty completion".into(),
            })
        } else {
            Ok(r)
        }
    });
    outcome.latency_ms = call_started.elapsed().as_millis() as u64;
    match reply {
        Ok(resp) => {
            outcome.status = CellStatus::Ok;
            outcome.response_hash = Some(content_hash(&resp.text));
            outcome.token_usage = TokenUsage {
                input: resp.input_tokens,
                output: resp.output_tokens,
            };
            RowResult {
                row: row.index,
                cell_text: Some(resp.text),
                outcome,
                auth_failure: None,
            }
        }
        Err(e) => {
            outcome.status = CellStatus::Error;
            outcome.error = Some(e.to_string());
            RowResult {
                row: row.index,
                cell_text: None,
                auth_failure: e.is_auth().then(|| e.to_string()),
                outcome,
            }
        }
    }
}
