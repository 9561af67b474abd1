//! Segment-level ("atomistic") LLM analysis.
//!
//! Documents are split into analytic units, every unit is sent to a model
//! independently through one versioned prompt template, and every call is
//! recorded in an append-only ledger so that each output cell can be traced
//! back to the prompt and model configuration that produced it. Repeated passes are compared with inter-rater reliability
//! statistics.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`segmenter`] turns text files into a [`SegmentTable`].
//! - [`promptlib`] holds prompt templates, the codebook builder and the
//!   on-disk prompt library.
//! - [`provider`] talks to OpenAI-compatible, Anthropic and Ollama endpoints,
//!   plus a deterministic mock.
//! - [`engine`] runs a template over a row range with checkpointed sessions.
//! - [`extract`] parses raw outputs into typed fields.
//! - [`irr`] computes agreement statistics between two output columns.
//! - [`store`] owns the CSV table model and the JSONL run ledger.
//! - [`audit`] replays ledger records against their source tables.

#![forbid(unsafe_code)]

pub mod audit;
pub mod engine;
pub mod extract;
pub mod irr;
pub mod promptlib;
pub mod provider;
pub mod segmenter;
pub mod store;

mod hashing;

pub use hashing::content_hash;

pub use engine::{Engine, EngineError, Job, ProgressEvent, RunCounts, RunResult, SessionState};
pub use extract::{OutputSchema, ParseMode, StructuredOutput, TabulationPolicy};
pub use irr::{IrrReport, RatingKind, RatingPairs};
pub use promptlib::{Codebook, PromptLibrary, PromptTemplate};
pub use provider::{ChatRequest, ChatResponse, ModelConfig, Provider, ProviderError, ProviderKind};
pub use segmenter::{Document, Segment, SegmentationMode};
pub use store::{
    CellOutput, CellStatus, ColumnRole, ColumnSpec, Ledger, Row, RowOutcome, RunRecord,
    SegmentTable,
};
