//! Prompt templates, the codebook builder and the prompt library.

mod codebook;
mod library;
mod template;

use std::path::PathBuf;

pub use codebook::{build_from_codebook, Codebook, Construct, FewShotExample, Level};
pub use library::{IndexEntry, PromptLibrary};
pub use template::{placeholders, PromptTemplate};

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("template references {{{{{0}}}}} but the table has no such column")]
    MissingField(String),
    #[error("row {0} has an empty data cell")]
    EmptyData(usize),
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("invalid codebook: {0}")]
    Schema(String),
    #[error("prompt {0} not found in library")]
    NotFound(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}
