//! `atomist` command-line tool.
//!
//! Exit codes: 0 success, 1 partial (some rows errored or the run stopped
//! early), 2 configuration, schema or I/O error, 3 provider authentication
//! error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use atomist::ProviderError;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "atomist", version, about = "Segment-level LLM analysis with an audit trail")]
pub struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// JSON config file with defaults; flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Split text files into a segment table.
    Segment(SegmentArgs),
    /// Manage prompt templates.
    #[command(subcommand)]
    Prompt(PromptCommand),
    /// Run a template over table rows, or resume a session.
    Run(Box<RunArgs>),
    /// Parse raw outputs into score/label/count/quotes columns.
    Extract(ExtractArgs),
    /// Combine two score columns into one.
    Tabulate(TabulateArgs),
    /// Agreement statistics between two columns.
    Irr(IrrArgs),
    /// List ledger records.
    History(HistoryArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeArg {
    Paragraph,
    Speaker,
    Delimiter,
    Sentences,
    Whole,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "paragraph")]
    pub mode: ModeArg,
    /// Token for `--mode delimiter`.
    #[arg(long)]
    pub delimiter: Option<String>,
    /// Sentences per segment for `--mode sentences`.
    #[arg(long, default_value_t = 3)]
    pub sentences: usize,
    /// Constant context column, `context_1=Grade 8`.
    #[arg(long = "context", value_name = "NAME=VALUE")]
    pub context: Vec<String>,
    #[arg(short, long, default_value = "segments.csv")]
    pub output: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum PromptCommand {
    /// Build a template from a codebook JSON file and save it.
    Build {
        codebook: PathBuf,
        #[arg(long)]
        library: Option<PathBuf>,
    },
    /// Save a template file into the library.
    Save {
        file: PathBuf,
        /// Template name; defaults to the file stem.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        library: Option<PathBuf>,
    },
    /// Render one row of a table.
    Render {
        /// `name[@hash]` or a template file.
        template: String,
        table: PathBuf,
        #[arg(long, default_value_t = 0)]
        row: usize,
        #[arg(long)]
        library: Option<PathBuf>,
    },
    /// List saved templates.
    List {
        #[arg(long)]
        library: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// Table to process; with `--resume` only used to locate the session.
    pub table: Option<PathBuf>,
    /// `name[@hash]` from the library, or a template file.
    #[arg(long)]
    pub prompt: Option<String>,
    /// `<kind>:<model_id>`, kind one of openai, anthropic, ollama, mock.
    #[arg(long)]
    pub model: Option<String>,
    /// Output column, `out:<label>:<pass>`.
    #[arg(long)]
    pub out: Option<String>,
    /// Row range `start..end` (end exclusive; either side optional).
    #[arg(long)]
    pub rows: Option<String>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long)]
    pub api_key_env: Option<String>,
    #[arg(long)]
    pub timeout: Option<u64>,
    /// Requests per second; 0 disables limiting.
    #[arg(long)]
    pub rate_limit: Option<f64>,
    /// Session id or checkpoint path to resume.
    #[arg(long)]
    pub resume: Option<String>,
    #[arg(long)]
    pub ledger: Option<PathBuf>,
    #[arg(long)]
    pub library: Option<PathBuf>,
    /// Prompt-hash to response map for the mock provider.
    #[arg(long)]
    pub mock_fixtures: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub stop_after: Option<usize>,
    #[arg(long, hide = true)]
    pub crash_after: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    pub table: PathBuf,
    /// Raw output column to parse.
    #[arg(long)]
    pub col: String,
    /// Take the output schema from a codebook.
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    #[arg(long, requires = "score_max")]
    pub score_min: Option<f64>,
    #[arg(long, requires = "score_min")]
    pub score_max: Option<f64>,
    /// Allowed labels, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub labels: Vec<String>,
    #[arg(long)]
    pub count: bool,
    #[arg(long)]
    pub quotes: bool,
    #[arg(long)]
    pub rationale: bool,
    /// Also check quotes against the data cell.
    #[arg(long)]
    pub verify_quotes: bool,
    #[arg(long)]
    pub ledger: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TabulateArgs {
    pub table: PathBuf,
    #[arg(long)]
    pub col_a: String,
    #[arg(long)]
    pub col_b: String,
    #[arg(long)]
    pub out: String,
    #[arg(long, default_value_t = 1.0)]
    pub max_diff: f64,
    #[arg(long)]
    pub ledger: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum KindArg {
    Categorical,
    Count,
}

#[derive(Args, Debug)]
pub struct IrrArgs {
    pub table: PathBuf,
    #[arg(long)]
    pub col_a: String,
    #[arg(long)]
    pub col_b: String,
    #[arg(long, value_enum, default_value = "categorical")]
    pub kind: KindArg,
}

#[derive(Args, Debug)]
pub struct HistoryArgs {
    /// Ledger file; defaults to `ledger.jsonl` next to `--table`, else in
    /// the current directory.
    #[arg(long)]
    pub ledger: Option<PathBuf>,
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Model id or `<kind>:<model_id>`.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub column: Option<String>,
    /// RFC 3339 timestamp or `YYYY-MM-DD`.
    #[arg(long)]
    pub since: Option<String>,
    /// Re-render every prompt from the ledger and compare hashes.
    #[arg(long)]
    pub verify: bool,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let auth = err
        .chain()
        .any(|e| e.downcast_ref::<ProviderError>().is_some_and(ProviderError::is_auth));
    if auth {
        3
    } else {
        2
    }
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}
