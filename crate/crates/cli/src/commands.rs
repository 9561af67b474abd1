use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use atomist::audit;
use atomist::engine::{resolve_checkpoint, ProgressEvent, ProgressSink, StderrProgress, StopReason};
use atomist::extract::{self, derived_cells, parse_structured, tabulate_passes, verify_quotes, LabelSpec, ScoreSpec};
use atomist::irr::{self, RatingPairs};
use atomist::promptlib::build_from_codebook;
use atomist::provider::{self, ProviderOptions};
use atomist::segmenter::{self, Document};
use atomist::store::{parse_output_column, HistoryFilter, RunRecord};
use atomist::{
    content_hash, Codebook, Engine, Job, Ledger, ModelConfig, OutputSchema, PromptLibrary, PromptTemplate,
    RatingKind, SegmentTable, SegmentationMode, SessionState, TabulationPolicy,
};
use chrono::{DateTime, NaiveDate, Utc};
use serde::Serialize;
use serde_json::json;

use crate::config::CliConfig;
use crate::{
    Cli, Command, ExtractArgs, HistoryArgs, IrrArgs, KindArg, ModeArg, PromptCommand, RunArgs, SegmentArgs,
    TabulateArgs,
};

pub fn dispatch(cli: &Cli) -> Result<u8> {
    let config = CliConfig::load(cli.config.as_deref())?;
    let out = Output { json: cli.json };
    if cli.print_config {
        return print_config(&config, &cli.command, &out);
    }
    match &cli.command {
        Command::Segment(a) => segment(a, &out),
        Command::Prompt(p) => prompt(p, &config, &out),
        Command::Run(a) => run(a, &config, &out),
        Command::Extract(a) => extract_cmd(a, &out),
        Command::Tabulate(a) => tabulate(a, &out),
        Command::Irr(a) => irr_cmd(a, &out),
        Command::History(a) => history(a, &config, &out),
    }
}

struct Output {
    json: bool,
}

impl Output {
    /// Prints `value` as JSON in `--json` mode, otherwise `text`.
    fn emit(&self, value: &impl Serialize, text: impl FnOnce() -> String) {
        if self.json {
            write_stdout(&serde_json::to_string_pretty(value).expect("output serializes"));
        } else {
            let t = text();
            if !t.is_empty() {
                write_stdout(t.trim_end());
            }
        }
    }
}

/// A closed pipe (`atomist history | head`) ends the process quietly.
fn write_stdout(text: &str) {
    use std::io::Write;
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = writeln!(stdout, "{text}").and_then(|_| stdout.flush()) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: writing output: {e}");
        std::process::exit(2);
    }
}

fn print_config(config: &CliConfig, command: &Command, out: &Output) -> Result<u8> {
    let mut effective = serde_json::to_value(config)?;
    effective["library"] = json!(config.library());
    if let Command::Run(args) = command {
        let model = resolve_model(args, config)?;
        effective["parallelism"] = json!(args.parallelism.or(config.parallelism).unwrap_or(Job::DEFAULT_PARALLELISM));
        effective["rate_limit"] = json!(rate_limit(args, config));
        effective["ledger"] = json!(args.ledger.clone().or(config.ledger.clone()));
        effective["api_key_set"] =
            json!(!model.api_key_env.is_empty() && std::env::var_os(&model.api_key_env).is_some());
        effective["model"] = serde_json::to_value(&model)?;
    }
    out.emit(&effective, || serde_json::to_string_pretty(&effective).expect("serializes"));
    Ok(0)
}

fn segment(args: &SegmentArgs, out: &Output) -> Result<u8> {
    let mode = match args.mode {
        ModeArg::Paragraph => SegmentationMode::Paragraph,
        ModeArg::Speaker => SegmentationMode::SpeakerTurn,
        ModeArg::Delimiter => SegmentationMode::Delimiter {
            token: args
                .delimiter
                .clone()
                .ok_or_else(|| anyhow!("--mode delimiter needs --delimiter"))?,
        },
        ModeArg::Sentences => SegmentationMode::SentenceCount { n: args.sentences },
        ModeArg::Whole => SegmentationMode::EntireFile,
    };
    let context = args
        .context
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| anyhow!("--context {kv:?} must be NAME=VALUE"))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut segments = Vec::new();
    let mut warnings = Vec::new();
    for input in &args.inputs {
        let doc = Document::from_file(input)?;
        let result = segmenter::segment(&doc, &mode)?;
        warnings.extend(result.warnings.into_iter().map(|w| format!("{}: {w}", input.display())));
        segments.extend(result.segments);
    }
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let table = segmenter::to_table(&segments, &context)?;
    table.save_to(&args.output)?;
    let docs = table.documents().len();
    out.emit(
        &json!({"output": args.output, "rows": table.len(), "documents": docs, "warnings": warnings}),
        || format!("wrote {} rows from {docs} documents to {}", table.len(), args.output.display()),
    );
    Ok(0)
}

/// Loads `name[@hash]` from the library, or a template file by path.
fn load_template(reference: &str, library: &Path) -> Result<PromptTemplate> {
    let path = Path::new(reference);
    if path.is_file() {
        let body = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "template".into());
        return Ok(PromptTemplate::new(name, body)?);
    }
    let (name, hash) = match reference.split_once('@') {
        Some((n, h)) => (n, Some(h)),
        None => (reference, None),
    };
    Ok(PromptLibrary::new(library).load(name, hash)?)
}

fn prompt(cmd: &PromptCommand, config: &CliConfig, out: &Output) -> Result<u8> {
    let lib = |flag: &Option<PathBuf>| flag.clone().unwrap_or_else(|| config.library());
    match cmd {
        PromptCommand::Build { codebook, library } => {
            let cb = Codebook::from_file(codebook)?;
            let template = build_from_codebook(&cb)?;
            let entry = PromptLibrary::new(lib(library)).save(&template)?;
            out.emit(&entry, || format!("{} {}", entry.name, entry.hash));
        }
        PromptCommand::Save { file, name, library } => {
            let body = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
            let name = name.clone().unwrap_or_else(|| {
                file.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            });
            let entry = PromptLibrary::new(lib(library)).save(&PromptTemplate::new(name, body)?)?;
            out.emit(&entry, || format!("{} {}", entry.name, entry.hash));
        }
        PromptCommand::Render {
            template,
            table,
            row,
            library,
        } => {
            let template = load_template(template, &lib(library))?;
            let table = SegmentTable::load(table)?;
            template.check_table(&table)?;
            let r = table
                .rows
                .get(*row)
                .ok_or_else(|| anyhow!("row {row} out of range (table has {} rows)", table.len()))?;
            let text = template.render(r)?;
            out.emit(
                &json!({"template": template.name, "hash": template.version_hash, "row": row,
                        "prompt_hash": content_hash(&text), "prompt": text}),
                || text.clone(),
            );
        }
        PromptCommand::List { library } => {
            let entries = PromptLibrary::new(lib(library)).list()?;
            out.emit(&entries, || {
                entries
                    .iter()
                    .map(|e| format!("{}  {}  {}\n", e.name, e.hash, e.saved_at.to_rfc3339()))
                    .collect()
            });
        }
    }
    Ok(0)
}

fn parse_rows(spec: &str, len: usize) -> Result<[usize; 2]> {
    let (a, b) = spec
        .split_once("..")
        .ok_or_else(|| anyhow!("--rows {spec:?} must look like start..end"))?;
    let parse = |s: &str, default: usize| -> Result<usize> {
        if s.is_empty() {
            Ok(default)
        } else {
            s.parse().with_context(|| format!("bad row bound {s:?}"))
        }
    };
    Ok([parse(a, 0)?, parse(b, len)?])
}

fn resolve_model(args: &RunArgs, config: &CliConfig) -> Result<ModelConfig> {
    let selector = args
        .model
        .as_deref()
        .or(config.model.as_deref())
        .ok_or_else(|| anyhow!("--model is required (e.g. mock:seed1 or openai:gpt-4o)"))?;
    let mut model = ModelConfig::from_selector(selector)?;
    if let Some(t) = args.temperature.or(config.temperature) {
        model.temperature = t;
    }
    if let Some(m) = args.max_tokens.or(config.max_tokens) {
        model.max_tokens = m;
    }
    if let Some(u) = args.base_url.clone().or(config.base_url.clone()) {
        model.base_url = u;
    }
    if let Some(k) = args.api_key_env.clone().or(config.api_key_env.clone()) {
        model.api_key_env = k;
    }
    if let Some(t) = args.timeout.or(config.request_timeout_s) {
        model.request_timeout_s = t;
    }
    model.validate()?;
    Ok(model)
}

fn rate_limit(args: &RunArgs, config: &CliConfig) -> Option<f64> {
    match args.rate_limit.or(config.rate_limit) {
        Some(r) if r <= 0.0 => None,
        Some(r) => Some(r),
        None => ProviderOptions::default().rate_limit,
    }
}

/// Exits the process after a number of committed rows, leaving no ledger
/// record behind. Used to test recovery from a hard crash.
struct CrashAfter {
    rows: usize,
    seen: AtomicUsize,
}

impl ProgressSink for CrashAfter {
    fn event(&self, event: &ProgressEvent) {
        StderrProgress.event(event);
        if self.seen.fetch_add(1, Ordering::SeqCst) + 1 >= self.rows {
            std::process::exit(75);
        }
    }
}

fn run(args: &RunArgs, config: &CliConfig, out: &Output) -> Result<u8> {
    let options = ProviderOptions {
        rate_limit: rate_limit(args, config),
        mock_fixtures: args.mock_fixtures.clone(),
        ..ProviderOptions::default()
    };

    let (model, job, checkpoint) = match &args.resume {
        Some(reference) => {
            let path = resolve_checkpoint(reference, args.table.as_deref());
            let state = SessionState::load(&path)?;
            (state.job.config.clone(), None, Some(path))
        }
        None => {
            let table_path = args
                .table
                .clone()
                .ok_or_else(|| anyhow!("a table path is required unless --resume is given"))?;
            let reference = args.prompt.as_deref().ok_or_else(|| anyhow!("--prompt is required"))?;
            let column = args.out.as_deref().ok_or_else(|| anyhow!("--out is required"))?;
            let library = args.library.clone().unwrap_or_else(|| config.library());
            let template = load_template(reference, &library)?;
            let model = resolve_model(args, config)?;
            let len = SegmentTable::load(&table_path)?.len();
            let range = match &args.rows {
                Some(spec) => parse_rows(spec, len)?,
                None => [0, len],
            };
            let mut job = Job::new(table_path, template, model.clone(), column, range)?
                .with_parallelism(args.parallelism.or(config.parallelism).unwrap_or(Job::DEFAULT_PARALLELISM));
            if let Some(l) = args.ledger.clone().or(config.ledger.clone()) {
                job = job.with_ledger(l);
            }
            (model, Some(job), None)
        }
    };

    let provider = provider::from_config(&model, &options)?;
    let cancel = Arc::new(AtomicBool::new(false));
    {
        let cancel = cancel.clone();
        let _ = ctrlc::set_handler(move || cancel.store(true, Ordering::SeqCst));
    }
    let sink: Arc<dyn ProgressSink> = match args.crash_after {
        Some(rows) => Arc::new(CrashAfter {
            rows,
            seen: AtomicUsize::new(0),
        }),
        None => Arc::new(StderrProgress),
    };
    let mut engine = Engine::new(provider).with_progress(sink).with_cancel_token(cancel);
    if let Some(k) = args.stop_after {
        engine = engine.with_stop_after(k);
    }
    let result = match (job, checkpoint) {
        (Some(job), _) => engine.run_job(job)?,
        (None, Some(path)) => engine.resume(path)?,
        (None, None) => unreachable!("either a job or a checkpoint"),
    };

    let c = result.counts;
    out.emit(&result, || {
        let mut s = format!(
            "run {} (session {})\n  ok {}  error {}  skipped {}  carried {}  pending {}  in {} ms\n",
            result.run_id, result.session_id, c.ok, c.error, c.skipped, c.carried, c.pending, result.wall_time_ms
        );
        if let Some(reason) = &result.stopped {
            s.push_str(&format!(
                "  stopped early ({reason:?}); resume with: atomist run --resume {}\n",
                result.checkpoint_path.display()
            ));
        }
        s
    });
    Ok(match &result.stopped {
        Some(StopReason::AuthFailure(msg)) => {
            eprintln!("error: provider rejected credentials: {msg}");
            3
        }
        Some(_) => 1,
        None if c.error > 0 => 1,
        None => 0,
    })
}

/// `out:<label>:<pass>` + `score` → `out:<label>.score:<pass>`.
fn derived_name(column: &str, field: &str) -> String {
    match parse_output_column(column) {
        Ok((label, pass)) => format!("out:{label}.{field}:{pass}"),
        Err(_) => format!("{column}_{field}"),
    }
}

fn tool_record(module: &str, source: &Path, rows: usize, column: &str, params: serde_json::Value) -> RunRecord {
    RunRecord {
        run_id: uuid::Uuid::new_v4().to_string(),
        session_id: None,
        timestamp: Utc::now(),
        module: module.into(),
        model_config: None,
        template_name: None,
        template_hash: content_hash(""),
        template_body: String::new(),
        source: source.to_path_buf(),
        row_range: [0, rows],
        output_column: column.into(),
        per_row: Vec::new(),
        completed: true,
        params: Some(params),
    }
}

fn default_ledger(table: &Path, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone().unwrap_or_else(|| {
        match table.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        }
        .join("ledger.jsonl")
    })
}

fn extract_cmd(args: &ExtractArgs, out: &Output) -> Result<u8> {
    let schema = match &args.codebook {
        Some(path) => Codebook::from_file(path)?.output_schema,
        None => OutputSchema {
            score: args.score_min.zip(args.score_max).map(|(min, max)| ScoreSpec { min, max }),
            label: (!args.labels.is_empty()).then(|| LabelSpec {
                allowed: args.labels.clone(),
            }),
            count: args.count,
            quotes: args.quotes,
            rationale: args.rationale,
        },
    };
    schema.validate()?;
    let mut table = SegmentTable::load(&args.table)?;
    if !table.has_column(&args.col) {
        bail!("no column named {:?}", args.col);
    }
    let mut columns: BTreeMap<String, BTreeMap<usize, String>> = BTreeMap::new();
    let mut modes: BTreeMap<&'static str, usize> = BTreeMap::new();
    for row in &table.rows {
        let raw = row.get(&args.col).unwrap_or("");
        if raw.trim().is_empty() {
            continue;
        }
        let parsed = parse_structured(raw, &schema);
        *modes.entry(parsed.parse_mode.as_str()).or_default() += 1;
        for (field, value) in derived_cells(&parsed, &schema) {
            columns
                .entry(derived_name(&args.col, field))
                .or_default()
                .insert(row.index, value);
        }
        if args.verify_quotes && schema.quotes {
            let checks = verify_quotes(&parsed.quotes, row.data());
            columns
                .entry(derived_name(&args.col, "quotes_ok"))
                .or_default()
                .insert(row.index, serde_json::to_string(&checks)?);
        }
    }
    for (name, values) in &columns {
        table.set_cells(name, values)?;
    }
    table.save()?;
    let written: Vec<&String> = columns.keys().collect();
    let ledger = Ledger::new(default_ledger(&args.table, &args.ledger));
    ledger.append(&tool_record(
        "extract",
        &args.table,
        table.len(),
        &args.col,
        json!({"schema": schema, "columns": written, "parse_modes": modes}),
    ))?;
    out.emit(&json!({"columns": written, "parse_modes": modes}), || {
        format!(
            "wrote {}\nparse modes: {}",
            written.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", "),
            modes.iter().map(|(m, n)| format!("{m}={n}")).collect::<Vec<_>>().join(" ")
        )
    });
    Ok(0)
}

fn number(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn tabulate(args: &TabulateArgs, out: &Output) -> Result<u8> {
    if !(args.max_diff.is_finite() && args.max_diff >= 0.0) {
        bail!("--max-diff must be a non-negative number");
    }
    let policy = TabulationPolicy { max_diff: args.max_diff };
    let mut table = SegmentTable::load(&args.table)?;
    let a: Vec<String> = table.column_values(&args.col_a)?.into_iter().map(str::to_string).collect();
    let b: Vec<String> = table.column_values(&args.col_b)?.into_iter().map(str::to_string).collect();
    let flag_col = derived_name(&args.out, "flag");
    let mut values = BTreeMap::new();
    let mut flags = BTreeMap::new();
    let mut tally: BTreeMap<String, usize> = BTreeMap::new();
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        let t = tabulate_passes(number(x), number(y), policy);
        let flag = serde_json::to_value(t.flag)?.as_str().unwrap_or_default().to_string();
        *tally.entry(flag.clone()).or_default() += 1;
        values.insert(i, t.value.map(extract::format_number).unwrap_or_default());
        flags.insert(i, flag);
    }
    table.set_cells(&args.out, &values)?;
    table.set_cells(&flag_col, &flags)?;
    table.save()?;
    Ledger::new(default_ledger(&args.table, &args.ledger)).append(&tool_record(
        "tabulate",
        &args.table,
        table.len(),
        &args.out,
        json!({"policy": policy, "col_a": args.col_a, "col_b": args.col_b, "flag_column": flag_col}),
    ))?;
    out.emit(&json!({"column": args.out, "flag_column": flag_col, "flags": tally}), || {
        format!(
            "wrote {} and {flag_col}\n{}",
            args.out,
            tally.iter().map(|(f, n)| format!("{f}={n}")).collect::<Vec<_>>().join(" ")
        )
    });
    Ok(0)
}

fn irr_cmd(args: &IrrArgs, out: &Output) -> Result<u8> {
    let kind = match args.kind {
        KindArg::Categorical => RatingKind::Categorical,
        KindArg::Count => RatingKind::IntegerCount,
    };
    let table = SegmentTable::load(&args.table)?;
    let pairs = RatingPairs::from_table(&table, kind, &args.col_a, &args.col_b)?;
    let report = irr::report(&pairs)?;
    out.emit(&report, || format!("{} vs {}\n{report}", args.col_a, args.col_b));
    Ok(0)
}

fn parse_since(s: &str) -> Result<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    let d = NaiveDate::parse_from_str(s, "%Y-%m-%d").with_context(|| format!("bad --since {s:?}"))?;
    Ok(d.and_hms_opt(0, 0, 0).expect("midnight").and_utc())
}

#[derive(Serialize)]
struct HistoryEntry<'a> {
    #[serde(flatten)]
    record: &'a RunRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    audit: Option<audit::AuditReport>,
}

fn history(args: &HistoryArgs, config: &CliConfig, out: &Output) -> Result<u8> {
    let path = match (&args.ledger, &args.table) {
        (Some(l), _) => l.clone(),
        (None, Some(t)) => default_ledger(t, &None),
        (None, None) => config.ledger.clone().unwrap_or_else(|| PathBuf::from("ledger.jsonl")),
    };
    let filter = HistoryFilter {
        model: args.model.clone(),
        column: args.column.clone(),
        since: args.since.as_deref().map(parse_since).transpose()?,
    };
    let query = Ledger::new(&path).query(&filter)?;
    for w in &query.warnings {
        eprintln!("warning: {}:{}: {}", path.display(), w.line, w.message);
    }
    let mut dirty = false;
    let mut entries = Vec::new();
    for record in &query.records {
        let audit = if args.verify && record.module == "run" {
            let report = audit::verify_record(record)?;
            dirty |= !report.is_clean();
            Some(report)
        } else {
            None
        };
        entries.push(HistoryEntry { record, audit });
    }
    out.emit(&entries, || {
        let mut s = String::new();
        for e in &entries {
            let r = e.record;
            let count = |st: atomist::CellStatus| r.per_row.iter().filter(|o| o.status == st).count();
            s.push_str(&format!(
                "{}  {}  {:<8} {:<24} {}  rows {}..{}  ok {} error {} skipped {}{}\n",
                r.timestamp.to_rfc3339(),
                &r.run_id[..r.run_id.len().min(8)],
                r.module,
                r.model_config.as_ref().map(|m| m.selector()).unwrap_or_else(|| "-".into()),
                r.output_column,
                r.row_range[0],
                r.row_range[1],
                count(atomist::CellStatus::Ok),
                count(atomist::CellStatus::Error),
                count(atomist::CellStatus::Skipped),
                if r.completed { "" } else { "  (incomplete)" },
            ));
            if let Some(a) = &e.audit {
                s.push_str(&format!(
                    "    audit: {} prompts replayed, {} mismatches\n",
                    a.rows_checked,
                    a.mismatches.len()
                ));
            }
        }
        s
    });
    Ok(if dirty { 1 } else { 0 })
}
