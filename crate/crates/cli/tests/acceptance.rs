//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;
use std::time::{Duration, Instant};

use atomist::audit::verify_record;
use atomist::extract::{tabulate_passes, TabulationFlag};
use atomist::provider::{
    decode_response, encode_request, HttpProvider, RecordingSleeper, RetryPolicy, ScriptedTransport,
};
use atomist::{
    content_hash, ChatRequest, Ledger, ModelConfig, Provider, ProviderKind, RunRecord, SegmentTable,
    TabulationPolicy,
};
use serde_json::Value;

type Check = fn() -> Result<String, String>;

const MODEL: &str = "mock:fixture-seed";
const TABLE: &str = "interviews.csv";
const PROMPT: &str = "belonging.txt";
const ROWS: usize = 23;

fn main() {
    let criteria: [(u8, &str, Option<Duration>, Check); 9] = [
        (1, "repeated-pass consistency", Some(Duration::from_secs(5)), repeated_passes),
        (2, "count agreement", Some(Duration::from_secs(1)), count_agreement),
        (3, "kappa oracle", Some(Duration::from_secs(10)), kappa_oracle),
        (4, "per-row independence", None, independence),
        (5, "crash-safe resume", Some(Duration::from_secs(30)), crash_resume),
        (6, "segmentation properties", Some(Duration::from_secs(10)), segmentation),
        (7, "wire fidelity", None, wire_fidelity),
        (8, "audit completeness", None, audit_completeness),
        (9, "extraction and tabulation", None, extraction_tabulation),
    ];
    let mut failed = 0;
    for (id, name, limit, check) in criteria {
        let started = Instant::now();
        let mut result = check();
        let elapsed = started.elapsed();
        if let (Ok(_), Some(limit)) = (&result, limit) {
            if elapsed > limit {
                result = Err(format!("took {elapsed:.2?}, limit {limit:.0?}"));
            }
        }
        match result {
            Ok(detail) => println!("criterion {id} ({name}): PASS [{elapsed:.2?}] {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {id} ({name}): FAIL [{elapsed:.2?}] {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// helpers

fn cli_fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// A scratch directory holding copies of the CLI fixtures.
fn workspace() -> Result<tempfile::TempDir, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for entry in fs::read_dir(cli_fixtures()).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        if path.is_file() {
            fs::copy(&path, dir.path().join(path.file_name().unwrap())).map_err(|e| e.to_string())?;
        }
    }
    Ok(dir)
}

fn atomist(dir: &Path, args: &[&str]) -> Result<Output, String> {
    Command::new(env!("CARGO_BIN_EXE_atomist"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| format!("spawning atomist: {e}"))
}

/// Runs the binary and requires the given exit code.
fn expect(dir: &Path, args: &[&str], code: i32) -> Result<Output, String> {
    let out = atomist(dir, args)?;
    if out.status.code() != Some(code) {
        return Err(format!(
            "`atomist {}` exited {:?}, expected {code}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(out)
}

fn json(out: &Output) -> Result<Value, String> {
    serde_json::from_slice(&out.stdout).map_err(|e| format!("stdout is not JSON: {e}"))
}

fn run_pass(dir: &Path, column: &str, extra: &[&str], code: i32) -> Result<Value, String> {
    let mut args = vec!["--json", "run", TABLE, "--prompt", PROMPT, "--model", MODEL, "--out", column];
    args.extend_from_slice(extra);
    json(&expect(dir, &args, code)?)
}

fn column(dir: &Path, name: &str) -> Result<Vec<String>, String> {
    let table = SegmentTable::load(dir.join(TABLE)).map_err(|e| e.to_string())?;
    let values = table.column_values(name).map_err(|e| e.to_string())?;
    Ok(values.into_iter().map(str::to_string).collect())
}

fn records(path: &Path) -> Result<Vec<RunRecord>, String> {
    Ok(Ledger::new(path).all().map_err(|e| e.to_string())?.records)
}

fn ensure(cond: bool, why: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(why())
    }
}

fn close(got: f64, want: f64, tol: f64, what: &str) -> Result<(), String> {
    ensure((got - want).abs() <= tol, || format!("{what} = {got}, expected {want} ± {tol}"))
}

// ---------------------------------------------------------------------------
// criteria

fn repeated_passes() -> Result<String, String> {
    let dir = workspace()?;
    let d = dir.path();
    for pass in ["pass1", "pass2"] {
        let r = run_pass(d, &format!("out:presence:{pass}"), &[], 0)?;
        ensure(r["counts"]["ok"] == ROWS, || format!("{pass}: {}", r["counts"]))?;
        expect(
            d,
            &["extract", TABLE, "--col", &format!("out:presence:{pass}"), "--labels", "Present,Absent", "--count", "--quotes"],
            0,
        )?;
    }
    let (a, b) = (column(d, "out:presence:pass1")?, column(d, "out:presence:pass2")?);
    ensure(a.len() == ROWS && a.iter().all(|c| !c.is_empty()), || "pass 1 has empty cells".into())?;
    ensure(a == b, || "output columns differ between passes".into())?;

    let report = json(&expect(
        d,
        &["--json", "irr", TABLE, "--col-a", "out:presence.label:pass1", "--col-b", "out:presence.label:pass2"],
        0,
    )?)?;
    ensure(report["n"] == ROWS, || format!("n = {}", report["n"]))?;
    ensure(report["kappa"].as_f64() == Some(1.0), || format!("kappa = {}", report["kappa"]))?;
    ensure(report["percent_agreement"].as_f64() == Some(1.0), || {
        format!("percent agreement = {}", report["percent_agreement"])
    })?;
    let labels = report["confusion"]["labels"].as_array().map_or(0, Vec::len);
    Ok(format!("n = {ROWS}, kappa = 1.000, agreement = 1.000, {labels} labels, columns byte-identical"))
}

fn count_agreement() -> Result<String, String> {
    let dir = workspace()?;
    let d = dir.path();
    let table = SegmentTable::load(d.join("mention_counts.csv")).map_err(|e| e.to_string())?;
    let a = table.column_values("coder_a").map_err(|e| e.to_string())?;
    let b = table.column_values("coder_b").map_err(|e| e.to_string())?;
    let diffs: Vec<i64> = a
        .iter()
        .zip(&b)
        .map(|(x, y)| x.parse::<i64>().unwrap() - y.parse::<i64>().unwrap())
        .collect();
    ensure(diffs.len() == 23 && diffs.iter().filter(|d| **d != 0).count() == 3, || {
        "fixture is not 23 pairs with 3 disagreements".into()
    })?;
    ensure(diffs.iter().all(|d| d.abs() <= 1), || "fixture disagreement wider than 1".into())?;

    let r = json(&expect(
        d,
        &["--json", "irr", "mention_counts.csv", "--col-a", "coder_a", "--col-b", "coder_b", "--kind", "count"],
        0,
    )?)?;
    let exact = r["exact_agreement"].as_f64().ok_or("no exact_agreement")?;
    let mad = r["mean_abs_diff"].as_f64().ok_or("no mean_abs_diff")?;
    close(exact, 20.0 / 23.0, 1e-9, "exact_agreement")?;
    close(mad, 3.0 / 23.0, 1e-9, "mean_abs_diff")?;
    ensure(r["max_abs_diff"] == 1, || format!("max_abs_diff = {}", r["max_abs_diff"]))?;
    ensure((0.83..=0.87).contains(&exact), || format!("exact {exact} outside 0.83..0.87"))?;
    ensure((0.13..=0.22).contains(&mad), || format!("mean diff {mad} outside 0.13..0.22"))?;
    Ok(format!("exact = {exact:.4}, mean_abs_diff = {mad:.4}, max = 1"))
}

fn kappa_oracle() -> Result<String, String> {
    let sweep = common::kappa_sweep(5)?;
    Ok(format!(
        "{} vector pairs, {} degenerate, max |err| = {:.1e}",
        sweep.pairs_checked, sweep.degenerate, sweep.max_abs_err
    ))
}

fn independence() -> Result<String, String> {
    let cases = common::independence_suite(250)?;
    Ok(format!("{cases} random tables, 0 violations"))
}

fn crash_resume() -> Result<String, String> {
    let reference = {
        let dir = workspace()?;
        run_pass(dir.path(), "out:presence:pass1", &[], 0)?;
        fs::read(dir.path().join(TABLE)).map_err(|e| e.to_string())?
    };
    for k in [1usize, 5, 12, 22] {
        // Interrupted run that records its partial progress, then resume.
        let dir = workspace()?;
        let d = dir.path();
        let first = run_pass(d, "out:presence:pass1", &["--stop-after", &k.to_string()], 1)?;
        let session = first["session_id"].as_str().ok_or("no session id")?.to_string();
        let second = json(&expect(d, &["--json", "run", TABLE, "--resume", &session], 0)?)?;
        ensure(second["counts"]["carried"] == k, || format!("k = {k}: {}", second["counts"]))?;
        let bytes = fs::read(d.join(TABLE)).map_err(|e| e.to_string())?;
        ensure(bytes == reference, || format!("k = {k}: resumed table differs"))?;
        let recs = records(&d.join("ledger.jsonl"))?;
        ensure(recs.len() == 2, || format!("k = {k}: {} ledger records", recs.len()))?;
        ensure(recs.iter().all(|r| r.session_id.as_deref() == Some(session.as_str())), || {
            format!("k = {k}: records do not share the session id")
        })?;

        // Hard kill: the process exits without any ledger write.
        let dir = workspace()?;
        let d = dir.path();
        expect(
            d,
            &["run", TABLE, "--prompt", PROMPT, "--model", MODEL, "--out", "out:presence:pass1", "--crash-after", &k.to_string()],
            75,
        )?;
        let checkpoint = fs::read_dir(d.join(".sessions"))
            .map_err(|e| e.to_string())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .find(|p| p.extension().is_some_and(|x| x == "json"))
            .ok_or("no checkpoint after crash")?;
        let resumed = json(&expect(d, &["--json", "run", "--resume", checkpoint.to_str().unwrap()], 0)?)?;
        ensure(resumed["counts"]["carried"].as_u64() >= Some(k as u64), || {
            format!("k = {k}: crash lost committed rows: {}", resumed["counts"])
        })?;
        let bytes = fs::read(d.join(TABLE)).map_err(|e| e.to_string())?;
        ensure(bytes == reference, || format!("k = {k}: table after crash and resume differs"))?;
    }
    Ok("k in {1, 5, 12, 22}: tables byte-identical, 2 records per session; hard kill also recovers".into())
}

fn segmentation() -> Result<String, String> {
    for mode in common::MODES {
        common::segmentation_suite(mode, 500)?;
    }
    Ok(format!("500 documents x {} modes, lossless; entire_file always 1 segment", common::MODES.len()))
}

fn wire_fidelity() -> Result<String, String> {
    let wire = common::fixture_dir().join("wire");
    let read = |name: &str| fs::read_to_string(wire.join(name)).map_err(|e| format!("{name}: {e}"));
    let case: Value = serde_json::from_str(&read("request_case.json")?).map_err(|e| e.to_string())?;
    let request = ChatRequest {
        system: case["system"].as_str().map(str::to_string),
        user: case["user"].as_str().ok_or("case has no user")?.to_string(),
    };
    let kinds = [
        (ProviderKind::OpenaiCompat, "openai"),
        (ProviderKind::Anthropic, "anthropic"),
        (ProviderKind::OllamaLocal, "ollama"),
    ];
    let mut openai = None;
    for (kind, name) in kinds {
        let mut cfg = ModelConfig::new(kind, case[format!("model_{name}")].as_str().ok_or("no model")?);
        cfg.temperature = case["temperature"].as_f64().ok_or("no temperature")?;
        cfg.max_tokens = case["max_tokens"].as_u64().ok_or("no max_tokens")? as u32;
        let encoded = encode_request(&cfg, &request).map_err(|e| e.to_string())?;
        ensure(encoded.body == read(&format!("{name}_request.json"))?, || {
            format!("{name} request differs from golden bytes")
        })?;
        let reply = decode_response(kind, &read(&format!("{name}_response.json"))?).map_err(|e| e.to_string())?;
        ensure(reply.text.contains("\"Present\""), || format!("{name} decoded {:?}", reply.text))?;
        if kind == ProviderKind::OpenaiCompat {
            openai = Some(cfg);
        }
    }

    let transport = Arc::new(ScriptedTransport::statuses(&[429, 429, 200], &read("openai_response.json")?));
    let provider = HttpProvider::with_api_key(openai.unwrap(), transport.clone(), Some("k".into()))
        .map_err(|e| e.to_string())?
        .with_retry(RetryPolicy::default())
        .with_sleeper(Arc::new(RecordingSleeper::default()));
    provider.complete(&request).map_err(|e| e.to_string())?;
    let attempts = transport.requests().len();
    ensure(attempts == 3, || format!("[429, 429, 200] took {attempts} attempts"))?;
    Ok("3 request bodies byte-identical, 3 replies decoded, [429, 429, 200] in 3 attempts".into())
}

fn audit_completeness() -> Result<String, String> {
    let dir = workspace()?;
    let d = dir.path();
    let secret = "sk-acceptance-not-a-real-key";
    let out = Command::new(env!("CARGO_BIN_EXE_atomist"))
        .current_dir(d)
        .env("OPENAI_API_KEY", secret)
        .args(["--json", "run", TABLE, "--prompt", PROMPT, "--model", MODEL, "--out", "out:presence:pass1", "--rows", "2..20"])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;

    let ledger_path = d.join("ledger.jsonl");
    let raw = fs::read_to_string(&ledger_path).map_err(|e| e.to_string())?;
    ensure(!raw.contains(secret), || "ledger contains key material".into())?;
    let recs = records(&ledger_path)?;
    let record = recs.first().ok_or("empty ledger")?;
    let body = fs::read_to_string(d.join(PROMPT)).map_err(|e| e.to_string())?;
    ensure(record.template_body == body, || "template body not stored verbatim".into())?;
    ensure(record.template_hash == content_hash(&body), || "template hash mismatch".into())?;
    let cfg = record.model_config.as_ref().ok_or("no model config")?;
    ensure(cfg.selector() == MODEL, || format!("model {}", cfg.selector()))?;
    ensure(record.row_range == [2, 20], || format!("row range {:?}", record.row_range))?;
    ensure(record.timestamp <= chrono::Utc::now(), || "timestamp in the future".into())?;
    let rows: Vec<usize> = record.per_row.iter().map(|r| r.row_index).collect();
    ensure(rows == (2..20).collect::<Vec<_>>(), || format!("per_row covers {rows:?}"))?;

    // Replay with plain substitution, from the record and table alone.
    let table = SegmentTable::load(&record.source).map_err(|e| e.to_string())?;
    for outcome in &record.per_row {
        let mut prompt = record.template_body.clone();
        for (col, value) in &table.rows[outcome.row_index].values {
            prompt = prompt.replace(&format!("{{{{{col}}}}}"), value);
        }
        ensure(outcome.prompt_hash.as_deref() == Some(content_hash(&prompt).as_str()), || {
            format!("row {} prompt hash does not replay", outcome.row_index)
        })?;
    }
    let report = verify_record(record).map_err(|e| e.to_string())?;
    ensure(report.is_clean() && report.rows_checked == 18, || format!("audit: {report:?}"))?;
    expect(d, &["history", "--table", TABLE, "--verify"], 0)?;
    Ok("body, config without secrets, range, timestamp, 18/18 per_row hashes replayed".into())
}

fn extraction_tabulation() -> Result<String, String> {
    let corpus = common::corpus();
    ensure(corpus.len() >= 20, || format!("only {} samples", corpus.len()))?;
    for sample in &corpus {
        common::check_sample(sample)?;
    }

    let policy = TabulationPolicy::default();
    let table = [
        ((4.0, 4.0), Some(4.0), TabulationFlag::Ok),
        ((4.0, 5.0), Some(4.5), TabulationFlag::Ok),
        ((2.0, 5.0), None, TabulationFlag::Adjudicate),
    ];
    for ((a, b), value, flag) in table {
        let t = tabulate_passes(Some(a), Some(b), policy);
        ensure(t.value == value && t.flag == flag, || format!("({a}, {b}) gave {t:?}"))?;
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    fs::write(d.join("scores.csv"), "doc_id,data,a,b\ne1,x,4,4\ne2,y,4,5\ne3,z,2,5\n").map_err(|e| e.to_string())?;
    expect(d, &["tabulate", "scores.csv", "--col-a", "a", "--col-b", "b", "--out", "final"], 0)?;
    let t = SegmentTable::load(d.join("scores.csv")).map_err(|e| e.to_string())?;
    let values = t.column_values("final").map_err(|e| e.to_string())?;
    let flags = t.column_values("final_flag").map_err(|e| e.to_string())?;
    ensure(values == ["4", "4.5", ""] && flags == ["ok", "ok", "adjudicate"], || {
        format!("cli tabulate gave {values:?} {flags:?}")
    })?;
    Ok(format!("{} corpus samples as expected; (4,4)->4, (4,5)->4.5, (2,5)->adjudicate", corpus.len()))
}
