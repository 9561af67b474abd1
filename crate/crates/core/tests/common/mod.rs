//! Helpers shared by the integration tests and the acceptance runner.

#![allow(dead_code)]

use std::path::PathBuf;

use atomist::engine::build_request;
use atomist::segmenter::{detect_speaker_line, segment};
use atomist::{Document, PromptTemplate, RatingKind, RatingPairs, Segment, SegmentTable, SegmentationMode};
use proptest::prelude::*;
use proptest::sample::Index;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

pub fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

// ---------------------------------------------------------------------------
// Segmentation

pub const DELIMITERS: [&str; 3] = ["---", "##", "@@"];

fn word() -> impl Strategy<Value = String> {
    prop_oneof![
        4 => "[a-z]{1,8}",
        2 => "[A-Z][a-z]{0,6}",
        1 => "[0-9]{1,3}",
        1 => prop::sample::select(vec!["café", "naïve", "Ünal", "日本", "---", "##", "@@", "\"well\"", "(sic)"])
            .prop_map(str::to_string),
    ]
}

fn sep() -> impl Strategy<Value = &'static str> {
    prop::sample::select(vec![" ", " ", " ", "  ", ". ", "? ", "! ", ", ", "... ", ".\" ", "\t"])
}

fn prose() -> impl Strategy<Value = String> {
    prop::collection::vec((word(), sep()), 1..14).prop_map(|parts| {
        let mut s = String::new();
        for (w, p) in parts {
            s.push_str(&w);
            s.push_str(p);
        }
        s
    })
}

fn speaker() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["Interviewer", "P1", "Participant 2", "Dr. Lee", "Ana-María", "Q", "A"])
        .prop_map(str::to_string)
}

fn line() -> impl Strategy<Value = String> {
    prop_oneof![
        2 => Just(String::new()),
        1 => "[ \t]{1,3}",
        3 => (speaker(), prose()).prop_map(|(s, p)| format!("{s}: {p}")),
        5 => prose(),
        1 => prop::sample::select(DELIMITERS.to_vec()).prop_map(str::to_string),
    ]
}

/// Raw document text with mixed line endings and assorted line kinds.
/// Always has content.
pub fn raw_document() -> impl Strategy<Value = String> {
    (
        prop::collection::vec((line(), "[ ]{0,2}"), 1..16),
        prop::sample::select(vec!["\n", "\r\n", "\r"]),
        any::<bool>(),
    )
        .prop_map(|(lines, nl, bom)| {
            let body = lines
                .into_iter()
                .map(|(l, trail)| l + &trail)
                .collect::<Vec<_>>()
                .join(nl);
            if bom {
                format!("\u{feff}{body}")
            } else {
                body
            }
        })
        .prop_filter("needs content", |s| !s.trim_start_matches('\u{feff}').trim().is_empty())
}

pub fn mode_name(mode: &SegmentationMode) -> String {
    match mode {
        SegmentationMode::Paragraph => "paragraph".into(),
        SegmentationMode::SpeakerTurn => "speaker_turn".into(),
        SegmentationMode::Delimiter { .. } => "delimiter".into(),
        SegmentationMode::SentenceCount { .. } => "sentence_count".into(),
        SegmentationMode::EntireFile => "entire_file".into(),
    }
}

fn squash(s: &str) -> String {
    s.chars().filter(|c| !c.is_whitespace()).collect()
}

/// Checks that `segments` tile the normalized document: every segment is a
/// trimmed, non-empty slice at its span, spans are ordered and disjoint,
/// and whatever lies between them is whitespace or, for delimiter mode,
/// the token. Mode-specific structure is checked too.
pub fn check_lossless(doc: &Document, mode: &SegmentationMode, segments: &[Segment]) -> Result<(), String> {
    let chars: Vec<char> = doc.text.chars().collect();
    if segments.is_empty() && !matches!(mode, SegmentationMode::Delimiter { .. }) {
        return Err("no segments".into());
    }
    let mut cursor = 0;
    let mut gaps = Vec::with_capacity(segments.len() + 1);
    for (i, s) in segments.iter().enumerate() {
        if s.index != i || s.doc_id != doc.doc_id {
            return Err(format!("segment {i} has index {} doc {:?}", s.index, s.doc_id));
        }
        if s.text.is_empty() || s.text.trim() != s.text {
            return Err(format!("segment {i} is empty or untrimmed: {:?}", s.text));
        }
        let [a, b] = s.span;
        if a < cursor || a >= b || b > chars.len() {
            return Err(format!("segment {i} span {a}..{b} out of order (cursor {cursor})"));
        }
        let at_span: String = chars[a..b].iter().collect();
        if at_span != s.text {
            return Err(format!("segment {i} text differs from its span"));
        }
        gaps.push(chars[cursor..a].iter().collect::<String>());
        cursor = b;
    }
    gaps.push(chars[cursor..].iter().collect::<String>());

    for gap in &gaps {
        let residue = match mode {
            SegmentationMode::Delimiter { token } => gap.replace(token.as_str(), ""),
            _ => gap.clone(),
        };
        if !residue.trim().is_empty() {
            return Err(format!("content outside every segment: {gap:?}"));
        }
    }

    let texts: Vec<&str> = segments.iter().map(|s| s.text.as_str()).collect();
    match mode {
        SegmentationMode::EntireFile => {
            if segments.len() != 1 || segments[0].text != doc.text.trim() {
                return Err(format!("entire file gave {} segments", segments.len()));
            }
        }
        SegmentationMode::Paragraph => {
            if let Some(t) = texts.iter().find(|t| t.contains("\n\n")) {
                return Err(format!("paragraph spans a blank line: {t:?}"));
            }
            if squash(&texts.join("\n\n")) != squash(&doc.text) {
                return Err("paragraphs do not rejoin to the document".into());
            }
        }
        SegmentationMode::SpeakerTurn => {
            let labelled = doc.text.lines().filter(|l| detect_speaker_line(l).is_some()).count();
            let starts = texts.iter().filter(|t| detect_speaker_line(t).is_some()).count();
            if labelled > 0 && starts != labelled {
                return Err(format!("{labelled} speaker lines but {starts} turns start with one"));
            }
            if labelled > 0 && segments.len() > labelled + 1 {
                return Err("more turns than speaker lines plus preamble".into());
            }
            if squash(&texts.join("\n")) != squash(&doc.text) {
                return Err("turns do not rejoin to the document".into());
            }
        }
        SegmentationMode::SentenceCount { .. } => {
            if squash(&texts.join(" ")) != squash(&doc.text) {
                return Err("sentence groups do not rejoin to the document".into());
            }
        }
        SegmentationMode::Delimiter { token } => {
            if let Some(t) = texts.iter().find(|t| t.contains(token.as_str())) {
                return Err(format!("segment still holds the delimiter: {t:?}"));
            }
        }
    }
    Ok(())
}

fn mode_strategy(kind: &str) -> BoxedStrategy<SegmentationMode> {
    match kind {
        "paragraph" => Just(SegmentationMode::Paragraph).boxed(),
        "speaker_turn" => Just(SegmentationMode::SpeakerTurn).boxed(),
        "delimiter" => prop::sample::select(DELIMITERS.to_vec())
            .prop_map(|t| SegmentationMode::Delimiter { token: t.to_string() })
            .boxed(),
        "sentence_count" => (1usize..6).prop_map(|n| SegmentationMode::SentenceCount { n }).boxed(),
        "entire_file" => Just(SegmentationMode::EntireFile).boxed(),
        other => panic!("unknown mode {other}"),
    }
}

pub const MODES: [&str; 5] = ["paragraph", "speaker_turn", "delimiter", "sentence_count", "entire_file"];

/// Runs the lossless check over `cases` random documents for one mode.
pub fn segmentation_suite(kind: &str, cases: u32) -> Result<u32, String> {
    let mut runner = runner(cases);
    runner
        .run(&(raw_document(), mode_strategy(kind)), |(raw, mode)| {
            let doc = Document::new("doc", &raw, "doc.txt").map_err(|e| TestCaseError::fail(e.to_string()))?;
            let seg = segment(&doc, &mode).map_err(|e| TestCaseError::fail(e.to_string()))?;
            check_lossless(&doc, &mode, &seg.segments).map_err(TestCaseError::fail)
        })
        .map_err(|e| format!("{kind}: {e}"))?;
    Ok(cases)
}

// ---------------------------------------------------------------------------
// Render independence

pub const INDEPENDENCE_HEADER: [&str; 4] = ["doc_id", "data", "context_1", "context_2"];
pub const INDEPENDENCE_TEMPLATE: &str =
    "Year: {{context_1}}\nSpeaker {{doc_id}}\n\nExcerpt:\n{{data}}\n\nNote: {{context_2}}\n";

fn cell() -> impl Strategy<Value = String> {
    prop_oneof![
        4 => "[a-zA-Z0-9 ,.;\"']{0,20}",
        1 => Just("{{data}}".to_string()),
        1 => Just("{{context_1}} and }} {{".to_string()),
        1 => Just("line one\nline two".to_string()),
        2 => "[^\r\u{0}]{0,12}",
    ]
}

fn table_row() -> impl Strategy<Value = Vec<String>> {
    ("[a-z][a-z0-9]{0,5}", "[a-zA-Z]{1,4}", cell(), cell(), cell())
        .prop_map(|(id, lead, data, c1, c2)| vec![id, format!("{lead}{data}"), c1, c2])
}

fn build_table(rows: &[Vec<String>]) -> SegmentTable {
    let mut table = SegmentTable::new(&INDEPENDENCE_HEADER, "t.csv").expect("valid header");
    for r in rows {
        table.push_row(r.clone()).expect("row fits header");
    }
    table
}

/// Deterministic shuffle so the case stays reproducible from its inputs.
fn shuffle<T>(items: &mut [T], mut seed: u64) {
    for i in (1..items.len()).rev() {
        seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let j = (seed >> 33) as usize % (i + 1);
        items.swap(i, j);
    }
}

#[derive(Debug, Clone)]
pub struct IndependenceCase {
    pub rows: Vec<Vec<String>>,
    pub target: Index,
    pub keep: Vec<bool>,
    pub inserted: Vec<Vec<String>>,
    pub seed: u64,
    pub position: Index,
}

pub fn independence_case() -> impl Strategy<Value = IndependenceCase> {
    (
        prop::collection::vec(table_row(), 1..12),
        any::<Index>(),
        prop::collection::vec(any::<bool>(), 12),
        prop::collection::vec(table_row(), 0..6),
        any::<u64>(),
        any::<Index>(),
    )
        .prop_map(|(rows, target, keep, inserted, seed, position)| IndependenceCase {
            rows,
            target,
            keep,
            inserted,
            seed,
            position,
        })
}

/// Renders the target row in the original table and in a reshuffled one
/// (also after a CSV round trip). The renderings must be identical.
pub fn check_independence(case: &IndependenceCase, template: &PromptTemplate) -> Result<(), String> {
    let original = build_table(&case.rows);
    let t = case.target.index(case.rows.len());
    let expected = build_request(template, &original.rows[t]).map_err(|e| e.to_string())?;

    let mut others: Vec<Vec<String>> = case
        .rows
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != t && case.keep[i])
        .map(|(_, r)| r.clone())
        .collect();
    others.extend(case.inserted.iter().cloned());
    shuffle(&mut others, case.seed);
    let at = case.position.index(others.len() + 1);
    others.insert(at, case.rows[t].clone());

    let mutated = build_table(&others);
    let got = build_request(template, &mutated.rows[at]).map_err(|e| e.to_string())?;
    if got != expected {
        return Err(format!("row {t} moved to {at} rendered differently"));
    }
    let reread = SegmentTable::from_csv_bytes(&mutated.to_csv_bytes(), "t.csv").map_err(|e| e.to_string())?;
    let got = build_request(template, &reread.rows[at]).map_err(|e| e.to_string())?;
    if got != expected {
        return Err(format!("row {t} rendered differently after a CSV round trip"));
    }
    Ok(())
}

pub fn independence_suite(cases: u32) -> Result<u32, String> {
    let template = PromptTemplate::new("independence", INDEPENDENCE_TEMPLATE).map_err(|e| e.to_string())?;
    let mut runner = runner(cases);
    runner
        .run(&independence_case(), |case| {
            check_independence(&case, &template).map_err(TestCaseError::fail)
        })
        .map_err(|e| e.to_string())?;
    Ok(cases)
}

// ---------------------------------------------------------------------------
// Kappa

/// Kappa straight from its definition over categories {0, 1}: observed
/// agreement against the product of marginal proportions. When chance
/// agreement is 1 the value is 1 for perfect agreement, else undefined.
pub fn brute_kappa(a: &[u8], b: &[u8]) -> Option<f64> {
    let n = a.len() as f64;
    let p_o = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let share = |v: &[u8], c: u8| v.iter().filter(|&&x| x == c).count() as f64 / n;
    let p_e: f64 = [0u8, 1].iter().map(|&c| share(a, c) * share(b, c)).sum();
    if 1.0 - p_e == 0.0 {
        return (p_o == 1.0).then_some(1.0);
    }
    Some((p_o - p_e) / (1.0 - p_e))
}

fn bits(v: u32, len: usize) -> Vec<u8> {
    (0..len).map(|i| ((v >> i) & 1) as u8).collect()
}

pub struct KappaSweep {
    pub pairs_checked: usize,
    pub degenerate: usize,
    pub max_abs_err: f64,
}

/// Compares the library against [`brute_kappa`] on every pair of binary
/// vectors of length 1 through `max_len`.
pub fn kappa_sweep(max_len: usize) -> Result<KappaSweep, String> {
    let mut sweep = KappaSweep {
        pairs_checked: 0,
        degenerate: 0,
        max_abs_err: 0.0,
    };
    for len in 1..=max_len {
        for va in 0..(1u32 << len) {
            for vb in 0..(1u32 << len) {
                let (a, b) = (bits(va, len), bits(vb, len));
                let col = |v: &[u8]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
                let pairs = RatingPairs::from_columns(RatingKind::Categorical, &col(&a), &col(&b))
                    .map_err(|e| e.to_string())?;
                let got = atomist::irr::cohens_kappa(&pairs).map_err(|e| e.to_string())?;
                let want = brute_kappa(&a, &b);
                if got.degenerate {
                    sweep.degenerate += 1;
                }
                match (got.value, want) {
                    (None, None) => {}
                    (Some(g), Some(w)) => {
                        let err = (g - w).abs();
                        sweep.max_abs_err = sweep.max_abs_err.max(err);
                        if err > 1e-12 {
                            return Err(format!("{a:?} vs {b:?}: got {g}, oracle {w}"));
                        }
                    }
                    (g, w) => return Err(format!("{a:?} vs {b:?}: got {g:?}, oracle {w:?}")),
                }
                sweep.pairs_checked += 1;
            }
        }
    }
    Ok(sweep)
}

// ---------------------------------------------------------------------------
// Extraction corpus

#[derive(serde::Deserialize)]
pub struct Expect {
    pub parse_mode: atomist::ParseMode,
    pub score: Option<f64>,
    pub label: Option<String>,
    pub count: Option<u64>,
    pub quotes: Option<Vec<String>>,
    pub rationale: Option<String>,
}

#[derive(serde::Deserialize)]
pub struct Sample {
    pub id: String,
    pub schema: atomist::OutputSchema,
    pub raw: String,
    pub expect: Expect,
}

pub fn corpus() -> Vec<Sample> {
    let text = std::fs::read_to_string(fixture_dir().join("extract_corpus.json")).expect("corpus fixture");
    serde_json::from_str(&text).expect("corpus parses")
}

pub fn check_sample(s: &Sample) -> Result<(), String> {
    use atomist::ParseMode;
    let out = atomist::extract::parse_structured(&s.raw, &s.schema);
    let fail = |what: &str, got: String, want: String| Err(format!("{}: {what} {got}, expected {want}", s.id));
    if out.parse_mode != s.expect.parse_mode {
        return fail("parse_mode", format!("{:?}", out.parse_mode), format!("{:?}", s.expect.parse_mode));
    }
    if out.raw != s.raw {
        return Err(format!("{}: raw text not preserved", s.id));
    }
    if out.parse_mode == ParseMode::Failed {
        if out.score.is_some() || out.label.is_some() || out.count.is_some() {
            return Err(format!("{}: failed parse carries values", s.id));
        }
        return Ok(());
    }
    if s.schema.score.is_some() && out.score != s.expect.score {
        return fail("score", format!("{:?}", out.score), format!("{:?}", s.expect.score));
    }
    if s.schema.label.is_some() && out.label != s.expect.label {
        return fail("label", format!("{:?}", out.label), format!("{:?}", s.expect.label));
    }
    if s.schema.count && out.count != s.expect.count {
        return fail("count", format!("{:?}", out.count), format!("{:?}", s.expect.count));
    }
    if let Some(q) = &s.expect.quotes {
        if &out.quotes != q {
            return fail("quotes", format!("{:?}", out.quotes), format!("{q:?}"));
        }
    }
    if let Some(r) = &s.expect.rationale {
        if out.rationale.as_ref() != Some(r) {
            return fail("rationale", format!("{:?}", out.rationale), format!("{r:?}"));
        }
    }
    Ok(())
}
