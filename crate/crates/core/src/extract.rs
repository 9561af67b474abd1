//! Turning raw model outputs into structured values.
//!
//! [`parse_structured`] looks for the first balanced JSON object in the raw
//! text (fenced or not) and validates it against an [`OutputSchema`]. When
//! no JSON object carrying schema fields is present it falls back to
//! field-specific regexes. Nothing here fails: a bad output is reported as
//! [`ParseMode::Failed`] so a batch never aborts on one row, and the raw
//! text always travels with the parsed values.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSpec {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub allowed: Vec<String>,
}

/// Which fields a model output is expected to carry.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutputSchema {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<ScoreSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<LabelSpec>,
    #[serde(default)]
    pub count: bool,
    #[serde(default)]
    pub quotes: bool,
    #[serde(default)]
    pub rationale: bool,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("invalid output schema: {0}")]
pub struct SchemaError(pub String);

impl OutputSchema {
    pub fn score(min: f64, max: f64) -> Self {
        OutputSchema {
            score: Some(ScoreSpec { min, max }),
            ..Default::default()
        }
    }

    /// Present/Absent label, mention count and supporting quotes.
    pub fn presence() -> Self {
        OutputSchema {
            label: Some(LabelSpec {
                allowed: vec!["Present".into(), "Absent".into()],
            }),
            count: true,
            quotes: true,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.score.is_none() && self.label.is_none() && !self.count && !self.quotes && !self.rationale
        {
            return Err(SchemaError("schema expects no fields".into()));
        }
        if let Some(s) = &self.score {
            if !(s.min.is_finite() && s.max.is_finite()) || s.min > s.max {
                return Err(SchemaError(format!("score bounds [{}, {}]", s.min, s.max)));
            }
        }
        if let Some(l) = &self.label {
            if l.allowed.is_empty() {
                return Err(SchemaError("label has no allowed values".into()));
            }
        }
        Ok(())
    }

    /// Names of expected fields in their canonical order.
    pub fn field_names(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.score.is_some() {
            out.push("score");
        }
        if self.label.is_some() {
            out.push("label");
        }
        if self.count {
            out.push("count");
        }
        if self.quotes {
            out.push("quotes");
        }
        if self.rationale {
            out.push("rationale");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    Json,
    FallbackRegex,
    Failed,
}

impl ParseMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ParseMode::Json => "json",
            ParseMode::FallbackRegex => "fallback_regex",
            ParseMode::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredOutput {
    pub score: Option<f64>,
    pub label: Option<String>,
    pub count: Option<u64>,
    pub quotes: Vec<String>,
    pub rationale: Option<String>,
    pub parse_mode: ParseMode,
    pub raw: String,
}

impl StructuredOutput {
    fn failed(raw: &str) -> Self {
        StructuredOutput {
            score: None,
            label: None,
            count: None,
            quotes: Vec::new(),
            rationale: None,
            parse_mode: ParseMode::Failed,
            raw: raw.to_string(),
        }
    }
}

/// Every balanced `{...}` candidate in `raw`, in order of their opening
/// brace, that parses as a JSON object.
fn json_objects(raw: &str) -> impl Iterator<Item = Map<String, Value>> + '_ {
    raw.char_indices()
        .filter(|&(_, c)| c == '{')
        .filter_map(move |(start, _)| {
            let end = balanced_end(&raw[start..])?;
            match serde_json::from_str::<Value>(&raw[start..start + end]) {
                Ok(Value::Object(map)) => Some(map),
                _ => None,
            }
        })
}

/// Length of the balanced object starting at `s[0] == '{'`, honouring JSON
/// string literals.
fn balanced_end(s: &str) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in s.char_indices() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn number_value(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn count_value(v: &Value) -> Option<u64> {
    match v {
        Value::Number(n) => n.as_u64().or_else(|| {
            n.as_f64()
                .filter(|f| f.fract() == 0.0 && *f >= 0.0)
                .map(|f| f as u64)
        }),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn from_json(map: &Map<String, Value>, schema: &OutputSchema, raw: &str) -> StructuredOutput {
    let mut out = StructuredOutput::failed(raw);
    if let Some(spec) = &schema.score {
        match map.get("score").and_then(number_value) {
            Some(s) if s >= spec.min && s <= spec.max => out.score = Some(s),
            _ => return StructuredOutput::failed(raw),
        }
    }
    if let Some(spec) = &schema.label {
        match map.get("label").and_then(Value::as_str).map(str::trim) {
            Some(l) if spec.allowed.iter().any(|a| a == l) => out.label = Some(l.to_string()),
            _ => return StructuredOutput::failed(raw),
        }
    }
    if schema.count {
        match map.get("count").and_then(count_value) {
            Some(c) => out.count = Some(c),
            None => return StructuredOutput::failed(raw),
        }
    }
    if schema.quotes {
        match map.get("quotes") {
            None | Some(Value::Null) => {}
            Some(Value::Array(items)) => {
                let mut quotes = Vec::with_capacity(items.len());
                for item in items {
                    match item.as_str() {
                        Some(q) => quotes.push(q.to_string()),
                        None => return StructuredOutput::failed(raw),
                    }
                }
                out.quotes = quotes;
            }
            Some(Value::String(q)) => out.quotes = vec![q.clone()],
            Some(_) => return StructuredOutput::failed(raw),
        }
    }
    if schema.rationale {
        out.rationale = map
            .get("rationale")
            .and_then(Value::as_str)
            .map(str::to_string);
    }
    out.parse_mode = ParseMode::Json;
    out
}

fn score_keyword_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(?:score|rating)\b[^0-9\n]{0,24}?(-?\d+(?:\.\d+)?)").unwrap()
    })
}

fn integer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\b\d+\b").unwrap())
}

fn count_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(?:count|mentions?|occurrences?)\b[^0-9\n]{0,24}?(\d+)").unwrap()
    })
}

fn label_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(?:label|classification|code)\b\s*[:=]\s*(\S+)").unwrap())
}

fn quote_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new("\"([^\"\\n]{3,})\"|\u{201c}([^\u{201d}\\n]{3,})\u{201d}").unwrap())
}

/// Score by regex: the first in-bounds number next to "score"/"rating",
/// else the first in-bounds integer anywhere.
fn fallback_score(raw: &str, spec: &ScoreSpec) -> Option<f64> {
    let in_bounds = |v: f64| v >= spec.min && v <= spec.max;
    score_keyword_re()
        .captures_iter(raw)
        .filter_map(|c| c[1].parse::<f64>().ok())
        .find(|v| in_bounds(*v))
        .or_else(|| {
            integer_re()
                .find_iter(raw)
                .filter(|m| !part_of_decimal(raw, m.start(), m.end()))
                .filter_map(|m| m.as_str().parse::<f64>().ok())
                .find(|v| in_bounds(*v))
        })
}

/// Whether `raw[start..end]` is either side of a decimal like `3.5`.
fn part_of_decimal(raw: &str, start: usize, end: usize) -> bool {
    let is_digit = |c: Option<char>| c.is_some_and(|c| c.is_ascii_digit());
    let after = &raw[end..];
    let before = &raw[..start];
    let mut a = after.chars();
    let mut b = before.chars().rev();
    (a.next() == Some('.') && is_digit(a.next())) || (b.next() == Some('.') && is_digit(b.next()))
}

fn fallback_label(raw: &str, spec: &LabelSpec) -> Option<String> {
    let trim_punct = |s: &str| s.trim_matches(|c: char| !c.is_alphanumeric()).to_string();
    if let Some(l) = label_re()
        .captures_iter(raw)
        .map(|c| trim_punct(&c[1]))
        .find(|l| spec.allowed.contains(l))
    {
        return Some(l);
    }
    // earliest whole-word occurrence of any allowed label
    spec.allowed
        .iter()
        .filter_map(|label| {
            let re = Regex::new(&format!(r"\b{}\b", regex::escape(label))).ok()?;
            re.find(raw).map(|m| (m.start(), label.clone()))
        })
        .min()
        .map(|(_, l)| l)
}

fn fallback(raw: &str, schema: &OutputSchema) -> StructuredOutput {
    let mut out = StructuredOutput::failed(raw);
    let mut found_any = false;
    if let Some(spec) = &schema.score {
        out.score = fallback_score(raw, spec);
        if out.score.is_none() {
            return StructuredOutput::failed(raw);
        }
        found_any = true;
    }
    if let Some(spec) = &schema.label {
        out.label = fallback_label(raw, spec);
        if out.label.is_none() {
            return StructuredOutput::failed(raw);
        }
        found_any = true;
    }
    if schema.count {
        out.count = count_re().captures(raw).and_then(|c| c[1].parse().ok());
        if out.count.is_none() {
            return StructuredOutput::failed(raw);
        }
        found_any = true;
    }
    if schema.quotes {
        out.quotes = quote_re()
            .captures_iter(raw)
            .filter_map(|c| c.get(1).or_else(|| c.get(2)))
            .map(|m| m.as_str().to_string())
            .collect();
        found_any |= !out.quotes.is_empty();
    }
    if !found_any {
        return StructuredOutput::failed(raw);
    }
    out.parse_mode = ParseMode::FallbackRegex;
    out
}

/// Parses a raw model output against `schema`.
///
/// JSON takes precedence: the first JSON object that carries any schema
/// field decides the outcome, and if it violates the schema (missing value
/// field, out-of-range score, unknown label) the result is `Failed` rather
/// than a regex guess. Regexes are consulted only when no such object
/// exists.
pub fn parse_structured(raw: &str, schema: &OutputSchema) -> StructuredOutput {
    let fields = schema.field_names();
    if let Some(obj) = json_objects(raw).find(|m| fields.iter().any(|f| m.contains_key(*f))) {
        return from_json(&obj, schema, raw);
    }
    fallback(raw, schema)
}

pub fn extract_score(raw: &str, bounds: [f64; 2]) -> Option<f64> {
    parse_structured(raw, &OutputSchema::score(bounds[0], bounds[1])).score
}

/// Rule for combining two scoring passes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TabulationPolicy {
    /// Largest absolute difference that is still averaged; anything wider
    /// goes to adjudication.
    pub max_diff: f64,
}

impl Default for TabulationPolicy {
    fn default() -> Self {
        TabulationPolicy { max_diff: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TabulationFlag {
    Ok,
    Adjudicate,
    Missing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tabulated {
    pub value: Option<f64>,
    pub flag: TabulationFlag,
}

pub fn tabulate_passes(a: Option<f64>, b: Option<f64>, policy: TabulationPolicy) -> Tabulated {
    match (a, b) {
        (Some(a), Some(b)) if (a - b).abs() <= policy.max_diff => Tabulated {
            value: Some((a + b) / 2.0),
            flag: TabulationFlag::Ok,
        },
        (Some(_), Some(_)) => Tabulated {
            value: None,
            flag: TabulationFlag::Adjudicate,
        },
        _ => Tabulated {
            value: None,
            flag: TabulationFlag::Missing,
        },
    }
}

fn squash_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// For each quote, whether it occurs in `source` after collapsing runs of
/// whitespace on both sides. Advisory only.
pub fn verify_quotes(quotes: &[String], source: &str) -> Vec<bool> {
    let hay = squash_ws(source);
    quotes
        .iter()
        .map(|q| {
            let needle = squash_ws(q);
            !needle.is_empty() && hay.contains(&needle)
        })
        .collect()
}

/// Derived cell values for one parsed output, keyed by field suffix
/// (`score`, `label`, `count`, `quotes`, `parse`).
pub fn derived_cells(out: &StructuredOutput, schema: &OutputSchema) -> BTreeMap<&'static str, String> {
    let mut cells = BTreeMap::new();
    if schema.score.is_some() {
        cells.insert("score", out.score.map(format_number).unwrap_or_default());
    }
    if schema.label.is_some() {
        cells.insert("label", out.label.clone().unwrap_or_default());
    }
    if schema.count {
        cells.insert("count", out.count.map(|c| c.to_string()).unwrap_or_default());
    }
    if schema.quotes {
        let q = if out.parse_mode == ParseMode::Failed {
            String::new()
        } else {
            serde_json::to_string(&out.quotes).expect("strings serialize")
        };
        cells.insert("quotes", q);
    }
    cells.insert("parse", out.parse_mode.as_str().to_string());
    cells
}

/// Integers print without a decimal point.
pub fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}
