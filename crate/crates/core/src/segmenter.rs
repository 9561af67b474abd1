//! Splitting documents into analytic units.
//!
//! Input text is normalized first (BOM stripped, CRLF/CR to LF, trailing
//! whitespace removed from every line). Segment spans are character offsets
//! into the normalized text and each segment's text is exactly the
//! normalized text at its span, so a segment can always be located in its
//! source document.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::store::{infer_column, ColumnRole, SegmentTable, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum SegmentError {
    #[error("document {0:?} is empty after normalization")]
    EmptyDocument(String),
    #[error("invalid segmentation mode: {0}")]
    InvalidMode(String),
    #[error("document id must not be empty ({0})")]
    EmptyDocId(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    pub origin: PathBuf,
}

impl Document {
    pub fn new(
        doc_id: impl Into<String>,
        raw: &str,
        origin: impl Into<PathBuf>,
    ) -> Result<Self, SegmentError> {
        let doc_id = doc_id.into();
        let origin = origin.into();
        if doc_id.is_empty() {
            return Err(SegmentError::EmptyDocId(origin.display().to_string()));
        }
        Ok(Document {
            doc_id,
            text: normalize(raw),
            origin,
        })
    }

    /// Reads a UTF-8 text file; the doc id is the file stem.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, SegmentError> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|source| SegmentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Document::new(stem, &raw, path)
    }

    /// Substring at a character span.
    pub fn slice(&self, span: [usize; 2]) -> &str {
        let start = byte_offset(&self.text, span[0]);
        let end = byte_offset(&self.text, span[1]);
        &self.text[start..end]
    }
}

fn byte_offset(text: &str, char_idx: usize) -> usize {
    text.char_indices()
        .nth(char_idx)
        .map(|(b, _)| b)
        .unwrap_or(text.len())
}

pub fn normalize(raw: &str) -> String {
    let raw = raw.strip_prefix('\u{feff}').unwrap_or(raw);
    let unified = raw.replace("\r\n", "\n").replace('\r', "\n");
    unified
        .split('\n')
        .map(str::trim_end)
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub doc_id: String,
    pub index: usize,
    pub text: String,
    /// `[start, end)` in characters of the normalized document.
    pub span: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SegmentationMode {
    Paragraph,
    SpeakerTurn,
    Delimiter { token: String },
    SentenceCount { n: usize },
    EntireFile,
}

impl SegmentationMode {
    pub fn validate(&self) -> Result<(), SegmentError> {
        match self {
            SegmentationMode::Delimiter { token } if token.is_empty() => {
                Err(SegmentError::InvalidMode("delimiter token is empty".into()))
            }
            SegmentationMode::SentenceCount { n: 0 } => {
                Err(SegmentError::InvalidMode("sentence count must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Segmentation {
    pub segments: Vec<Segment>,
    pub warnings: Vec<String>,
}

fn speaker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^[ \t]*([\p{L}\p{N}_.'\-][\p{L}\p{N} _.'\-]{0,39}):(?:\s|$)").unwrap()
    })
}

/// Speaker label at the start of a transcript line, without the colon.
pub fn detect_speaker_line(line: &str) -> Option<&str> {
    let caps = speaker_re().captures(line)?;
    Some(caps.get(1)?.as_str().trim_end())
}

/// Byte range of `text[start..end]` with surrounding whitespace removed,
/// or `None` when nothing is left.
fn trimmed(text: &str, start: usize, end: usize) -> Option<(usize, usize)> {
    let piece = &text[start..end];
    let lead = piece.len() - piece.trim_start().len();
    let core = piece.trim();
    if core.is_empty() {
        None
    } else {
        Some((start + lead, start + lead + core.len()))
    }
}

/// `(start, end)` byte offsets of every line, excluding the newline.
fn line_ranges(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, b) in text.bytes().enumerate() {
        if b == b'\n' {
            out.push((start, i));
            start = i + 1;
        }
    }
    out.push((start, text.len()));
    out
}

fn paragraph_ranges(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut current: Option<(usize, usize)> = None;
    for (s, e) in line_ranges(text) {
        if text[s..e].trim().is_empty() {
            out.extend(current.take());
        } else {
            current = Some(match current {
                Some((cs, _)) => (cs, e),
                None => (s, e),
            });
        }
    }
    out.extend(current);
    out
}

fn speaker_ranges(text: &str) -> Option<Vec<(usize, usize)>> {
    let starts: Vec<usize> = line_ranges(text)
        .into_iter()
        .filter(|&(s, e)| detect_speaker_line(&text[s..e]).is_some())
        .map(|(s, _)| s)
        .collect();
    if starts.is_empty() {
        return None;
    }
    let mut bounds = Vec::with_capacity(starts.len() + 2);
    if starts[0] > 0 {
        bounds.push(0);
    }
    bounds.extend(&starts);
    bounds.push(text.len());
    Some(bounds.windows(2).map(|w| (w[0], w[1])).collect())
}

fn delimiter_ranges(text: &str, token: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for (pos, _) in text.match_indices(token) {
        out.push((start, pos));
        start = pos + token.len();
    }
    out.push((start, text.len()));
    out
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}')
}

/// End offsets (exclusive, in bytes) of each sentence.
///
/// A boundary is a run of `.`, `!` or `?`, optional closing quotes or
/// brackets, then whitespace followed by an uppercase letter or digit, or
/// the end of the text. There is no abbreviation list.
fn sentence_ends(text: &str) -> Vec<usize> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut ends = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if !matches!(chars[i].1, '.' | '!' | '?') {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        while j < chars.len() && matches!(chars[j].1, '.' | '!' | '?') {
            j += 1;
        }
        while j < chars.len() && is_closer(chars[j].1) {
            j += 1;
        }
        let end_byte = chars.get(j).map(|&(b, _)| b).unwrap_or(text.len());
        let mut k = j;
        while k < chars.len() && chars[k].1.is_whitespace() {
            k += 1;
        }
        let boundary = if k == chars.len() {
            true
        } else {
            k > j && (chars[k].1.is_uppercase() || chars[k].1.is_ascii_digit())
        };
        if boundary {
            ends.push(end_byte);
        }
        i = j.max(i + 1);
    }
    if ends.last() != Some(&text.len()) {
        ends.push(text.len());
    }
    ends
}

fn sentence_group_ranges(text: &str, n: usize) -> Vec<(usize, usize)> {
    let mut sentences = Vec::new();
    let mut start = 0;
    for end in sentence_ends(text) {
        if let Some(r) = trimmed(text, start, end) {
            sentences.push(r);
        }
        start = end;
    }
    sentences
        .chunks(n)
        .map(|group| (group[0].0, group[group.len() - 1].1))
        .collect()
}

/// Splits a normalized document into segments.
pub fn segment(doc: &Document, mode: &SegmentationMode) -> Result<Segmentation, SegmentError> {
    mode.validate()?;
    let text = doc.text.as_str();
    if text.trim().is_empty() {
        return Err(SegmentError::EmptyDocument(doc.doc_id.clone()));
    }
    let mut warnings = Vec::new();
    let whole = vec![(0, text.len())];
    let ranges = match mode {
        SegmentationMode::Paragraph => paragraph_ranges(text),
        SegmentationMode::SpeakerTurn => speaker_ranges(text).unwrap_or_else(|| {
            warnings.push(format!(
                "{}: no speaker lines detected, emitting the whole document as one segment",
                doc.doc_id
            ));
            whole.clone()
        }),
        SegmentationMode::Delimiter { token } => delimiter_ranges(text, token),
        SegmentationMode::SentenceCount { n } => sentence_group_ranges(text, *n),
        SegmentationMode::EntireFile => whole,
    };

    // Map byte offsets to char offsets once.
    let mut char_at_byte = vec![0usize; text.len() + 1];
    let mut count = 0;
    for (b, _) in text.char_indices() {
        char_at_byte[b] = count;
        count += 1;
    }
    char_at_byte[text.len()] = count;

    let segments = ranges
        .into_iter()
        .filter_map(|(s, e)| trimmed(text, s, e))
        .enumerate()
        .map(|(index, (s, e))| Segment {
            doc_id: doc.doc_id.clone(),
            index,
            text: text[s..e].to_string(),
            span: [char_at_byte[s], char_at_byte[e]],
        })
        .collect::<Vec<_>>();
    if segments.is_empty() {
        warnings.push(format!("{}: only delimiters, no segments emitted", doc.doc_id));
    }
    Ok(Segmentation { segments, warnings })
}

/// One row per segment: `doc_id`, `segment_index`, `data`, then one
/// column per context default, each filled with its constant value.
///
/// Rows are grouped by document in first-appearance order, then by segment
/// index.
pub fn to_table(
    segments: &[Segment],
    context_defaults: &[(String, String)],
) -> Result<SegmentTable, SegmentError> {
    for (name, _) in context_defaults {
        let spec = infer_column(name)?;
        if spec.role == ColumnRole::Output || spec.role == ColumnRole::Data {
            return Err(StoreError::Schema(format!("{name:?} cannot be a context column")).into());
        }
    }
    let mut header = vec!["doc_id", "segment_index", "data"];
    header.extend(context_defaults.iter().map(|(n, _)| n.as_str()));
    let mut table = SegmentTable::new(&header, PathBuf::new())?;

    let mut order: Vec<&str> = Vec::new();
    for s in segments {
        if !order.contains(&s.doc_id.as_str()) {
            order.push(&s.doc_id);
        }
    }
    let mut sorted: Vec<&Segment> = segments.iter().collect();
    sorted.sort_by_key(|s| (order.iter().position(|d| *d == s.doc_id), s.index));

    for s in sorted {
        let mut values = vec![s.doc_id.clone(), s.index.to_string(), s.text.clone()];
        values.extend(context_defaults.iter().map(|(_, v)| v.clone()));
        table.push_row(values)?;
    }
    Ok(table)
}
