//! Agreement statistics between two rating columns.
//!
//! Values are trimmed and compared case-sensitively. A row where either
//! side is empty is dropped and counted in `n_missing`; it never becomes a
//! category of its own.
//!
//! Kappa is unweighted Cohen's kappa. When chance agreement is total
//! (both raters used one and the same category throughout) the formula is
//! 0/0; the report then gives 1.0 if the raters agree everywhere and no
//! kappa otherwise, with a note saying which case applied.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::store::SegmentTable;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IrrError {
    #[error("no rows with both ratings present")]
    InsufficientData,
    #[error("row {row}: {value:?} is not an integer count")]
    Type { row: usize, value: String },
    #[error("columns differ in length ({a} vs {b})")]
    LengthMismatch { a: usize, b: usize },
    #[error("no column named {0:?}")]
    MissingColumn(String),
}

pub type Result<T, E = IrrError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatingKind {
    Categorical,
    IntegerCount,
}

impl RatingKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "categorical" => Some(RatingKind::Categorical),
            "count" | "integer_count" => Some(RatingKind::IntegerCount),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingPairs {
    pub kind: RatingKind,
    pub pairs: Vec<(String, String)>,
    pub n_total: usize,
    pub n_missing: usize,
}

impl RatingPairs {
    /// Pairs up two equally long columns. Count columns are checked to hold
    /// integers.
    pub fn from_columns<A, B>(kind: RatingKind, a: &[A], b: &[B]) -> Result<Self>
    where
        A: AsRef<str>,
        B: AsRef<str>,
    {
        if a.len() != b.len() {
            return Err(IrrError::LengthMismatch { a: a.len(), b: b.len() });
        }
        let mut pairs = Vec::with_capacity(a.len());
        let mut n_missing = 0;
        for (row, (x, y)) in a.iter().zip(b).enumerate() {
            let (x, y) = (x.as_ref().trim(), y.as_ref().trim());
            if x.is_empty() || y.is_empty() {
                n_missing += 1;
                continue;
            }
            if kind == RatingKind::IntegerCount {
                for v in [x, y] {
                    parse_count(v).ok_or_else(|| IrrError::Type { row, value: v.to_string() })?;
                }
            }
            pairs.push((x.to_string(), y.to_string()));
        }
        Ok(RatingPairs {
            kind,
            pairs,
            n_total: a.len(),
            n_missing,
        })
    }

    pub fn from_table(table: &SegmentTable, kind: RatingKind, col_a: &str, col_b: &str) -> Result<Self> {
        let a = table
            .column_values(col_a)
            .map_err(|_| IrrError::MissingColumn(col_a.to_string()))?;
        let b = table
            .column_values(col_b)
            .map_err(|_| IrrError::MissingColumn(col_b.to_string()))?;
        Self::from_columns(kind, &a, &b)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn nonempty(&self) -> Result<usize> {
        match self.pairs.len() {
            0 => Err(IrrError::InsufficientData),
            n => Ok(n),
        }
    }
}

/// Accepts `3`, `-1` and integral floats such as `3.0`.
fn parse_count(v: &str) -> Option<i64> {
    if let Ok(n) = v.parse::<i64>() {
        return Some(n);
    }
    let f: f64 = v.parse().ok()?;
    (f.is_finite() && f.fract() == 0.0 && f.abs() < 9.0e15).then_some(f as i64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub value: Option<f64>,
    pub p_o: f64,
    pub p_e: f64,
    pub degenerate: bool,
}

impl Kappa {
    pub fn note(&self) -> Option<&'static str> {
        match (self.degenerate, self.value) {
            (false, _) => None,
            (true, Some(_)) => Some("degenerate marginals: both raters used one category and agree on every row; kappa reported as 1.0"),
            (true, None) => Some("degenerate marginals: chance agreement is 1, kappa undefined"),
        }
    }
}

pub fn cohens_kappa(pairs: &RatingPairs) -> Result<Kappa> {
    let n = pairs.nonempty()?;
    let mut agree = 0usize;
    let mut margin_a: BTreeMap<&str, usize> = BTreeMap::new();
    let mut margin_b: BTreeMap<&str, usize> = BTreeMap::new();
    for (a, b) in &pairs.pairs {
        agree += usize::from(a == b);
        *margin_a.entry(a).or_default() += 1;
        *margin_b.entry(b).or_default() += 1;
    }
    let chance: usize = margin_a
        .iter()
        .map(|(c, ca)| ca * margin_b.get(c).copied().unwrap_or(0))
        .sum();
    let nn = (n * n) as f64;
    let p_o = agree as f64 / n as f64;
    let p_e = chance as f64 / nn;
    let degenerate = chance == n * n;
    let value = if degenerate {
        (agree == n).then_some(1.0)
    } else {
        Some((p_o - p_e) / (1.0 - p_e))
    };
    Ok(Kappa {
        value,
        p_o,
        p_e,
        degenerate,
    })
}

pub fn percent_agreement(pairs: &RatingPairs) -> Result<f64> {
    let n = pairs.nonempty()?;
    let agree = pairs.pairs.iter().filter(|(a, b)| a == b).count();
    Ok(agree as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    /// Sorted observed alphabet; rows are rater A, columns rater B.
    pub labels: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

pub fn confusion_matrix(pairs: &RatingPairs) -> Confusion {
    let labels: Vec<String> = pairs
        .pairs
        .iter()
        .flat_map(|(a, b)| [a.clone(), b.clone()])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let pos: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut counts = vec![vec![0; labels.len()]; labels.len()];
    for (a, b) in &pairs.pairs {
        counts[pos[a.as_str()]][pos[b.as_str()]] += 1;
    }
    Confusion { labels, counts }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountAgreement {
    pub exact_agreement: f64,
    pub mean_signed_diff: f64,
    pub mean_abs_diff: f64,
    pub max_abs_diff: u64,
}

pub fn count_agreement(pairs: &RatingPairs) -> Result<CountAgreement> {
    let n = pairs.nonempty()?;
    let mut exact = 0usize;
    let mut signed = 0i64;
    let mut abs = 0u64;
    let mut max = 0u64;
    for (row, (a, b)) in pairs.pairs.iter().enumerate() {
        let parse = |v: &String| parse_count(v).ok_or_else(|| IrrError::Type { row, value: v.clone() });
        let d = parse(a)? - parse(b)?;
        exact += usize::from(d == 0);
        signed += d;
        abs += d.unsigned_abs();
        max = max.max(d.unsigned_abs());
    }
    Ok(CountAgreement {
        exact_agreement: exact as f64 / n as f64,
        mean_signed_diff: signed as f64 / n as f64,
        mean_abs_diff: abs as f64 / n as f64,
        max_abs_diff: max,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrrReport {
    pub kind: RatingKind,
    pub n: usize,
    pub n_total: usize,
    pub n_missing: usize,
    pub percent_agreement: f64,
    pub kappa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa_note: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confusion: Option<Confusion>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_agreement: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_signed_diff: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_abs_diff: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_abs_diff: Option<u64>,
}

/// Full report for `pairs`. Count columns also get kappa, treating each
/// count as a nominal category.
pub fn report(pairs: &RatingPairs) -> Result<IrrReport> {
    let kappa = cohens_kappa(pairs)?;
    let mut report = IrrReport {
        kind: pairs.kind,
        n: pairs.len(),
        n_total: pairs.n_total,
        n_missing: pairs.n_missing,
        percent_agreement: percent_agreement(pairs)?,
        kappa: kappa.value,
        kappa_note: kappa.note().map(str::to_string),
        confusion: None,
        exact_agreement: None,
        mean_signed_diff: None,
        mean_abs_diff: None,
        max_abs_diff: None,
    };
    match pairs.kind {
        RatingKind::Categorical => report.confusion = Some(confusion_matrix(pairs)),
        RatingKind::IntegerCount => {
            let c = count_agreement(pairs)?;
            report.exact_agreement = Some(c.exact_agreement);
            report.mean_signed_diff = Some(c.mean_signed_diff);
            report.mean_abs_diff = Some(c.mean_abs_diff);
            report.max_abs_diff = Some(c.max_abs_diff);
        }
    }
    Ok(report)
}

impl fmt::Display for IrrReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n = {} (of {}, {} missing)", self.n, self.n_total, self.n_missing)?;
        writeln!(f, "percent agreement = {:.3}", self.percent_agreement)?;
        match self.kappa {
            Some(k) => writeln!(f, "Cohen's kappa = {k:.3}")?,
            None => writeln!(f, "Cohen's kappa = undefined")?,
        }
        if let Some(note) = &self.kappa_note {
            writeln!(f, "note: {note}")?;
        }
        if let Some(c) = &self.confusion {
            let labels: Vec<String> = c.labels.iter().map(|l| clip(l, 16)).collect();
            let width = labels.iter().map(|l| l.chars().count()).max().unwrap_or(1).max(5);
            write!(f, "{:width$}", "A \\ B")?;
            for l in &labels {
                write!(f, "  {l:>width$}")?;
            }
            writeln!(f)?;
            for (l, row) in labels.iter().zip(&c.counts) {
                write!(f, "{l:width$}")?;
                for v in row {
                    write!(f, "  {v:>width$}")?;
                }
                writeln!(f)?;
            }
        }
        if let (Some(e), Some(s), Some(a), Some(m)) = (
            self.exact_agreement,
            self.mean_signed_diff,
            self.mean_abs_diff,
            self.max_abs_diff,
        ) {
            writeln!(f, "exact agreement = {e:.4}")?;
            writeln!(f, "mean signed diff = {s:.4}")?;
            writeln!(f, "mean abs diff = {a:.4}")?;
            writeln!(f, "max abs diff = {m}")?;
        }
        Ok(())
    }
}

fn clip(label: &str, max: usize) -> String {
    if label.chars().count() <= max {
        label.to_string()
    } else {
        let head: String = label.chars().take(max - 1).collect();
        format!("{head}…")
    }
}
