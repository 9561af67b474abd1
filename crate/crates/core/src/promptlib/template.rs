use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::{Captures, Regex};
use serde::{Deserialize, Serialize};

use super::PromptError;
use crate::content_hash;
use crate::store::{Row, SegmentTable};

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{([A-Za-z0-9_]+)\}\}").unwrap())
}

fn name_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[A-Za-z0-9_\-][A-Za-z0-9_.\-]{0,127}$").unwrap())
}

/// Placeholder names in the order they occur (duplicates kept).
pub fn placeholders(body: &str) -> Vec<&str> {
    placeholder_re()
        .captures_iter(body)
        .map(|c| c.get(1).unwrap().as_str())
        .collect()
}

/// A prompt body with `{{column}}` placeholders, versioned by the SHA-256
/// of its bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
    pub declared_fields: BTreeSet<String>,
    pub version_hash: String,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Result<Self, PromptError> {
        let name = name.into();
        let body = body.into();
        if !name_re().is_match(&name) {
            return Err(PromptError::InvalidTemplate(format!(
                "template name {name:?} must match [A-Za-z0-9_.-]+"
            )));
        }
        let found = placeholders(&body);
        let data_slots = found.iter().filter(|p| **p == "data").count();
        if data_slots != 1 {
            return Err(PromptError::InvalidTemplate(format!(
                "{{{{data}}}} must appear exactly once, found {data_slots}"
            )));
        }
        let declared_fields = found.into_iter().map(str::to_string).collect();
        let version_hash = content_hash(&body);
        Ok(PromptTemplate {
            name,
            body,
            declared_fields,
            version_hash,
        })
    }

    /// First twelve hex digits of the version hash.
    pub fn short_hash(&self) -> &str {
        &self.version_hash[..12]
    }

    /// Fails with the first declared field that `table` lacks.
    pub fn check_table(&self, table: &SegmentTable) -> Result<(), PromptError> {
        match self.declared_fields.iter().find(|f| !table.has_column(f)) {
            Some(missing) => Err(PromptError::MissingField(missing.clone())),
            None => Ok(()),
        }
    }

    /// Substitutes every placeholder with the row's value, verbatim.
    ///
    /// Only the template is scanned, so `{{...}}` inside row values is never
    /// expanded.
    pub fn render(&self, row: &Row) -> Result<String, PromptError> {
        if let Some(missing) = self.declared_fields.iter().find(|f| !row.values.contains_key(*f)) {
            return Err(PromptError::MissingField(missing.clone()));
        }
        if row.data().trim().is_empty() {
            return Err(PromptError::EmptyData(row.index));
        }
        Ok(placeholder_re()
            .replace_all(&self.body, |c: &Captures| {
                row.values[c.get(1).unwrap().as_str()].clone()
            })
            .into_owned())
    }
}
