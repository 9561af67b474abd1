use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PromptError, PromptTemplate};
use crate::extract::OutputSchema;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Construct {
    pub name: String,
    pub definition: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Level {
    pub label: String,
    pub criteria: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub input: String,
    pub expected_output: String,
}

/// Structured description of one construct to code for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    /// Template name; defaults to a slug of the construct name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub construct: Construct,
    #[serde(default)]
    pub indicators: Vec<String>,
    #[serde(default)]
    pub levels: Vec<Level>,
    #[serde(default)]
    pub few_shot: Vec<FewShotExample>,
    pub output_schema: OutputSchema,
}

impl Codebook {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| PromptError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.construct.name.trim().is_empty() {
            return Err(PromptError::Schema("construct name is empty".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.levels.iter().find(|l| !seen.insert(l.label.as_str())) {
            return Err(PromptError::Schema(format!("duplicate level label {:?}", dup.label)));
        }
        self.output_schema
            .validate()
            .map_err(|e| PromptError::Schema(e.to_string()))
    }

    pub fn template_name(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let mut slug = String::new();
        for c in self.construct.name.trim().chars() {
            if c.is_ascii_alphanumeric() {
                slug.push(c.to_ascii_lowercase());
            } else if !slug.ends_with('-') {
                slug.push('-');
            }
        }
        let slug = slug.trim_matches('-');
        if slug.is_empty() {
            "codebook".into()
        } else {
            slug.to_string()
        }
    }
}

/// Codebook text must not introduce placeholders into the template.
fn inert(text: &str) -> String {
    text.trim().replace("{{", "{ {").replace("}}", "} }")
}

fn output_instruction(schema: &OutputSchema, out: &mut String) {
    out.push_str(
        "Respond with a single JSON object and nothing else. The object must contain these fields:\n",
    );
    if let Some(s) = &schema.score {
        let _ = writeln!(
            out,
            "- \"score\": a number from {} to {}",
            crate::extract::format_number(s.min),
            crate::extract::format_number(s.max)
        );
    }
    if let Some(l) = &schema.label {
        let allowed: Vec<String> = l.allowed.iter().map(|a| format!("\"{}\"", inert(a))).collect();
        let _ = writeln!(out, "- \"label\": one of {}", allowed.join(", "));
    }
    if schema.count {
        out.push_str("- \"count\": the number of distinct mentions, a non-negative integer\n");
    }
    if schema.quotes {
        out.push_str(
            "- \"quotes\": an array of verbatim passages from the material that support your answer\n",
        );
    }
    if schema.rationale {
        out.push_str("- \"rationale\": a short written justification\n");
    }
}

/// Assembles a prompt template from a codebook.
///
/// Section order is fixed: construct definition, level rules, indicators,
/// output format, examples, then the `{{data}}` slot. Codebook text is
/// inserted verbatim except that `{{`/`}}` are broken up so the codebook can
/// never add placeholders.
pub fn build_from_codebook(codebook: &Codebook) -> Result<PromptTemplate, PromptError> {
    codebook.validate()?;
    let mut body = String::new();
    let _ = writeln!(body, "# Construct: {}", inert(&codebook.construct.name));
    body.push_str(&inert(&codebook.construct.definition));
    body.push_str("\n\n");

    if !codebook.levels.is_empty() {
        body.push_str("## Classification rules\n");
        for level in &codebook.levels {
            let _ = writeln!(body, "- {}: {}", inert(&level.label), inert(&level.criteria));
        }
        body.push('\n');
    }

    if !codebook.indicators.is_empty() {
        body.push_str("## Observable indicators\n");
        for ind in &codebook.indicators {
            let _ = writeln!(body, "- {}", inert(ind));
        }
        body.push('\n');
    }

    body.push_str("## Output format\n");
    output_instruction(&codebook.output_schema, &mut body);
    body.push('\n');

    if !codebook.few_shot.is_empty() {
        body.push_str("## Examples\n");
        for (i, ex) in codebook.few_shot.iter().enumerate() {
            let _ = write!(
                body,
                "### Example {}\nInput:\n{}\nExpected output:\n{}\n\n",
                i + 1,
                inert(&ex.input),
                inert(&ex.expected_output)
            );
        }
    }

    body.push_str("## Material to analyze\n{{data}}\n");
    PromptTemplate::new(codebook.template_name(), body)
}
