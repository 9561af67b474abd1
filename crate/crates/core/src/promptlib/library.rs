use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{PromptError, PromptTemplate};
use crate::content_hash;

/// One line of `index.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub name: String,
    pub hash: String,
    pub saved_at: DateTime<Utc>,
}

/// Directory of versioned templates: `<root>/<name>/<hash>.txt` plus an
/// append-only `<root>/index.jsonl`. The newest version of a name is the
/// last index line naming it.
#[derive(Debug, Clone)]
pub struct PromptLibrary {
    root: PathBuf,
}

impl PromptLibrary {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        PromptLibrary { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn index_path(&self) -> PathBuf {
        self.root.join("index.jsonl")
    }

    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PromptError + '_ {
        move |source| PromptError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Stores the body under its hash and makes it the current version of
    /// its name. Saving the current version again changes nothing.
    pub fn save(&self, template: &PromptTemplate) -> Result<IndexEntry, PromptError> {
        let dir = self.root.join(&template.name);
        std::fs::create_dir_all(&dir).map_err(Self::io(&dir))?;
        let file = dir.join(format!("{}.txt", template.version_hash));
        if !file.exists() {
            crate::store::write_atomic(&file, template.body.as_bytes()).map_err(|e| {
                PromptError::Io {
                    path: file.clone(),
                    source: std::io::Error::other(e.to_string()),
                }
            })?;
        }
        let current = self.list()?.into_iter().rev().find(|e| e.name == template.name);
        if let Some(entry) = current.filter(|e| e.hash == template.version_hash) {
            return Ok(entry);
        }
        let entry = IndexEntry {
            name: template.name.clone(),
            hash: template.version_hash.clone(),
            saved_at: Utc::now(),
        };
        let index = self.index_path();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&index)
            .map_err(Self::io(&index))?;
        let line = serde_json::to_string(&entry).expect("IndexEntry serializes") + "\n";
        f.write_all(line.as_bytes()).map_err(Self::io(&index))?;
        Ok(entry)
    }

    /// All index entries in save order. Unreadable lines are skipped.
    pub fn list(&self) -> Result<Vec<IndexEntry>, PromptError> {
        let index = self.index_path();
        let text = match std::fs::read_to_string(&index) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Self::io(&index)(e)),
        };
        Ok(text
            .lines()
            .filter_map(|l| serde_json::from_str(l).ok())
            .collect())
    }

    /// Loads `name` at `hash`, or its most recently saved version. A hash
    /// prefix of at least 8 hex digits is accepted when unambiguous.
    pub fn load(&self, name: &str, hash: Option<&str>) -> Result<PromptTemplate, PromptError> {
        let hash = match hash {
            Some(h) => self.resolve_hash(name, h)?,
            None => self
                .list()?
                .into_iter()
                .rev()
                .find(|e| e.name == name)
                .map(|e| e.hash)
                .ok_or_else(|| PromptError::NotFound(name.to_string()))?,
        };
        let file = self.root.join(name).join(format!("{hash}.txt"));
        let body = match std::fs::read_to_string(&file) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(PromptError::NotFound(format!("{name}@{hash}")))
            }
            Err(e) => return Err(Self::io(&file)(e)),
        };
        if content_hash(&body) != hash {
            return Err(PromptError::InvalidTemplate(format!(
                "{} does not match its content hash",
                file.display()
            )));
        }
        PromptTemplate::new(name, body)
    }

    fn resolve_hash(&self, name: &str, prefix: &str) -> Result<String, PromptError> {
        let not_found = || PromptError::NotFound(format!("{name}@{prefix}"));
        let dir = self.root.join(name);
        if prefix.len() == 64 {
            return Ok(prefix.to_string());
        }
        if prefix.len() < 8 {
            return Err(not_found());
        }
        let entries = match std::fs::read_dir(&dir) {
            Ok(e) => e,
            Err(_) => return Err(not_found()),
        };
        let matches: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let n = e.file_name().to_string_lossy().into_owned();
                n.strip_suffix(".txt").map(str::to_string)
            })
            .filter(|h| h.starts_with(prefix))
            .collect();
        match matches.as_slice() {
            [one] => Ok(one.clone()),
            [] => Err(not_found()),
            _ => Err(PromptError::NotFound(format!("{name}@{prefix} (ambiguous)"))),
        }
    }
}
