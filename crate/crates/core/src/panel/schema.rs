//! Declarative mapping from logical record fields to file columns.
//!
//! A schema is a key-value document (TOML). Every record kind has a table
//! mapping logical field names to the column names found in the delimited
//! file; omitted entries default to the logical name itself.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// File names for each record kind, relative to the panel directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PanelFiles {
    pub students: String,
    pub scores: String,
    pub teachers: String,
    pub employment: String,
}

impl Default for PanelFiles {
    fn default() -> Self {
        PanelFiles {
            students: "students.csv".into(),
            scores: "scores.csv".into(),
            teachers: "teachers.csv".into(),
            employment: "employment.csv".into(),
        }
    }
}

/// Column mapping and parsing conventions for a panel directory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PanelSchema {
    /// "," (default) or "tab".
    pub delimiter: Option<String>,
    /// Marker strings treated as missing, in addition to the empty string.
    pub missing_markers: Vec<String>,
    pub files: PanelFiles,
    pub students: BTreeMap<String, String>,
    pub scores: BTreeMap<String, String>,
    pub teachers: BTreeMap<String, String>,
    pub employment: BTreeMap<String, String>,
}

impl PanelSchema {
    pub fn from_path(path: &Path) -> Result<PanelSchema> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }

    pub fn delimiter_byte(&self) -> Result<u8> {
        match self.delimiter.as_deref() {
            None | Some(",") | Some("comma") => Ok(b','),
            Some("\t") | Some("tab") => Ok(b'\t'),
            Some(other) => Err(Error::Schema(format!(
                "unsupported delimiter {other:?}; use comma or tab"
            ))),
        }
    }

    pub fn is_missing(&self, raw: &str) -> bool {
        let raw = raw.trim();
        raw.is_empty() || self.missing_markers.iter().any(|m| m == raw)
    }

    /// Column name for `field` of a record kind, defaulting to the field name.
    pub fn column<'a>(&'a self, kind: RecordKind, field: &'a str) -> &'a str {
        let map = match kind {
            RecordKind::Students => &self.students,
            RecordKind::Scores => &self.scores,
            RecordKind::Teachers => &self.teachers,
            RecordKind::Employment => &self.employment,
        };
        map.get(field).map(String::as_str).unwrap_or(field)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Students,
    Scores,
    Teachers,
    Employment,
}

impl RecordKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RecordKind::Students => "students",
            RecordKind::Scores => "scores",
            RecordKind::Teachers => "teachers",
            RecordKind::Employment => "employment",
        }
    }
}
