//! Normalised JSON-lines format shared by WDW exports and synthetic data.
//!
//! One object per line: `{"id"?, "document": [..], "query": [..],
//! "candidates": [..], "answer"?}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{dedup_candidates, Casing, ClozeSample, DatasetSplit};
use crate::error::{DgrError, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub document: Vec<String>,
    pub query: Vec<String>,
    pub candidates: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

impl From<&ClozeSample> for JsonRecord {
    fn from(s: &ClozeSample) -> Self {
        JsonRecord {
            id: Some(s.id.clone()),
            document: s.document.clone(),
            query: s.query.clone(),
            candidates: s.candidates.clone(),
            answer: s.answer.clone(),
        }
    }
}

/// Parses and validates a single record. `line` is 1-based.
pub fn parse_record(text: &str, line: usize, split: &str, casing: Casing) -> Result<ClozeSample> {
    let rec: JsonRecord = serde_json::from_str(text).map_err(|e| DgrError::Record {
        line,
        reason: format!("malformed record: {e}"),
    })?;
    let candidates = dedup_candidates(rec.candidates, &format!("{split} line {line}"));
    let id = rec.id.unwrap_or_else(|| format!("{split}-{line}"));
    ClozeSample::new(id, rec.document, rec.query, candidates, rec.answer)
        .and_then(|s| s.with_casing(casing))
        .map_err(|reason| DgrError::Record { line, reason })
}

pub fn parse_jsonl(text: &str, name: &str, casing: Casing) -> Result<DatasetSplit> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        samples.push(parse_record(line, i + 1, name, casing)?);
    }
    if samples.is_empty() {
        log::warn!("{name}: no samples found");
    }
    Ok(DatasetSplit::new(name, samples))
}

pub fn load_jsonl(path: &Path, name: &str, casing: Casing) -> Result<DatasetSplit> {
    let text = fs::read_to_string(path).map_err(|e| DgrError::io(path, e))?;
    parse_jsonl(&text, name, casing)
}

pub fn to_jsonl(split: &DatasetSplit) -> Result<String> {
    let mut out = String::new();
    for s in &split.samples {
        out.push_str(&serde_json::to_string(&JsonRecord::from(s))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_jsonl(split: &DatasetSplit, path: &Path) -> Result<()> {
    fs::write(path, to_jsonl(split)?).map_err(|e| DgrError::io(path, e))
}
