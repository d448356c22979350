//! Cloze samples, their on-disk formats, vocabularies and a synthetic task
//! generator.

mod cbt;
mod jsonl;
mod synthetic;
mod vocab;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::DataFormat;
use crate::error::{DgrError, Result};

pub use cbt::{parse_cbt, CBT_CANDIDATES, CBT_DOC_LINES, CBT_MARKER};
pub use jsonl::{load_jsonl, parse_jsonl, parse_record, save_jsonl, to_jsonl, JsonRecord};
pub use synthetic::{generate_synthetic, SyntheticConfig};
pub use vocab::{build_vocab, Vocabulary, PAD_ID, PAD_TOKEN, PLACEHOLDER_ID, UNK_ID, UNK_TOKEN};

/// Reads a split, picking the layout from the extension under
/// [`DataFormat::Auto`]: `.jsonl`/`.json` are JSON lines, anything else CBT.
pub fn load_split(path: &Path, format: DataFormat, name: &str, casing: Casing) -> Result<DatasetSplit> {
    let jsonl = match format {
        DataFormat::Jsonl => true,
        DataFormat::Cbt => false,
        DataFormat::Auto => matches!(path.extension().and_then(|e| e.to_str()), Some("jsonl" | "json")),
    };
    let text = fs::read_to_string(path).map_err(|e| DgrError::io(path, e))?;
    if jsonl {
        parse_jsonl(&text, name, casing)
    } else {
        parse_cbt(&text, name, casing)
    }
}

/// Internal blank marker inside queries.
pub const PLACEHOLDER: &str = "@placeholder";

/// Whether loaders fold tokens to lowercase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Casing {
    #[default]
    Lower,
    /// Keep source casing; only the rule-based disambiguator needs this.
    Preserve,
}

/// One `(document, query, candidates, answer)` tuple.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClozeSample {
    pub id: String,
    pub document: Vec<String>,
    pub query: Vec<String>,
    pub candidates: Vec<String>,
    pub answer: Option<String>,
    pub placeholder_index: usize,
}

fn check_token(kind: &str, pos: usize, tok: &str) -> Result<(), String> {
    if tok.is_empty() {
        return Err(format!("{kind} token {pos} is empty"));
    }
    if tok.chars().any(char::is_whitespace) {
        return Err(format!("{kind} token {pos} ({tok:?}) contains whitespace"));
    }
    Ok(())
}

impl ClozeSample {
    /// Builds a sample, locating the placeholder and enforcing every invariant.
    pub fn new(
        id: impl Into<String>,
        document: Vec<String>,
        query: Vec<String>,
        candidates: Vec<String>,
        answer: Option<String>,
    ) -> Result<Self, String> {
        let placeholder_index = query
            .iter()
            .position(|t| t == PLACEHOLDER)
            .ok_or("query has no @placeholder token")?;
        let s = ClozeSample {
            id: id.into(),
            document,
            query,
            candidates,
            answer,
            placeholder_index,
        };
        s.validate()?;
        Ok(s)
    }

    /// Checks the sample invariants, returning the first violation.
    pub fn validate(&self) -> Result<(), String> {
        if self.document.is_empty() {
            return Err("document is empty".into());
        }
        if self.query.is_empty() {
            return Err("query is empty".into());
        }
        for (i, t) in self.document.iter().enumerate() {
            check_token("document", i, t)?;
        }
        for (i, t) in self.query.iter().enumerate() {
            check_token("query", i, t)?;
        }
        let count = self.query.iter().filter(|t| *t == PLACEHOLDER).count();
        if count != 1 {
            return Err(format!("query must contain exactly one {PLACEHOLDER}, found {count}"));
        }
        if self.query.get(self.placeholder_index).map(String::as_str) != Some(PLACEHOLDER) {
            return Err(format!(
                "placeholder_index {} does not point at {PLACEHOLDER}",
                self.placeholder_index
            ));
        }
        if self.candidates.is_empty() {
            return Err("candidate set is empty".into());
        }
        for (i, c) in self.candidates.iter().enumerate() {
            check_token("candidate", i, c).map_err(|e| format!("{e}; multi-token candidates are not supported"))?;
            if c == PLACEHOLDER {
                return Err("candidate equals the placeholder token".into());
            }
            if self.candidates[..i].contains(c) {
                return Err(format!("duplicate candidate {c:?}"));
            }
            let lc = c.to_lowercase();
            if !self.document.iter().any(|t| t.to_lowercase() == lc) {
                return Err(format!("candidate {c:?} does not occur in the document"));
            }
        }
        if let Some(a) = &self.answer {
            if !self.candidates.contains(a) {
                return Err(format!("answer {a:?} is not among the candidates"));
            }
        }
        Ok(())
    }

    pub fn doc_len(&self) -> usize {
        self.document.len()
    }

    pub fn query_len(&self) -> usize {
        self.query.len()
    }

    pub fn answer_index(&self) -> Option<usize> {
        let a = self.answer.as_ref()?;
        self.candidates.iter().position(|c| c == a)
    }

    /// Document positions of each candidate, by exact token equality.
    pub fn occurrences(&self) -> CandidateOccurrences {
        CandidateOccurrences {
            positions: self
                .candidates
                .iter()
                .map(|c| {
                    self.document
                        .iter()
                        .enumerate()
                        .filter(|(_, t)| *t == c)
                        .map(|(i, _)| i)
                        .collect()
                })
                .collect(),
        }
    }

    /// Applies `casing`. Folding can create a second placeholder or a
    /// placeholder candidate, so the result is checked again.
    pub fn with_casing(self, casing: Casing) -> Result<Self, String> {
        match casing {
            Casing::Preserve => Ok(self),
            Casing::Lower => {
                let s = self.lowercased();
                s.validate().map_err(|e| format!("after lowercasing: {e}"))?;
                Ok(s)
            }
        }
    }

    /// Lowercased copy. Candidates that collide after folding are merged.
    pub fn lowercased(&self) -> Self {
        let lower = |v: &[String]| v.iter().map(|t| t.to_lowercase()).collect::<Vec<_>>();
        let mut candidates: Vec<String> = Vec::with_capacity(self.candidates.len());
        for c in lower(&self.candidates) {
            if !candidates.contains(&c) {
                candidates.push(c);
            }
        }
        ClozeSample {
            id: self.id.clone(),
            document: lower(&self.document),
            query: self
                .query
                .iter()
                .map(|t| if t == PLACEHOLDER { t.clone() } else { t.to_lowercase() })
                .collect(),
            candidates,
            answer: self.answer.as_ref().map(|a| a.to_lowercase()),
            placeholder_index: self.placeholder_index,
        }
    }
}

/// Per candidate, sorted document positions where it occurs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateOccurrences {
    pub positions: Vec<Vec<usize>>,
}

impl CandidateOccurrences {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// A named list of samples (train / dev / test).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub name: String,
    pub samples: Vec<ClozeSample>,
}

impl DatasetSplit {
    pub fn new(name: impl Into<String>, samples: Vec<ClozeSample>) -> Self {
        DatasetSplit {
            name: name.into(),
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn lowercased(&self) -> Self {
        DatasetSplit {
            name: self.name.clone(),
            samples: self.samples.iter().map(ClozeSample::lowercased).collect(),
        }
    }
}

/// Drops repeated candidates, keeping first occurrences.
pub(crate) fn dedup_candidates(cands: Vec<String>, context: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(cands.len());
    for c in cands {
        if out.contains(&c) {
            log::warn!("{context}: duplicate candidate {c:?} removed");
        } else {
            out.push(c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn valid_sample_locates_placeholder() {
        let x = ClozeSample::new(
            "0",
            s(&["a", "b", "c"]),
            s(&["x", "@placeholder"]),
            s(&["b", "c"]),
            Some("b".into()),
        )
        .unwrap();
        assert_eq!(x.placeholder_index, 1);
        assert_eq!(x.occurrences().positions, vec![vec![1], vec![2]]);
    }

    #[test]
    fn invariant_violations_rejected() {
        let doc = s(&["a", "b", "c"]);
        assert!(ClozeSample::new("0", doc.clone(), s(&["x"]), s(&["b"]), None).is_err());
        assert!(ClozeSample::new("0", doc.clone(), s(&["@placeholder", "@placeholder"]), s(&["b"]), None).is_err());
        assert!(ClozeSample::new("0", doc.clone(), s(&["@placeholder"]), s(&["z"]), None).is_err());
        assert!(ClozeSample::new("0", doc.clone(), s(&["@placeholder"]), s(&["b"]), Some("c".into())).is_err());
        assert!(ClozeSample::new("0", doc.clone(), s(&["@placeholder"]), s(&["b", "b"]), None).is_err());
        assert!(ClozeSample::new("0", doc, s(&["@placeholder"]), s(&["b c"]), None).is_err());
    }

    #[test]
    fn lowercasing_keeps_placeholder() {
        let x = ClozeSample::new(
            "0",
            s(&["Jimmy", "Skunk"]),
            s(&["If", "@placeholder"]),
            s(&["Skunk", "Jimmy"]),
            Some("Skunk".into()),
        )
        .unwrap();
        let l = x.lowercased();
        assert_eq!(l.query, s(&["if", "@placeholder"]));
        assert_eq!(l.answer.as_deref(), Some("skunk"));
        l.validate().unwrap();
    }
}
