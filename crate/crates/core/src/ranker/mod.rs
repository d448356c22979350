//! Pointer-sum candidate scoring.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corpus::CandidateOccurrences;
use crate::error::{DgrError, Result};

/// `y = softmax(q_idx . d_i)` over unmasked document positions, `[1 x n]`.
pub fn token_distribution(tape: &mut Tape<'_>, doc: Var, query: Var, idx: usize, doc_mask: &[bool]) -> Result<Var> {
    let m = tape.value(query).rows();
    if idx >= m {
        return Err(DgrError::contract(format!(
            "placeholder index {idx} outside query of length {m}"
        )));
    }
    let q = tape.row(query, idx)?;
    let dt = tape.transpose(doc)?;
    let scores = tape.matmul(q, dt)?;
    tape.masked_softmax_rows(scores, doc_mask)
}

/// Raw scores `q_idx . d_i` before normalisation, as values.
pub fn placeholder_scores(tape: &Tape<'_>, doc: Var, query: Var, idx: usize) -> Vec<f64> {
    let (d, q) = (tape.value(doc), tape.value(query));
    let qi = q.row_slice(idx);
    (0..d.rows())
        .map(|i| d.row_slice(i).iter().zip(qi).map(|(a, b)| a * b).sum())
        .collect()
}

/// `p(c)` proportional to the summed token probability at c's positions,
/// renormalised over candidates. `[1 x g]`.
pub fn aggregate_candidates(tape: &mut Tape<'_>, y: Var, occ: &CandidateOccurrences) -> Result<Var> {
    let sums = tape.pointer_sum(y, &occ.positions)?;
    tape.normalize(sums)
}

/// Value-level counterpart of [`aggregate_candidates`].
pub fn aggregate_values(y: &[f64], occ: &CandidateOccurrences) -> Result<Vec<f64>> {
    if occ.is_empty() {
        return Err(DgrError::contract("pointer sum over an empty candidate set"));
    }
    let mut sums = Vec::with_capacity(occ.len());
    for group in &occ.positions {
        let mut acc = 0.0;
        for &i in group {
            acc += *y
                .get(i)
                .ok_or_else(|| DgrError::contract(format!("position {i} outside document of {}", y.len())))?;
        }
        sums.push(acc);
    }
    let total: f64 = sums.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(DgrError::Numerical(format!(
            "candidate mass {total} cannot be normalised"
        )));
    }
    Ok(sums.into_iter().map(|s| s / total).collect())
}

/// Index of the most probable candidate; ties go to the lexicographically
/// smallest string.
pub fn predict(candidates: &[String], probs: &[f64]) -> Result<usize> {
    if candidates.is_empty() || candidates.len() != probs.len() {
        return Err(DgrError::contract(format!(
            "{} candidates with {} probabilities",
            candidates.len(),
            probs.len()
        )));
    }
    let mut best = 0;
    for i in 1..candidates.len() {
        if probs[i] > probs[best] || (probs[i] == probs[best] && candidates[i] < candidates[best]) {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionDistribution {
    pub token_probs: Vec<f64>,
    pub candidate_probs: Vec<(String, f64)>,
    pub predicted: String,
}

/// One line of a prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub predicted: String,
    pub gold: Option<String>,
    pub candidate_probs: BTreeMap<String, f64>,
    pub doc_len: usize,
    pub query_len: usize,
}

impl PredictionRecord {
    pub fn correct(&self) -> Option<bool> {
        self.gold.as_ref().map(|g| *g == self.predicted)
    }
}

pub fn write_predictions(records: &[PredictionRecord], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| DgrError::io(path, e))?;
    }
    fs::write(path, out).map_err(|e| DgrError::io(path, e))
}

pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DgrError::Record {
                line: i + 1,
                reason: format!("bad prediction record: {e}"),
            })
        })
        .collect()
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    parse_predictions(&fs::read_to_string(path).map_err(|e| DgrError::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn two_candidate_split() {
        let occ = CandidateOccurrences {
            positions: vec![vec![0, 3], vec![1, 2]],
        };
        let p = aggregate_values(&[0.1, 0.2, 0.3, 0.4], &occ).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn argmax_and_ties() {
        assert_eq!(predict(&s(&["a", "b"]), &[0.7, 0.3]).unwrap(), 0);
        assert_eq!(predict(&s(&["b", "a"]), &[0.5, 0.5]).unwrap(), 1);
        assert_eq!(predict(&s(&["z"]), &[1.0]).unwrap(), 0);
        assert!(predict(&[], &[]).is_err());
    }

    #[test]
    fn prediction_records_round_trip() {
        let r = PredictionRecord {
            sample_id: "x".into(),
            predicted: "a".into(),
            gold: Some("b".into()),
            candidate_probs: [("a".to_string(), 0.6), ("b".to_string(), 0.4)].into_iter().collect(),
            doc_len: 5,
            query_len: 2,
        };
        let line = serde_json::to_string(&r).unwrap();
        assert_eq!(parse_predictions(&line).unwrap(), vec![r.clone()]);
        assert_eq!(r.correct(), Some(false));
    }
}
