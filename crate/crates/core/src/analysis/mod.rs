//! Post-hoc analysis of predictions: accuracy by length, candidate-level
//! attention maps, and a paired significance test.

mod svg;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{CandidateOccurrences, ClozeSample};
use crate::error::{DgrError, Result};
use crate::ranker::PredictionRecord;
use crate::reader::AttentionTrace;

pub use svg::render_svg;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Document,
    Query,
}

impl FromStr for Axis {
    type Err = DgrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "document" | "doc" => Ok(Axis::Document),
            "query" => Ok(Axis::Query),
            _ => Err(DgrError::config("axis", format!("{s:?} is neither document nor query"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LengthBucketReport {
    pub axis: Axis,
    pub centers: Vec<usize>,
    pub counts: Vec<usize>,
    /// `None` for empty buckets.
    pub accuracy: Vec<Option<f64>>,
}

impl LengthBucketReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("center,count,accuracy\n");
        for ((c, n), a) in self.centers.iter().zip(&self.counts).zip(&self.accuracy) {
            match a {
                Some(a) => writeln!(s, "{c},{n},{a:.6}"),
                None => writeln!(s, "{c},{n},null"),
            }
            .expect("writing to a String");
        }
        s
    }
}

/// Index of the center closest to `len`; ties go to the lower center.
/// `centers` must be sorted ascending.
pub fn nearest_center(centers: &[usize], len: usize) -> usize {
    let mut best = 0;
    for (i, &c) in centers.iter().enumerate() {
        if c.abs_diff(len) < centers[best].abs_diff(len) {
            best = i;
        }
    }
    best
}

pub fn bucket_by_length(records: &[PredictionRecord], axis: Axis, centers: &[usize]) -> Result<LengthBucketReport> {
    let mut centers = centers.to_vec();
    centers.sort_unstable();
    centers.dedup();
    if centers.is_empty() {
        return Err(DgrError::config("centers", "at least one bucket center is required"));
    }
    let mut counts = vec![0usize; centers.len()];
    let mut hits = vec![0usize; centers.len()];
    for r in records {
        let correct = r
            .correct()
            .ok_or_else(|| DgrError::contract(format!("prediction {} has no gold answer", r.sample_id)))?;
        let len = match axis {
            Axis::Document => r.doc_len,
            Axis::Query => r.query_len,
        };
        let b = nearest_center(&centers, len);
        counts[b] += 1;
        hits[b] += correct as usize;
    }
    let accuracy = counts
        .iter()
        .zip(&hits)
        .map(|(&n, &h)| (n > 0).then(|| h as f64 / n as f64))
        .collect();
    Ok(LengthBucketReport {
        axis,
        centers,
        counts,
        accuracy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub sample_id: String,
    pub candidates: Vec<String>,
    pub query: Vec<String>,
    /// Per layer, a `[candidates x query]` map scaled to [0, 1].
    pub layers: Vec<Vec<Vec<f64>>>,
    /// Final-layer placeholder scores summed per candidate, scaled to [0, 1].
    pub placeholder: Vec<f64>,
}

/// Min-max scaling onto [0, 1]. A constant input maps to all zeros.
pub fn min_max(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

/// Sums energy rows over each candidate's document positions, per layer.
/// `placeholder_scores` are the final document encodings scored against
/// the placeholder's final query encoding.
pub fn export_attention(
    trace: &AttentionTrace,
    sample: &ClozeSample,
    occ: &CandidateOccurrences,
    placeholder_scores: &[f64],
) -> Result<AttentionExport> {
    let (n, m) = (sample.doc_len(), sample.query_len());
    if placeholder_scores.len() < n {
        return Err(DgrError::contract("placeholder scores shorter than the document"));
    }
    let mut layers = Vec::with_capacity(trace.hops.len());
    for hop in &trace.hops {
        let e = &hop.energy;
        if e.rows() < n || e.cols() < m {
            return Err(DgrError::contract(format!(
                "trace of shape {:?} does not cover a {n}x{m} sample",
                e.shape()
            )));
        }
        let mut flat: Vec<f64> = occ
            .positions
            .iter()
            .flat_map(|pos| (0..m).map(move |j| pos.iter().map(|&i| e.get(i, j)).sum::<f64>()))
            .collect();
        min_max(&mut flat);
        layers.push(flat.chunks(m.max(1)).map(<[f64]>::to_vec).collect());
    }
    let mut placeholder: Vec<f64> = occ
        .positions
        .iter()
        .map(|pos| pos.iter().map(|&i| placeholder_scores[i]).sum())
        .collect();
    min_max(&mut placeholder);
    Ok(AttentionExport {
        sample_id: sample.id.clone(),
        candidates: sample.candidates.clone(),
        query: sample.query.clone(),
        layers,
        placeholder,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct McNemarResult {
    /// System A right, B wrong.
    pub b: u64,
    /// System A wrong, B right.
    pub c: u64,
    pub p_value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

fn ln_factorial(n: u64) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Exact one-sided test of "A is better than B": `P(X >= b)` for
/// `X ~ Binomial(b + c, 1/2)`.
pub fn mcnemar_one_sided(b: u64, c: u64) -> McNemarResult {
    let n = b + c;
    if n == 0 {
        let w = "no discordant pairs; p-value set to 1".to_string();
        log::warn!("{w}");
        return McNemarResult {
            b,
            c,
            p_value: 1.0,
            warning: Some(w),
        };
    }
    let ln_n = ln_factorial(n);
    let ln_half = n as f64 * 0.5f64.ln();
    let terms: Vec<f64> = (b..=n)
        .map(|k| ln_n - ln_factorial(k) - ln_factorial(n - k) + ln_half)
        .collect();
    let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let p = top.exp() * terms.iter().map(|t| (t - top).exp()).sum::<f64>();
    McNemarResult {
        b,
        c,
        p_value: p.clamp(0.0, 1.0),
        warning: None,
    }
}

/// Discordant-pair counts between two prediction dumps aligned by sample id.
pub fn discordant_counts(a: &[PredictionRecord], b: &[PredictionRecord]) -> Result<(u64, u64)> {
    if a.len() != b.len() {
        return Err(DgrError::contract(format!(
            "prediction files differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let by_id: HashMap<&str, &PredictionRecord> = b.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    let (mut nb, mut nc) = (0, 0);
    for ra in a {
        let rb = by_id
            .get(ra.sample_id.as_str())
            .ok_or_else(|| DgrError::contract(format!("sample {} missing from second file", ra.sample_id)))?;
        if ra.gold != rb.gold {
            return Err(DgrError::contract(format!(
                "gold answers disagree for sample {}",
                ra.sample_id
            )));
        }
        let gold_missing = || DgrError::contract(format!("prediction {} has no gold answer", ra.sample_id));
        match (
            ra.correct().ok_or_else(gold_missing)?,
            rb.correct().ok_or_else(gold_missing)?,
        ) {
            (true, false) => nb += 1,
            (false, true) => nc += 1,
            _ => {}
        }
    }
    Ok((nb, nc))
}

pub fn mcnemar_from_predictions(a: &[PredictionRecord], b: &[PredictionRecord]) -> Result<McNemarResult> {
    let (nb, nc) = discordant_counts(a, b)?;
    Ok(mcnemar_one_sided(nb, nc))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_center_examples() {
        assert_eq!(nearest_center(&[100, 200], 149), 0);
        assert_eq!(nearest_center(&[100, 200], 150), 0);
        assert_eq!(nearest_center(&[100, 200], 151), 1);
        assert_eq!(nearest_center(&[100, 200], 5000), 1);
    }

    #[test]
    fn mcnemar_examples() {
        assert!((mcnemar_one_sided(10, 2).p_value - 79.0 / 4096.0).abs() < 1e-12);
        assert_eq!(mcnemar_one_sided(0, 5).p_value, 1.0);
        assert!(mcnemar_one_sided(4, 4).p_value >= 0.5);
        let z = mcnemar_one_sided(0, 0);
        assert_eq!(z.p_value, 1.0);
        assert!(z.warning.is_some());
    }

    #[test]
    fn min_max_constant_is_zero() {
        let mut v = [3.0, 3.0];
        min_max(&mut v);
        assert_eq!(v, [0.0, 0.0]);
    }
}
