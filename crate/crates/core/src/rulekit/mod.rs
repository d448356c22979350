//! Capitalised-neighbour rule for named-entity cloze samples.
//!
//! If a word next to the blank starts with an uppercase letter, the answer
//! is often the word that keeps appearing on the same side of that word in
//! the document ("Jimmy ___" with "Jimmy Skunk" in the story).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{ClozeSample, DatasetSplit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleStatus {
    Disambiguated,
    Ambiguous,
    NoAnchor,
}

/// Which side of the blank the anchor word sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Previous,
    Next,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleDecision {
    pub sample_id: String,
    pub status: RuleStatus,
    pub anchor: Option<String>,
    pub direction: Option<Direction>,
    /// Candidates found next to the anchor in the document, sorted.
    pub survivors: Vec<String>,
    pub answer: Option<String>,
}

fn capitalised(tok: &str) -> bool {
    tok.chars().next().is_some_and(char::is_uppercase)
}

/// Applies the rule. Needs original casing; on a lowercased sample every
/// decision is `NoAnchor`.
pub fn disambiguate(sample: &ClozeSample) -> RuleDecision {
    let idx = sample.placeholder_index;
    let prev = idx
        .checked_sub(1)
        .map(|i| (sample.query[i].as_str(), Direction::Previous));
    let next = sample.query.get(idx + 1).map(|t| (t.as_str(), Direction::Next));
    let Some((anchor, dir)) = [prev, next].into_iter().flatten().find(|(t, _)| capitalised(t)) else {
        return RuleDecision {
            sample_id: sample.id.clone(),
            status: RuleStatus::NoAnchor,
            anchor: None,
            direction: None,
            survivors: Vec::new(),
            answer: None,
        };
    };
    let doc = &sample.document;
    let collected: BTreeSet<String> = doc
        .iter()
        .enumerate()
        .filter(|(_, t)| *t == anchor)
        .filter_map(|(i, _)| match dir {
            Direction::Previous => doc.get(i + 1),
            Direction::Next => i.checked_sub(1).map(|j| &doc[j]),
        })
        .map(|t| t.to_lowercase())
        .collect();
    let survivors: BTreeSet<String> = sample
        .candidates
        .iter()
        .filter(|c| collected.contains(&c.to_lowercase()))
        .cloned()
        .collect();
    let survivors: Vec<String> = survivors.into_iter().collect();
    let answer = match survivors.as_slice() {
        [one] => Some(one.clone()),
        _ => None,
    };
    RuleDecision {
        sample_id: sample.id.clone(),
        status: if answer.is_some() {
            RuleStatus::Disambiguated
        } else {
            RuleStatus::Ambiguous
        },
        anchor: Some(anchor.to_string()),
        direction: Some(dir),
        survivors,
        answer,
    }
}

/// Counts over disambiguated samples; fractions are relative to the whole
/// split.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RuleCoverage {
    pub samples: usize,
    pub disambiguated: usize,
    pub correct: usize,
    pub wrong: usize,
    pub correct_fraction: f64,
    pub wrong_fraction: f64,
}

pub fn coverage_of(decisions: &[RuleDecision], split: &DatasetSplit) -> RuleCoverage {
    let mut cov = RuleCoverage {
        samples: split.len(),
        ..Default::default()
    };
    for (d, s) in decisions.iter().zip(&split.samples) {
        let Some(a) = &d.answer else { continue };
        cov.disambiguated += 1;
        if s.answer.as_ref().is_some_and(|g| g.to_lowercase() == a.to_lowercase()) {
            cov.correct += 1;
        } else {
            cov.wrong += 1;
        }
    }
    if cov.samples > 0 {
        cov.correct_fraction = cov.correct as f64 / cov.samples as f64;
        cov.wrong_fraction = cov.wrong as f64 / cov.samples as f64;
    }
    cov
}

pub fn evaluate_rule_coverage(split: &DatasetSplit) -> RuleCoverage {
    let decisions: Vec<RuleDecision> = split.samples.iter().map(disambiguate).collect();
    coverage_of(&decisions, split)
}
