//! Seeded generator for a small learnable cloze task.
//!
//! The vocabulary is split into entity tokens (`eNN`) and context words
//! (`wNN`). Each candidate is given a private marker word and every
//! occurrence of the candidate in the document directly follows its marker.
//! The query places the answer's marker immediately before the blank, so the
//! answer is the candidate whose document neighbourhood matches the query
//! context around the placeholder.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClozeSample, DatasetSplit, PLACEHOLDER};
use crate::error::{DgrError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub vocab_size: usize,
    pub doc_len: (usize, usize),
    pub query_len: (usize, usize),
    pub candidates: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            vocab_size: 40,
            doc_len: (15, 25),
            query_len: (5, 9),
            candidates: 4,
            samples: 50,
            seed: 1,
        }
    }
}

impl SyntheticConfig {
    fn entity_count(&self) -> usize {
        self.vocab_size / 4
    }

    fn validate(&self) -> Result<()> {
        let g = self.candidates;
        let entities = self.entity_count();
        let words = self.vocab_size - entities;
        if g == 0 {
            return Err(DgrError::config("candidates", "must be at least 1"));
        }
        if entities < g {
            return Err(DgrError::config(
                "candidates",
                format!(
                    "{g} candidates but vocab_size {} only yields {entities} entity tokens",
                    self.vocab_size
                ),
            ));
        }
        if words < g + 1 {
            return Err(DgrError::config(
                "vocab_size",
                format!("{words} context words cannot give {g} markers plus filler"),
            ));
        }
        if self.doc_len.0 > self.doc_len.1 || self.doc_len.0 < 2 * g {
            return Err(DgrError::config(
                "doc_len",
                format!("range {:?} must be ordered with minimum >= {}", self.doc_len, 2 * g),
            ));
        }
        if self.query_len.0 > self.query_len.1 || self.query_len.0 < 2 {
            return Err(DgrError::config(
                "query_len",
                format!("range {:?} must be ordered with minimum >= 2", self.query_len),
            ));
        }
        Ok(())
    }
}

fn sample_one(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng, ordinal: usize) -> ClozeSample {
    let g = cfg.candidates;
    let entities: Vec<String> = (0..cfg.entity_count()).map(|i| format!("e{i:02}")).collect();
    let words: Vec<String> = (0..cfg.vocab_size - entities.len())
        .map(|i| format!("w{i:02}"))
        .collect();

    let candidates: Vec<String> = entities.choose_multiple(rng, g).cloned().collect();
    let mut shuffled = words.clone();
    shuffled.shuffle(rng);
    let markers = &shuffled[..g];
    let fillers = &shuffled[g..];

    let n = rng.gen_range(cfg.doc_len.0..=cfg.doc_len.1);
    // each (marker, entity) pair uses two tokens; some candidates appear twice
    let budget = n / 2;
    let mut counts = vec![1usize; g];
    let mut total = g;
    for c in counts.iter_mut() {
        if total < budget && rng.gen_bool(0.5) {
            *c = 2;
            total += 1;
        }
    }
    let mut chunks: Vec<Vec<String>> = Vec::new();
    for (i, &k) in counts.iter().enumerate() {
        for _ in 0..k {
            chunks.push(vec![markers[i].clone(), candidates[i].clone()]);
        }
    }
    let used: usize = chunks.iter().map(Vec::len).sum();
    for _ in used..n {
        chunks.push(vec![fillers.choose(rng).unwrap().clone()]);
    }
    chunks.shuffle(rng);
    let document: Vec<String> = chunks.into_iter().flatten().collect();

    let answer_idx = rng.gen_range(0..g);
    let m = rng.gen_range(cfg.query_len.0..=cfg.query_len.1);
    let slot = rng.gen_range(1..m);
    let query: Vec<String> = (0..m)
        .map(|j| {
            if j == slot {
                PLACEHOLDER.to_string()
            } else if j + 1 == slot {
                markers[answer_idx].clone()
            } else {
                fillers.choose(rng).unwrap().clone()
            }
        })
        .collect();

    ClozeSample::new(
        format!("synth-{ordinal}"),
        document,
        query,
        candidates.clone(),
        Some(candidates[answer_idx].clone()),
    )
    .expect("generator output satisfies sample invariants")
}

pub fn generate_synthetic(cfg: &SyntheticConfig, name: &str) -> Result<DatasetSplit> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples = (0..cfg.samples).map(|i| sample_one(cfg, &mut rng, i)).collect();
    Ok(DatasetSplit::new(name, samples))
}
