//! Finite-difference check of the whole model (embeddings, reader, ranker
//! and loss) on tiny configurations of every ablation preset.

use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::gradcheck::{check_gradients, GradCheckOptions, WorstEntry};
use crate::config::ModelConfig;
use crate::corpus::{build_vocab, generate_synthetic, ClozeSample, SyntheticConfig};
use crate::error::Result;
use crate::model::{EncodedSample, Model};
use crate::reader::{Dropout, ReaderConfig, PRESETS};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub config: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<WorstEntry>,
    pub passed: bool,
}

/// Preset names covered by the suite: every ablation plus DGR with the
/// question-evidence feature.
pub fn suite_configs() -> Vec<(String, ReaderConfig)> {
    let mut out: Vec<(String, ReaderConfig)> = PRESETS
        .iter()
        .map(|p| (p.to_string(), ReaderConfig::preset(p).expect("known preset")))
        .collect();
    let qe = ReaderConfig {
        qe_comm: true,
        ..ReaderConfig::preset("dgr").expect("known preset")
    };
    out.push(("dgr+qe".into(), qe));
    out
}

/// Two samples with n <= 12, m <= 6 and three candidates; the first is
/// padded on both sides.
fn tiny_batch(model: &Model, samples: &[ClozeSample]) -> Result<Vec<EncodedSample>> {
    let mut enc: Vec<EncodedSample> = samples.iter().map(|s| model.encode(s)).collect::<Result<_>>()?;
    let (n, m) = (enc[0].doc_len() + 2, enc[0].query_len() + 1);
    enc[0] = enc[0].padded(n, m);
    Ok(enc)
}

pub fn check_config(name: &str, reader: ReaderConfig, seed: u64) -> Result<SuiteEntry> {
    let data = generate_synthetic(
        &SyntheticConfig {
            vocab_size: 16,
            doc_len: (6, 10),
            query_len: (3, 5),
            candidates: 3,
            samples: 2,
            seed,
        },
        "gradcheck",
    )?;
    let vocab = build_vocab(&[&data], 1)?;
    let mut cfg = ModelConfig::tiny(reader);
    cfg.init_seed = seed;
    let mut model = Model::new(cfg, vocab, None)?;
    let batch = tiny_batch(&model, &data.samples)?;
    // the forward pass only reads parameters through the tape
    let mut store = std::mem::take(&mut model.store);
    let report = check_gradients(&mut store, GradCheckOptions::default(), |tape| {
        let mut total = model.sample_loss(tape, &batch[0], &mut Dropout::off())?;
        for s in &batch[1..] {
            let l = model.sample_loss(tape, s, &mut Dropout::off())?;
            total = tape.add(total, l)?;
        }
        Ok(tape.scale(total, 1.0 / batch.len() as f64))
    })?;
    Ok(SuiteEntry {
        config: name.to_string(),
        checked: report.checked,
        max_rel_error: report.max_rel_error,
        passed: report.passes(GRADCHECK_TOLERANCE),
        worst: report.worst,
    })
}

pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    suite_configs()
        .into_par_iter()
        .map(|(name, cfg)| check_config(&name, cfg, seed))
        .collect()
}
