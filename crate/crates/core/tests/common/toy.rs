//! Small seeded corpora and tiny models shared by the training tests.

use dgr_core::config::ModelConfig;
use dgr_core::corpus::{build_vocab, generate_synthetic, DatasetSplit, SyntheticConfig};
use dgr_core::model::Model;
use dgr_core::reader::ReaderConfig;

pub fn toy_split(samples: usize, seed: u64) -> DatasetSplit {
    let cfg = SyntheticConfig {
        vocab_size: 24,
        doc_len: (8, 12),
        query_len: (3, 5),
        candidates: 3,
        samples,
        seed,
    };
    generate_synthetic(&cfg, "toy").unwrap()
}

pub fn tiny_model(preset: &str, splits: &[&DatasetSplit]) -> Model {
    let vocab = build_vocab(splits, 1).unwrap();
    Model::new(ModelConfig::tiny(ReaderConfig::preset(preset).unwrap()), vocab, None).unwrap()
}
