//! Full model: embeddings, reader and pointer-sum ranking over one store.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::checkpoint::{load_checkpoint, restore_into, save_checkpoint};
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::config::{format_kv, read_kv, ModelConfig};
use crate::corpus::{CandidateOccurrences, ClozeSample, Vocabulary};
use crate::embed::{random_word_matrix, CharEmbedder, Embedder, TokenIds, WordEmbeddingTable};
use crate::error::{DgrError, Result};
use crate::ranker::{self, PredictionDistribution, PredictionRecord};
use crate::reader::{qe_comm_features, AttentionTrace, Dropout, Encoding, Masks, Reader};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const CHARS_FILE: &str = "chars.tsv";
pub const MODEL_CONFIG_FILE: &str = "model.cfg";

/// A sample mapped to ids, optionally padded.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub id: String,
    pub doc: Vec<TokenIds>,
    pub query: Vec<TokenIds>,
    pub masks: Masks,
    pub placeholder_index: usize,
    pub candidates: Vec<String>,
    pub occurrences: CandidateOccurrences,
    pub answer: Option<usize>,
    /// Query-evidence bits, present when the model uses them.
    pub qe: Option<Vec<f64>>,
}

impl EncodedSample {
    pub fn doc_len(&self) -> usize {
        self.masks.doc.iter().filter(|&&k| k).count()
    }

    pub fn query_len(&self) -> usize {
        self.masks.query.iter().filter(|&&k| k).count()
    }

    /// Appends padding up to `n` document and `m` query positions.
    pub fn padded(&self, n: usize, m: usize) -> Self {
        let mut s = self.clone();
        while s.doc.len() < n {
            s.doc.push(TokenIds::pad());
            s.masks.doc.push(false);
            if let Some(q) = s.qe.as_mut() {
                q.push(0.0);
            }
        }
        while s.query.len() < m {
            s.query.push(TokenIds::pad());
            s.masks.query.push(false);
        }
        s
    }
}

/// Differentiable outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[1 x n]`
    pub token_probs: Var,
    /// `[1 x g]`
    pub cand_probs: Var,
    pub encoding: Encoding,
}

/// Value-level outputs including the attention trace.
#[derive(Clone, Debug)]
pub struct Inspection {
    pub distribution: PredictionDistribution,
    pub trace: AttentionTrace,
    /// Final-layer `q_idx . d_i` scores.
    pub placeholder_scores: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub embedder: Embedder,
    pub reader: Reader,
}

impl Model {
    /// Fresh parameters drawn from `config.init_seed`. `word_matrix`
    /// replaces the random frozen word table (e.g. pretrained vectors).
    pub fn new(config: ModelConfig, vocab: Vocabulary, word_matrix: Option<Tensor>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let words = match word_matrix {
            Some(m) => {
                if m.shape() != [vocab.num_words(), config.embed.word_dim] {
                    return Err(DgrError::Dimension {
                        op: "word table",
                        lhs: m.shape().to_vec(),
                        rhs: vec![vocab.num_words(), config.embed.word_dim],
                    });
                }
                m
            }
            None => random_word_matrix(vocab.num_words(), config.embed.word_dim, &mut rng),
        };
        let word = WordEmbeddingTable::register(&mut store, words)?;
        let chars = CharEmbedder::new(&mut store, vocab.num_chars(), &config.embed, &mut rng)?;
        let embedder = Embedder { word, chars };
        let reader = Reader::new(&mut store, config.reader, embedder.width(), &mut rng)?;
        Ok(Model {
            config,
            vocab,
            store,
            embedder,
            reader,
        })
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store.trainable_ids()
    }

    pub fn encode(&self, sample: &ClozeSample) -> Result<EncodedSample> {
        sample
            .validate()
            .map_err(|r| DgrError::contract(format!("sample {}: {r}", sample.id)))?;
        let occurrences = sample.occurrences();
        if let Some(c) = occurrences.positions.iter().position(Vec::is_empty) {
            return Err(DgrError::contract(format!(
                "sample {}: candidate {:?} has no exact occurrence (is the data lowercased?)",
                sample.id, sample.candidates[c]
            )));
        }
        Ok(EncodedSample {
            id: sample.id.clone(),
            doc: TokenIds::encode_all(&self.vocab, &sample.document),
            query: TokenIds::encode_all(&self.vocab, &sample.query),
            masks: Masks::unpadded(sample.doc_len(), sample.query_len()),
            placeholder_index: sample.placeholder_index,
            candidates: sample.candidates.clone(),
            occurrences,
            answer: sample.answer_index(),
            qe: self
                .config
                .reader
                .qe_comm
                .then(|| qe_comm_features(&sample.document, &sample.query)),
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, s: &EncodedSample, dropout: &mut Dropout<'_>) -> Result<Forward> {
        let embs = self.embedder.embed_sequences(tape, &[&s.doc, &s.query])?;
        let encoding = self
            .reader
            .encode_full(tape, embs[0], embs[1], &s.masks, s.qe.as_deref(), dropout)?;
        let st = encoding.state;
        let token_probs = ranker::token_distribution(tape, st.doc, st.query, s.placeholder_index, &s.masks.doc)?;
        let cand_probs = ranker::aggregate_candidates(tape, token_probs, &s.occurrences)?;
        Ok(Forward {
            token_probs,
            cand_probs,
            encoding,
        })
    }

    /// `-log p(answer)` for one sample.
    pub fn sample_loss(&self, tape: &mut Tape<'_>, s: &EncodedSample, dropout: &mut Dropout<'_>) -> Result<Var> {
        let a = s
            .answer
            .ok_or_else(|| DgrError::contract(format!("sample {} has no gold answer", s.id)))?;
        let f = self.forward(tape, s, dropout)?;
        let p = tape.slice_cols(f.cand_probs, a, 1)?;
        let lp = tape.log(p)?;
        Ok(tape.scale(lp, -1.0))
    }

    pub fn inspect(&self, s: &EncodedSample) -> Result<Inspection> {
        let mut tape = Tape::new(&self.store);
        let f = self.forward(&mut tape, s, &mut Dropout::off())?;
        let token_probs = tape.value(f.token_probs).data().to_vec();
        let probs = tape.value(f.cand_probs).data().to_vec();
        let best = ranker::predict(&s.candidates, &probs)?;
        let st = f.encoding.state;
        Ok(Inspection {
            placeholder_scores: ranker::placeholder_scores(&tape, st.doc, st.query, s.placeholder_index),
            distribution: PredictionDistribution {
                token_probs,
                candidate_probs: s.candidates.iter().cloned().zip(probs).collect(),
                predicted: s.candidates[best].clone(),
            },
            trace: f.encoding.trace,
        })
    }

    pub fn predict(&self, s: &EncodedSample) -> Result<PredictionDistribution> {
        Ok(self.inspect(s)?.distribution)
    }

    pub fn prediction_record(&self, s: &EncodedSample) -> Result<PredictionRecord> {
        let d = self.predict(s)?;
        Ok(PredictionRecord {
            sample_id: s.id.clone(),
            predicted: d.predicted,
            gold: s.answer.map(|a| s.candidates[a].clone()),
            candidate_probs: d.candidate_probs.into_iter().collect(),
            doc_len: s.doc_len(),
            query_len: s.query_len(),
        })
    }

    /// Writes parameters, vocabularies and the layout config into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| DgrError::io(dir, e))?;
        save_checkpoint(&self.store, &dir.join(CHECKPOINT_FILE))?;
        self.vocab.save(&dir.join(VOCAB_FILE), &dir.join(CHARS_FILE))?;
        let cfg = dir.join(MODEL_CONFIG_FILE);
        fs::write(&cfg, format_kv(&self.config.to_kv())).map_err(|e| DgrError::io(&cfg, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = ModelConfig::from_kv(read_kv(&dir.join(MODEL_CONFIG_FILE))?)?;
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE), &dir.join(CHARS_FILE))?;
        let mut model = Model::new(config, vocab, None)?;
        model.restore(&dir.join(CHECKPOINT_FILE))?;
        Ok(model)
    }

    /// Overwrites parameters from a checkpoint with a matching layout.
    pub fn restore(&mut self, checkpoint: &Path) -> Result<()> {
        let loaded = load_checkpoint(checkpoint)?;
        restore_into(&mut self.store, &loaded)
    }
}
