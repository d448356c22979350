//! Token representations: a frozen word table next to a trainable
//! character-level encoder.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{gru_cell, GruParams, ParamId, ParamStore, Tape, Tensor, Var};
use crate::corpus::{Vocabulary, PAD_ID};
use crate::error::{DgrError, Result};

/// Range of the uniform init for unknown and uncovered rows.
pub const WORD_INIT_SCALE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbedConfig {
    pub word_dim: usize,
    pub char_dim: usize,
    pub char_hidden: usize,
    pub char_out: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            word_dim: 100,
            char_dim: 16,
            char_hidden: 25,
            char_out: 50,
        }
    }
}

impl EmbedConfig {
    pub fn token_width(&self) -> usize {
        self.word_dim + self.char_out
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("word_dim", self.word_dim),
            ("char_dim", self.char_dim),
            ("char_hidden", self.char_hidden),
            ("char_out", self.char_out),
        ] {
            if v == 0 {
                return Err(DgrError::config(key, "must be positive"));
            }
        }
        Ok(())
    }
}

/// `|V| x o` matrix with a zero padding row; never trained.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordEmbeddingTable {
    pub id: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

/// Seeded uniform rows with a zero padding row.
pub fn random_word_matrix<R: Rng>(vocab_size: usize, dim: usize, rng: &mut R) -> Tensor {
    let mut data: Vec<f64> = (0..vocab_size * dim)
        .map(|_| rng.gen_range(-WORD_INIT_SCALE..=WORD_INIT_SCALE))
        .collect();
    data[PAD_ID * dim..(PAD_ID + 1) * dim].fill(0.0);
    Tensor::new(vec![vocab_size, dim], data).expect("shape matches data")
}

#[derive(Clone, Debug)]
pub struct PretrainedVectors {
    pub matrix: Tensor,
    /// Fraction of non-special vocabulary entries found in the file.
    pub coverage: f64,
}

/// Fills vocabulary rows from `token v1 .. v_dim` lines. Rows for tokens
/// missing from the text keep their seeded random init.
pub fn parse_pretrained_vectors<R: Rng>(
    text: &str,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut R,
) -> Result<PretrainedVectors> {
    let mut matrix = random_word_matrix(vocab.num_words(), dim, rng);
    let mut seen: HashMap<usize, usize> = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values = parts
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| DgrError::Format(format!("vector line {line_no}: {e}")))?;
        if values.len() != dim {
            return Err(DgrError::Format(format!(
                "vector line {line_no}: expected {dim} values, found {}",
                values.len()
            )));
        }
        let Some(id) = vocab.lookup(token) else { continue };
        if id == PAD_ID {
            continue;
        }
        if let Some(prev) = seen.insert(id, line_no) {
            log::warn!("vector line {line_no}: duplicate token {token:?} (first at line {prev}); last wins");
        }
        matrix.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
    }
    let regular = vocab.num_words().saturating_sub(3);
    let found = seen.keys().filter(|&&id| id >= 3).count();
    let coverage = if regular == 0 {
        1.0
    } else {
        found as f64 / regular as f64
    };
    log::info!("pretrained vectors cover {found}/{regular} vocabulary entries");
    Ok(PretrainedVectors { matrix, coverage })
}

pub fn load_pretrained_vectors<R: Rng>(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut R,
) -> Result<PretrainedVectors> {
    let text = fs::read_to_string(path).map_err(|e| DgrError::io(path, e))?;
    parse_pretrained_vectors(&text, vocab, dim, rng)
}

impl WordEmbeddingTable {
    /// Registers `matrix` as a frozen parameter. The padding row is zeroed.
    pub fn register(store: &mut ParamStore, mut matrix: Tensor) -> Result<Self> {
        if !matrix.is_matrix() || matrix.rows() < PAD_ID + 1 {
            return Err(DgrError::contract(format!("word table shape {:?}", matrix.shape())));
        }
        let (vocab_size, dim) = (matrix.rows(), matrix.cols());
        matrix.data_mut()[PAD_ID * dim..(PAD_ID + 1) * dim].fill(0.0);
        let id = store.add("embed.word", matrix, false)?;
        Ok(WordEmbeddingTable { id, vocab_size, dim })
    }

    pub fn random<R: Rng>(store: &mut ParamStore, vocab_size: usize, dim: usize, rng: &mut R) -> Result<Self> {
        Self::register(store, random_word_matrix(vocab_size, dim, rng))
    }
}

/// Character table, forward and backward GRUs, and the output projection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharEmbedder {
    pub table: ParamId,
    pub fwd: GruParams,
    pub bwd: GruParams,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub num_chars: usize,
    pub char_dim: usize,
    pub out_dim: usize,
}

impl CharEmbedder {
    pub fn new<R: Rng>(store: &mut ParamStore, num_chars: usize, cfg: &EmbedConfig, rng: &mut R) -> Result<Self> {
        let mut table = Tensor::new(
            vec![num_chars, cfg.char_dim],
            (0..num_chars * cfg.char_dim)
                .map(|_| rng.gen_range(-0.1..=0.1))
                .collect(),
        )?;
        table.data_mut()[..cfg.char_dim].fill(0.0);
        let table = store.add("embed.char.table", table, true)?;
        let fwd = GruParams::new(store, "embed.char.fwd", cfg.char_dim, cfg.char_hidden, rng)?;
        let bwd = GruParams::new(store, "embed.char.bwd", cfg.char_dim, cfg.char_hidden, rng)?;
        let scale = 1.0 / ((2 * cfg.char_hidden) as f64).sqrt();
        let proj_w = store.add_uniform("embed.char.proj.w", &[2 * cfg.char_hidden, cfg.char_out], scale, rng)?;
        let proj_b = store.add("embed.char.proj.b", Tensor::zeros(&[1, cfg.char_out]), true)?;
        Ok(CharEmbedder {
            table,
            fwd,
            bwd,
            proj_w,
            proj_b,
            num_chars,
            char_dim: cfg.char_dim,
            out_dim: cfg.char_out,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.table];
        v.extend(self.fwd.ids());
        v.extend(self.bwd.ids());
        v.extend([self.proj_w, self.proj_b]);
        v
    }

    /// Embeds a batch of character-id sequences into `[B x c_out]`.
    ///
    /// Tokens are padded to the longest one and read step by step; a row
    /// only updates while its token still has characters, so each row ends
    /// at that token's final forward and backward states.
    pub fn embed_batch(&self, tape: &mut Tape<'_>, tokens: &[Vec<usize>]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(DgrError::contract("character embedding of an empty batch"));
        }
        if let Some(i) = tokens.iter().position(Vec::is_empty) {
            return Err(DgrError::contract(format!(
                "character embedding of empty token (batch row {i})"
            )));
        }
        if let Some(&c) = tokens.iter().flatten().find(|&&c| c >= self.num_chars) {
            return Err(DgrError::contract(format!(
                "character id {c} out of range {}",
                self.num_chars
            )));
        }
        let b = tokens.len();
        let longest = tokens.iter().map(Vec::len).max().unwrap_or(0);
        let table = tape.param(self.table);
        let (fw, fu, fb) = (tape.param(self.fwd.wx), tape.param(self.fwd.wh), tape.param(self.fwd.b));
        let (bw, bu, bb) = (tape.param(self.bwd.wx), tape.param(self.bwd.wh), tape.param(self.bwd.b));
        let step = |tape: &mut Tape<'_>, t: usize| -> Result<(Var, Vec<bool>)> {
            let idx: Vec<Option<usize>> = tokens.iter().map(|tok| tok.get(t).copied()).collect();
            let mask = idx.iter().map(Option::is_some).collect();
            Ok((tape.gather_rows(table, &idx)?, mask))
        };
        let mut hf = tape.constant(Tensor::zeros(&[b, self.fwd.hidden]));
        for t in 0..longest {
            let (x, mask) = step(tape, t)?;
            hf = tape.gru_cell(x, hf, fw, fu, fb, Some(&mask))?;
        }
        let mut hb = tape.constant(Tensor::zeros(&[b, self.bwd.hidden]));
        for t in (0..longest).rev() {
            let (x, mask) = step(tape, t)?;
            hb = tape.gru_cell(x, hb, bw, bu, bb, Some(&mask))?;
        }
        let h = tape.concat_cols(&[hf, hb])?;
        let w = tape.param(self.proj_w);
        let bias = tape.param(self.proj_b);
        let out = tape.matmul(h, w)?;
        tape.add_row(out, bias)
    }

    /// `linear([final fwd state ; final bwd state])` for one token, `[1 x c_out]`.
    pub fn char_embed_token(&self, tape: &mut Tape<'_>, chars: &[usize]) -> Result<Var> {
        if chars.is_empty() {
            return Err(DgrError::contract("character embedding of empty token"));
        }
        self.embed_batch(tape, &[chars.to_vec()])
    }

    /// Reference composition through explicit cell calls (single token).
    pub fn char_embed_unrolled(&self, tape: &mut Tape<'_>, chars: &[usize]) -> Result<Var> {
        if chars.is_empty() {
            return Err(DgrError::contract("character embedding of empty token"));
        }
        let table = tape.param(self.table);
        let rows: Vec<Option<usize>> = chars.iter().map(|&c| Some(c)).collect();
        let xs = tape.gather_rows(table, &rows)?;
        let mut hf = tape.constant(Tensor::zeros(&[1, self.fwd.hidden]));
        for t in 0..chars.len() {
            let x = tape.row(xs, t)?;
            hf = gru_cell(tape, x, hf, &self.fwd)?;
        }
        let mut hb = tape.constant(Tensor::zeros(&[1, self.bwd.hidden]));
        for t in (0..chars.len()).rev() {
            let x = tape.row(xs, t)?;
            hb = gru_cell(tape, x, hb, &self.bwd)?;
        }
        let h = tape.concat_cols(&[hf, hb])?;
        let w = tape.param(self.proj_w);
        let bias = tape.param(self.proj_b);
        let out = tape.matmul(h, w)?;
        tape.add_row(out, bias)
    }
}

/// A token as the model sees it: word id plus character ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenIds {
    pub word: usize,
    pub chars: Vec<usize>,
}

impl TokenIds {
    pub fn pad() -> Self {
        TokenIds {
            word: PAD_ID,
            chars: Vec::new(),
        }
    }

    pub fn is_pad(&self) -> bool {
        self.word == PAD_ID
    }

    pub fn encode(vocab: &Vocabulary, token: &str) -> Self {
        TokenIds {
            word: vocab.word_id(token),
            chars: vocab.char_ids(token),
        }
    }

    pub fn encode_all(vocab: &Vocabulary, tokens: &[String]) -> Vec<Self> {
        tokens.iter().map(|t| Self::encode(vocab, t)).collect()
    }
}

/// Word table plus character encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Embedder {
    pub word: WordEmbeddingTable,
    pub chars: CharEmbedder,
}

impl Embedder {
    pub fn width(&self) -> usize {
        self.word.dim + self.chars.out_dim
    }

    /// Embeds several sequences, sharing one character pass over their
    /// distinct tokens. Each result is `[T x (o + c_out)]` with zero rows at
    /// padding positions.
    pub fn embed_sequences(&self, tape: &mut Tape<'_>, seqs: &[&[TokenIds]]) -> Result<Vec<Var>> {
        let mut unique: Vec<&[usize]> = Vec::new();
        let mut slot: HashMap<&[usize], usize> = HashMap::new();
        for tok in seqs.iter().flat_map(|s| s.iter()) {
            if tok.word >= self.word.vocab_size {
                return Err(DgrError::contract(format!(
                    "word id {} out of range {}",
                    tok.word, self.word.vocab_size
                )));
            }
            if tok.is_pad() {
                continue;
            }
            if tok.chars.is_empty() {
                return Err(DgrError::contract("non-padding token without characters"));
            }
            slot.entry(&tok.chars).or_insert_with(|| {
                unique.push(&tok.chars);
                unique.len() - 1
            });
        }
        let char_rows = if unique.is_empty() {
            None
        } else {
            let owned: Vec<Vec<usize>> = unique.iter().map(|c| c.to_vec()).collect();
            Some(self.chars.embed_batch(tape, &owned)?)
        };
        let table = tape.param(self.word.id);
        let mut out = Vec::with_capacity(seqs.len());
        for seq in seqs {
            if seq.is_empty() {
                return Err(DgrError::contract("embedding an empty sequence"));
            }
            let words: Vec<Option<usize>> = seq.iter().map(|t| Some(t.word)).collect();
            let w = tape.gather_rows(table, &words)?;
            let c = match char_rows {
                Some(rows) => {
                    let idx: Vec<Option<usize>> = seq
                        .iter()
                        .map(|t| {
                            if t.is_pad() {
                                None
                            } else {
                                Some(slot[t.chars.as_slice()])
                            }
                        })
                        .collect();
                    tape.gather_rows(rows, &idx)?
                }
                None => tape.constant(Tensor::zeros(&[seq.len(), self.chars.out_dim])),
            };
            out.push(tape.concat_cols(&[w, c])?);
        }
        Ok(out)
    }

    pub fn embed_tokens(&self, tape: &mut Tape<'_>, tokens: &[TokenIds]) -> Result<Var> {
        Ok(self.embed_sequences(tape, &[tokens])?.remove(0))
    }
}
