//! Multi-hop dependent gated reading of a document and query.
//!
//! An initial pair of bidirectional reads is followed by `hops` rounds of
//! cross attention, gating and re-reading. Three switches select how the
//! query side participates, covering the GA reader as the all-off corner.

mod config;

use rand::RngCore;

pub use config::{ReaderConfig, PRESETS};

use crate::autodiff::{bigru, zero_state, BiGruParams, ParamId, ParamStore, Tape, Tensor, Var};
use crate::corpus::PLACEHOLDER;
use crate::error::{DgrError, Result};

/// Keep-masks for real (`true`) and padded (`false`) positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Masks {
    pub doc: Vec<bool>,
    pub query: Vec<bool>,
}

impl Masks {
    pub fn unpadded(n: usize, m: usize) -> Self {
        Masks {
            doc: vec![true; n],
            query: vec![true; m],
        }
    }

    fn check(&self, n: usize, m: usize) -> Result<()> {
        if self.doc.len() != n || self.query.len() != m {
            return Err(DgrError::Dimension {
                op: "masks",
                lhs: vec![n, m],
                rhs: vec![self.doc.len(), self.query.len()],
            });
        }
        if !self.doc.iter().any(|&k| k) || !self.query.iter().any(|&k| k) {
            return Err(DgrError::contract("document or query has no unmasked position"));
        }
        Ok(())
    }
}

/// Dropout source for a forward pass; `None` means evaluation.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: Option<&'r mut dyn RngCore>,
    /// Also drop the gated BiGRU inputs of every hop, not just embeddings.
    pub hops: bool,
}

impl<'r> Dropout<'r> {
    pub fn off() -> Self {
        Dropout {
            rate: 0.0,
            rng: None,
            hops: false,
        }
    }

    pub fn train(rate: f64, rng: &'r mut dyn RngCore) -> Self {
        Dropout {
            rate,
            rng: Some(rng),
            hops: true,
        }
    }

    pub fn with_hops(self, hops: bool) -> Self {
        Dropout { hops, ..self }
    }

    fn apply_hop(&mut self, tape: &mut Tape<'_>, v: Var) -> Result<Var> {
        if self.hops {
            self.apply(tape, v)
        } else {
            Ok(v)
        }
    }

    pub fn apply(&mut self, tape: &mut Tape<'_>, v: Var) -> Result<Var> {
        match self.rng.as_mut() {
            Some(rng) => tape.dropout(v, self.rate, true, rng),
            None => Ok(v),
        }
    }
}

/// Encodings after one reading.
#[derive(Clone, Copy, Debug)]
pub struct HopState {
    /// `[n x r]`
    pub doc: Var,
    /// `[m x r]`
    pub query: Var,
    /// Final forward and backward states of the query read, each `[1 x r/2]`.
    pub h_fwd: Var,
    pub h_bwd: Var,
    pub hop: usize,
}

/// Attention between two readings, as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct HopTrace {
    /// `[n x m]` raw energies.
    pub energy: Tensor,
    /// `[n x m]`, each row a distribution over query positions.
    pub doc_to_query: Tensor,
    /// `[n x m]`, each column a distribution over document positions.
    pub query_to_doc: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionTrace {
    pub hops: Vec<HopTrace>,
}

/// Output of [`cross_attend`].
#[derive(Clone, Copy, Debug)]
pub struct CrossAttention {
    /// `[n x r]`
    pub doc_tilde: Var,
    /// `[m x r]`
    pub query_tilde: Var,
    /// `[n x m]` row-normalised.
    pub doc_attn: Var,
    /// `[m x n]` row-normalised (query position over document).
    pub query_attn: Var,
}

/// `e = d q^T`, `[n x m]`.
pub fn energy(tape: &mut Tape<'_>, doc: Var, query: Var) -> Result<Var> {
    let (dw, qw) = (tape.value(doc).cols(), tape.value(query).cols());
    if dw != qw {
        return Err(DgrError::Dimension {
            op: "energy",
            lhs: tape.shape(doc).to_vec(),
            rhs: tape.shape(query).to_vec(),
        });
    }
    let qt = tape.transpose(query)?;
    tape.matmul(doc, qt)
}

/// Each document position attends over the query and vice versa.
pub fn cross_attend(tape: &mut Tape<'_>, e: Var, doc: Var, query: Var, masks: &Masks) -> Result<CrossAttention> {
    let (n, m) = (tape.value(e).rows(), tape.value(e).cols());
    masks.check(n, m)?;
    let doc_attn = tape.masked_softmax_rows(e, &masks.query)?;
    let doc_tilde = tape.matmul(doc_attn, query)?;
    let et = tape.transpose(e)?;
    let query_attn = tape.masked_softmax_rows(et, &masks.doc)?;
    let query_tilde = tape.matmul(query_attn, doc)?;
    Ok(CrossAttention {
        doc_tilde,
        query_tilde,
        doc_attn,
        query_attn,
    })
}

/// `u = d * d~`; `v = q * q~` when the query side is gated, else `q`.
pub fn gate(
    tape: &mut Tape<'_>,
    doc: Var,
    doc_tilde: Var,
    query: Var,
    query_tilde: Var,
    gate_query: bool,
) -> Result<(Var, Var)> {
    let u = tape.mul(doc, doc_tilde)?;
    let v = if gate_query {
        tape.mul(query, query_tilde)?
    } else {
        query
    };
    Ok((u, v))
}

/// `f_i = 1` when document token `i` also appears in the query.
pub fn qe_comm_features(doc: &[String], query: &[String]) -> Vec<f64> {
    let in_query: std::collections::HashSet<&str> =
        query.iter().map(String::as_str).filter(|t| *t != PLACEHOLDER).collect();
    doc.iter()
        .map(|t| {
            if t != PLACEHOLDER && in_query.contains(t.as_str()) {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Final encodings plus the attention trace.
#[derive(Clone, Debug)]
pub struct Encoding {
    pub state: HopState,
    pub trace: AttentionTrace,
}

/// Reader parameters: initial document/query BiGRUs and one pair per hop.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reader {
    pub config: ReaderConfig,
    pub input_width: usize,
    pub doc0: BiGruParams,
    pub query0: BiGruParams,
    pub doc_hops: Vec<BiGruParams>,
    pub query_hops: Vec<BiGruParams>,
}

impl Reader {
    pub fn new<R: rand::Rng>(
        store: &mut ParamStore,
        config: ReaderConfig,
        input_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let half = config.hidden / 2;
        let r = config.hidden;
        let doc0 = BiGruParams::new(store, "reader.doc0", input_width, half, rng)?;
        let query0 = BiGruParams::new(store, "reader.query0", input_width, half, rng)?;
        let mut doc_hops = Vec::with_capacity(config.hops);
        let mut query_hops = Vec::with_capacity(config.hops);
        for s in 1..=config.hops {
            let doc_in = if config.qe_comm && s == config.hops { r + 1 } else { r };
            let query_in = if config.flag_b { r } else { input_width };
            doc_hops.push(BiGruParams::new(store, &format!("reader.doc{s}"), doc_in, half, rng)?);
            query_hops.push(BiGruParams::new(
                store,
                &format!("reader.query{s}"),
                query_in,
                half,
                rng,
            )?);
        }
        Ok(Reader {
            config,
            input_width,
            doc0,
            query0,
            doc_hops,
            query_hops,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.doc0.ids();
        ids.extend(self.query0.ids());
        for (d, q) in self.doc_hops.iter().zip(&self.query_hops) {
            ids.extend(d.ids());
            ids.extend(q.ids());
        }
        ids
    }

    fn check_inputs(&self, tape: &Tape<'_>, doc_emb: Var, query_emb: Var, masks: &Masks) -> Result<()> {
        let (td, tq) = (tape.value(doc_emb), tape.value(query_emb));
        if td.rows() == 0 || tq.rows() == 0 {
            return Err(DgrError::contract("empty document or query"));
        }
        if td.cols() != self.input_width || tq.cols() != self.input_width {
            return Err(DgrError::Dimension {
                op: "reader input",
                lhs: td.shape().to_vec(),
                rhs: tq.shape().to_vec(),
            });
        }
        masks.check(td.rows(), tq.rows())
    }

    /// Reading 0: both sequences from zero initial states.
    pub fn initial_read(&self, tape: &mut Tape<'_>, doc_emb: Var, query_emb: Var, masks: &Masks) -> Result<HopState> {
        self.check_inputs(tape, doc_emb, query_emb, masks)?;
        let half = self.config.hidden / 2;
        let z = zero_state(tape, half);
        let d = bigru(tape, doc_emb, z, z, &self.doc0, Some(&masks.doc))?;
        let q = bigru(tape, query_emb, z, z, &self.query0, Some(&masks.query))?;
        Ok(HopState {
            doc: d.outputs,
            query: q.outputs,
            h_fwd: q.final_fwd,
            h_bwd: q.final_bwd,
            hop: 0,
        })
    }

    /// Attention between reading `s` and reading `s + 1`, then the re-read.
    /// `qe` (`[n x 1]`) is only accepted on the last hop and only when the
    /// configuration enables it.
    pub fn hop(
        &self,
        tape: &mut Tape<'_>,
        state: &HopState,
        query_emb: Var,
        masks: &Masks,
        qe: Option<Var>,
        dropout: &mut Dropout<'_>,
    ) -> Result<(HopState, HopTrace)> {
        let s = state.hop;
        if s >= self.config.hops {
            return Err(DgrError::contract(format!(
                "hop {} beyond configured {}",
                s + 1,
                self.config.hops
            )));
        }
        let last = s + 1 == self.config.hops;
        match (qe.is_some(), last && self.config.qe_comm) {
            (true, false) => {
                return Err(DgrError::contract(
                    "query-evidence feature is only defined for the final document read",
                ))
            }
            (false, true) => return Err(DgrError::contract("qe_comm enabled but no feature column supplied")),
            _ => {}
        }
        let e = energy(tape, state.doc, state.query)?;
        let att = cross_attend(tape, e, state.doc, state.query, masks)?;
        let (u, v) = gate(
            tape,
            state.doc,
            att.doc_tilde,
            state.query,
            att.query_tilde,
            self.config.flag_a,
        )?;

        let mut u = dropout.apply_hop(tape, u)?;
        if let Some(f) = qe {
            u = tape.concat_cols(&[u, f])?;
        }
        let half = self.config.hidden / 2;
        let z = zero_state(tape, half);
        let d = bigru(tape, u, z, z, &self.doc_hops[s], Some(&masks.doc))?;

        let q_in = if self.config.flag_b {
            dropout.apply_hop(tape, v)?
        } else {
            query_emb
        };
        let (h0f, h0b) = if self.config.flag_c {
            (state.h_fwd, state.h_bwd)
        } else {
            (z, z)
        };
        let q = bigru(tape, q_in, h0f, h0b, &self.query_hops[s], Some(&masks.query))?;

        let doc_to_query = tape.value(att.doc_attn).clone();
        let trace = HopTrace {
            energy: tape.value(e).clone(),
            doc_to_query,
            query_to_doc: tape.value(att.query_attn).transpose(),
        };
        let next = HopState {
            doc: d.outputs,
            query: q.outputs,
            h_fwd: q.final_fwd,
            h_bwd: q.final_bwd,
            hop: s + 1,
        };
        Ok((next, trace))
    }

    /// Initial read followed by every hop. Dropout hits the embeddings and
    /// the gated inputs of each hop.
    pub fn encode_full(
        &self,
        tape: &mut Tape<'_>,
        doc_emb: Var,
        query_emb: Var,
        masks: &Masks,
        qe: Option<&[f64]>,
        dropout: &mut Dropout<'_>,
    ) -> Result<Encoding> {
        self.check_inputs(tape, doc_emb, query_emb, masks)?;
        let n = masks.doc.len();
        let qe = match (self.config.qe_comm, qe) {
            (true, Some(f)) if f.len() == n => {
                let masked: Vec<f64> = f
                    .iter()
                    .zip(&masks.doc)
                    .map(|(&x, &k)| if k { x } else { 0.0 })
                    .collect();
                Some(tape.constant(Tensor::column(masked)))
            }
            (true, Some(f)) => {
                return Err(DgrError::Dimension {
                    op: "qe_comm",
                    lhs: vec![n],
                    rhs: vec![f.len()],
                })
            }
            (true, None) => return Err(DgrError::contract("qe_comm enabled but no feature column supplied")),
            (false, Some(_)) => return Err(DgrError::contract("qe_comm disabled but features supplied")),
            (false, None) => None,
        };
        let doc_emb = dropout.apply(tape, doc_emb)?;
        let query_emb = dropout.apply(tape, query_emb)?;
        let mut state = self.initial_read(tape, doc_emb, query_emb, masks)?;
        let mut trace = AttentionTrace::default();
        for s in 0..self.config.hops {
            let f = if s + 1 == self.config.hops { qe } else { None };
            let (next, t) = self.hop(tape, &state, query_emb, masks, f, dropout)?;
            trace.hops.push(t);
            state = next;
        }
        Ok(Encoding { state, trace })
    }
}
