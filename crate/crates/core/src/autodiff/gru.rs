use rand::Rng;

use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Weights of one unidirectional GRU: `wx [in x 3h]`, `wh [h x 3h]`, `b [1 x 3h]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GruParams {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let scale = 1.0 / (hidden as f64).sqrt();
        Ok(GruParams {
            wx: store.add_uniform(format!("{prefix}.wx"), &[input, 3 * hidden], scale, rng)?,
            wh: store.add_uniform(format!("{prefix}.wh"), &[hidden, 3 * hidden], scale, rng)?,
            b: store.add_uniform(format!("{prefix}.b"), &[1, 3 * hidden], scale, rng)?,
            input,
            hidden,
        })
    }

    pub fn ids(&self) -> [ParamId; 3] {
        [self.wx, self.wh, self.b]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BiGruParams {
    pub fwd: GruParams,
    pub bwd: GruParams,
}

impl BiGruParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(BiGruParams {
            fwd: GruParams::new(store, &format!("{prefix}.fwd"), input, hidden, rng)?,
            bwd: GruParams::new(store, &format!("{prefix}.bwd"), input, hidden, rng)?,
        })
    }

    /// Width of the concatenated output.
    pub fn output_width(&self) -> usize {
        self.fwd.hidden + self.bwd.hidden
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.fwd.ids().into_iter().chain(self.bwd.ids()).collect()
    }
}

/// One GRU step: `h' = (1-z) h + z tanh(x Wn + (r h) Un + bn)`.
pub fn gru_cell(tape: &mut Tape<'_>, x: Var, h: Var, p: &GruParams) -> Result<Var> {
    let (wx, wh, b) = (tape.param(p.wx), tape.param(p.wh), tape.param(p.b));
    tape.gru_cell(x, h, wx, wh, b, None)
}

pub fn gru_sequence(
    tape: &mut Tape<'_>,
    seq: Var,
    h0: Var,
    p: &GruParams,
    mask: Option<&[bool]>,
    reverse: bool,
) -> Result<Var> {
    let (wx, wh, b) = (tape.param(p.wx), tape.param(p.wh), tape.param(p.b));
    tape.gru_seq(seq, h0, wx, wh, b, mask, reverse)
}

#[derive(Clone, Copy, Debug)]
pub struct BiGruOutput {
    /// `[T x 2h]`: forward state after tokens `0..=t` next to backward state after tokens `T-1..=t`.
    pub outputs: Var,
    pub final_fwd: Var,
    pub final_bwd: Var,
}

/// Bidirectional read of `seq` (`[T x in]`). Masked positions neither
/// update the recurrent states nor contribute non-zero output rows.
pub fn bigru(
    tape: &mut Tape<'_>,
    seq: Var,
    h0_fwd: Var,
    h0_bwd: Var,
    p: &BiGruParams,
    mask: Option<&[bool]>,
) -> Result<BiGruOutput> {
    let fwd = gru_sequence(tape, seq, h0_fwd, &p.fwd, mask, false)?;
    let bwd = gru_sequence(tape, seq, h0_bwd, &p.bwd, mask, true)?;
    let steps = tape.value(seq).rows();
    let final_fwd = tape.row(fwd, steps - 1)?;
    let final_bwd = tape.row(bwd, 0)?;
    let mut outputs = tape.concat_cols(&[fwd, bwd])?;
    if let Some(mask) = mask.filter(|m| m.iter().any(|&k| !k)) {
        let width = p.output_width();
        let keep = mask
            .iter()
            .flat_map(|&k| std::iter::repeat_n(if k { 1.0 } else { 0.0 }, width))
            .collect();
        outputs = tape.mul_const(outputs, Tensor::matrix(steps, width, keep)?)?;
    }
    Ok(BiGruOutput {
        outputs,
        final_fwd,
        final_bwd,
    })
}

/// Zero initial state for a GRU of the given width.
pub fn zero_state(tape: &mut Tape<'_>, hidden: usize) -> Var {
    tape.constant(Tensor::zeros(&[1, hidden]))
}
