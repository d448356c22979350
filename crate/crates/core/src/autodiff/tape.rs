//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! Every operation appends one node whose inputs were created earlier, so the
//! node list is already in topological order and `backward` is a single
//! reverse sweep.

use std::borrow::Cow;

use rand::Rng;

use super::gru_math::{self, GruDims};
use super::param::{Gradients, ParamId, ParamStore};
use super::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};
use crate::error::{DgrError, Result};

/// Additive penalty applied to masked logits before normalisation.
pub const MASK_PENALTY: f64 = -1e30;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct GruCache {
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    h_prev: Vec<f64>,
}

#[derive(Clone, Debug)]
struct GruOp {
    x: Var,
    h: Var,
    wx: Var,
    wh: Var,
    b: Var,
    dims: GruDims,
    mask: Vec<bool>,
    reverse: bool,
    cache: GruCache,
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<Option<usize>>),
    MaskedSoftmax(Var),
    SumAll(Var),
    Normalize(Var),
    PointerSum(Var, Vec<Vec<usize>>),
    /// One GRU step over a batch of rows.
    GruCell(Box<GruOp>),
    /// A full unidirectional pass over a `[T x in]` sequence.
    GruSeq(Box<GruOp>),
}

#[derive(Debug)]
struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
    requires_grad: bool,
}

/// Recorded computation graph for one forward pass.
///
/// Parameters are borrowed from the store, never copied.
#[derive(Debug)]
pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node<'a>>,
    param_vars: Vec<Option<Var>>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> DgrError {
    DgrError::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(DgrError::Dimension {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        })
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value: Cow::Owned(t),
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let p = self.store.get(id);
        self.nodes.push(Node {
            op: Op::Param(id),
            value: Cow::Borrowed(&p.tensor),
            requires_grad: p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_matrix("matmul", ta)?;
        require_matrix("matmul", tb)?;
        if ta.cols() != tb.rows() {
            return Err(dim_err("matmul", ta, tb));
        }
        let (p, k, q) = (ta.rows(), ta.cols(), tb.cols());
        let out = Tensor::matrix(p, q, matmul_raw(ta.data(), tb.data(), p, k, q))?;
        Ok(self.push(Op::MatMul(a, b), out, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        require_matrix("transpose", ta)?;
        let out = ta.transpose();
        Ok(self.push(Op::Transpose(a), out, &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(dim_err("add", ta, tb));
        }
        let out = zip_map(ta, tb, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), out, &[a, b]))
    }

    /// Adds the `[1 x q]` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_matrix("add_row", ta)?;
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(dim_err("add_row", ta, tb));
        }
        let q = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.data()[i % q])
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::AddRow(a, b), out, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(dim_err("mul", ta, tb));
        }
        let out = zip_map(ta, tb, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), out, &[a, b]))
    }

    /// Element-wise product with a constant (masks, dropout keep-masks).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let ta = self.value(a);
        if !ta.same_shape(&c) {
            return Err(dim_err("mul_const", ta, &c));
        }
        let out = zip_map(ta, &c, |x, y| x * y);
        Ok(self.push(Op::MulConst(a, c), out, &[a]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = map(self.value(a), |x| x * k);
        self.push(Op::Scale(a, k), out, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = map(self.value(a), gru_math::sigmoid);
        self.push(Op::Sigmoid(a), out, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::tanh);
        self.push(Op::Tanh(a), out, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.data().iter().any(|&v| v <= 0.0) {
            return Err(DgrError::Numerical("log of non-positive value".into()));
        }
        let out = map(ta, f64::ln);
        Ok(self.push(Op::Log(a), out, &[a]))
    }

    /// Concatenates matrices with equal row counts along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| DgrError::contract("concat of zero tensors"))?;
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            require_matrix("concat_cols", t)?;
            if t.rows() != rows {
                return Err(dim_err("concat_cols", self.value(first), t));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, parts))
    }

    /// Stacks matrices with equal column counts along the first axis.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| DgrError::contract("stack of zero tensors"))?;
        let cols = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            require_matrix("stack_rows", t)?;
            if t.cols() != cols {
                return Err(dim_err("stack_rows", self.value(first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(Op::StackRows(parts.to_vec()), out, parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        require_matrix("slice_rows", ta)?;
        if start + len > ta.rows() || len == 0 {
            return Err(DgrError::contract(format!(
                "row slice {start}..{} out of range for {:?}",
                start + len,
                ta.shape()
            )));
        }
        let c = ta.cols();
        let out = Tensor::matrix(len, c, ta.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(Op::SliceRows(a, start), out, &[a]))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.slice_rows(a, i, 1)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        require_matrix("slice_cols", ta)?;
        if start + len > ta.cols() || len == 0 {
            return Err(DgrError::contract(format!(
                "column slice {start}..{} out of range for {:?}",
                start + len,
                ta.shape()
            )));
        }
        let mut data = Vec::with_capacity(ta.rows() * len);
        for r in 0..ta.rows() {
            data.extend_from_slice(&ta.row_slice(r)[start..start + len]);
        }
        let out = Tensor::matrix(ta.rows(), len, data)?;
        Ok(self.push(Op::SliceCols(a, start), out, &[a]))
    }

    /// Row lookup; `None` yields an all-zero row.
    pub fn gather_rows(&mut self, table: Var, idx: &[Option<usize>]) -> Result<Var> {
        let tt = self.value(table);
        require_matrix("gather_rows", tt)?;
        let c = tt.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for i in idx {
            match *i {
                Some(i) if i < tt.rows() => data.extend_from_slice(tt.row_slice(i)),
                Some(i) => {
                    return Err(DgrError::contract(format!(
                        "row id {i} out of range for table with {} rows",
                        tt.rows()
                    )))
                }
                None => data.extend(std::iter::repeat_n(0.0, c)),
            }
        }
        if idx.is_empty() {
            return Err(DgrError::contract("gather of zero rows"));
        }
        let out = Tensor::matrix(idx.len(), c, data)?;
        Ok(self.push(Op::GatherRows(table, idx.to_vec()), out, &[table]))
    }

    /// Softmax over the last axis; entries where `mask` is 0 receive
    /// [`MASK_PENALTY`] before normalisation and come out exactly zero.
    pub fn masked_softmax(&mut self, a: Var, mask: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        require_matrix("masked_softmax", ta)?;
        if !ta.same_shape(mask) {
            return Err(dim_err("masked_softmax", ta, mask));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(DgrError::contract("softmax mask must be 0/1"));
        }
        let c = ta.cols();
        let mut out = vec![0.0; ta.len()];
        for r in 0..ta.rows() {
            let mrow = mask.row_slice(r);
            if mrow.iter().all(|&m| m == 0.0) {
                return Err(DgrError::contract(format!("softmax row {r} is fully masked")));
            }
            let logits: Vec<f64> = ta
                .row_slice(r)
                .iter()
                .zip(mrow)
                .map(|(&x, &m)| x + (1.0 - m) * MASK_PENALTY)
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[r * c..(r + 1) * c];
            let mut sum = 0.0;
            for (o, &l) in orow.iter_mut().zip(&logits) {
                *o = (l - max).exp();
                sum += *o;
            }
            orow.iter_mut().for_each(|o| *o /= sum);
        }
        let out = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(Op::MaskedSoftmax(a), out, &[a]))
    }

    /// Same as [`Tape::masked_softmax`] with one mask shared by every row.
    pub fn masked_softmax_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let ta = self.value(a);
        if ta.cols() != keep.len() {
            return Err(DgrError::Dimension {
                op: "masked_softmax",
                lhs: ta.shape().to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let row: Vec<f64> = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        let mask = Tensor::matrix(
            ta.rows(),
            keep.len(),
            row.iter().cycle().take(ta.len()).copied().collect(),
        )?;
        self.masked_softmax(a, &mask)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), out, &[a])
    }

    /// Divides every entry by the total sum.
    pub fn normalize(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let s = ta.sum();
        if s <= 0.0 || !s.is_finite() {
            return Err(DgrError::Numerical(format!("cannot normalize by sum {s}")));
        }
        let out = map(ta, |x| x / s);
        Ok(self.push(Op::Normalize(a), out, &[a]))
    }

    /// `out[c] = sum of y[i] over positions i in groups[c]`, for a `[1 x n]` row `y`.
    pub fn pointer_sum(&mut self, y: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let ty = self.value(y);
        if ty.rows() != 1 {
            return Err(DgrError::Dimension {
                op: "pointer_sum",
                lhs: ty.shape().to_vec(),
                rhs: vec![1],
            });
        }
        if groups.is_empty() {
            return Err(DgrError::contract("pointer sum over an empty candidate set"));
        }
        let n = ty.cols();
        let mut out = Vec::with_capacity(groups.len());
        for g in groups {
            let mut acc = 0.0;
            for &i in g {
                if i >= n {
                    return Err(DgrError::contract(format!("position {i} outside document of {n}")));
                }
                acc += ty.data()[i];
            }
            out.push(acc);
        }
        let out = Tensor::row(out);
        Ok(self.push(Op::PointerSum(y, groups.to_vec()), out, &[y]))
    }

    fn gru_dims(&self, x: Var, h: Var, wx: Var, wh: Var, b: Var) -> Result<GruDims> {
        let (tx, th, twx, twh, tb) = (
            self.value(x),
            self.value(h),
            self.value(wx),
            self.value(wh),
            self.value(b),
        );
        let hidden = twh.rows();
        let input = twx.rows();
        if twx.cols() != 3 * hidden {
            return Err(dim_err("gru", twx, twh));
        }
        if twh.cols() != 3 * hidden {
            return Err(dim_err("gru", twh, twx));
        }
        if tb.rows() != 1 || tb.cols() != 3 * hidden {
            return Err(dim_err("gru", tb, twh));
        }
        if tx.cols() != input {
            return Err(dim_err("gru", tx, twx));
        }
        if th.cols() != hidden {
            return Err(dim_err("gru", th, twh));
        }
        Ok(GruDims { input, hidden })
    }

    /// One GRU step for every row of `x` (`[B x in]`) and `h` (`[B x h]`).
    /// Rows with `mask == false` pass their state through unchanged.
    pub fn gru_cell(&mut self, x: Var, h: Var, wx: Var, wh: Var, b: Var, mask: Option<&[bool]>) -> Result<Var> {
        let dims = self.gru_dims(x, h, wx, wh, b)?;
        let (tx, th) = (self.value(x), self.value(h));
        let rows = tx.rows();
        if th.rows() != rows {
            return Err(dim_err("gru_cell", tx, th));
        }
        let mask = match mask {
            Some(m) if m.len() != rows => {
                return Err(DgrError::Dimension {
                    op: "gru_cell",
                    lhs: tx.shape().to_vec(),
                    rhs: vec![m.len()],
                })
            }
            Some(m) => m.to_vec(),
            None => vec![true; rows],
        };
        let (twx, twh, tb) = (self.value(wx), self.value(wh), self.value(b));
        let hd = dims.hidden;
        let mut out = Vec::with_capacity(rows * hd);
        let mut cache = GruCache {
            z: vec![0.0; rows * hd],
            r: vec![0.0; rows * hd],
            n: vec![0.0; rows * hd],
            h_prev: th.data().to_vec(),
        };
        for (row, &live) in mask.iter().enumerate() {
            let hprev = th.row_slice(row);
            if !live {
                out.extend_from_slice(hprev);
                continue;
            }
            let step = gru_math::forward(dims, tx.row_slice(row), hprev, twx.data(), twh.data(), tb.data());
            cache.z[row * hd..(row + 1) * hd].copy_from_slice(&step.z);
            cache.r[row * hd..(row + 1) * hd].copy_from_slice(&step.r);
            cache.n[row * hd..(row + 1) * hd].copy_from_slice(&step.n);
            out.extend_from_slice(&step.h);
        }
        let out = Tensor::matrix(rows, hd, out)?;
        let op = GruOp {
            x,
            h,
            wx,
            wh,
            b,
            dims,
            mask,
            reverse: false,
            cache,
        };
        Ok(self.push(Op::GruCell(Box::new(op)), out, &[x, h, wx, wh, b]))
    }

    /// Runs a GRU over the rows of `x` (`[T x in]`) starting from `h0` (`[1 x h]`).
    ///
    /// Row `t` of the `[T x h]` output is the state after consuming position
    /// `t`; in reverse mode positions are consumed from `T-1` down to `0`.
    /// Masked positions leave the state untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn gru_seq(
        &mut self,
        x: Var,
        h0: Var,
        wx: Var,
        wh: Var,
        b: Var,
        mask: Option<&[bool]>,
        reverse: bool,
    ) -> Result<Var> {
        let dims = self.gru_dims(x, h0, wx, wh, b)?;
        let (tx, th) = (self.value(x), self.value(h0));
        let steps = tx.rows();
        if steps == 0 {
            return Err(DgrError::contract("GRU over an empty sequence"));
        }
        if th.rows() != 1 {
            return Err(dim_err("gru_seq", th, tx));
        }
        let mask = match mask {
            Some(m) if m.len() != steps => {
                return Err(DgrError::Dimension {
                    op: "gru_seq",
                    lhs: tx.shape().to_vec(),
                    rhs: vec![m.len()],
                })
            }
            Some(m) => m.to_vec(),
            None => vec![true; steps],
        };
        let (twx, twh, tb) = (self.value(wx), self.value(wh), self.value(b));
        let hd = dims.hidden;
        let mut out = vec![0.0; steps * hd];
        let mut cache = GruCache {
            z: vec![0.0; steps * hd],
            r: vec![0.0; steps * hd],
            n: vec![0.0; steps * hd],
            h_prev: vec![0.0; steps * hd],
        };
        let mut h = th.data().to_vec();
        for t in step_order(steps, reverse) {
            let span = t * hd..(t + 1) * hd;
            cache.h_prev[span.clone()].copy_from_slice(&h);
            if mask[t] {
                let step = gru_math::forward(dims, tx.row_slice(t), &h, twx.data(), twh.data(), tb.data());
                cache.z[span.clone()].copy_from_slice(&step.z);
                cache.r[span.clone()].copy_from_slice(&step.r);
                cache.n[span.clone()].copy_from_slice(&step.n);
                h = step.h;
            }
            out[span].copy_from_slice(&h);
        }
        let out = Tensor::matrix(steps, hd, out)?;
        let op = GruOp {
            x,
            h: h0,
            wx,
            wh,
            b,
            dims,
            mask,
            reverse,
            cache,
        };
        Ok(self.push(Op::GruSeq(Box::new(op)), out, &[x, h0, wx, wh, b]))
    }

    /// Inverted dropout. Identity when `rate == 0` or outside training.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(DgrError::contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(a);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mask = Tensor::new(t.shape().to_vec(), mask)?;
        self.mul_const(a, mask)
    }

    /// Reverse sweep from a scalar `loss`; returns gradients for every
    /// trainable parameter that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(DgrError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        let mut out = Gradients::with_capacity(self.store.len());

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) {
        let y = &*node.value;
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => out.add(*id, g),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (p, k, q) = (ta.rows(), ta.cols(), tb.cols());
                if self.requires_grad(*a) {
                    let ga = Tensor::matrix(p, k, matmul_nt_raw(g.data(), tb.data(), p, q, k)).unwrap();
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = Tensor::matrix(k, q, matmul_tn_raw(ta.data(), g.data(), p, k, q)).unwrap();
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let q = g.cols();
                let mut gb = vec![0.0; q];
                for (i, v) in g.data().iter().enumerate() {
                    gb[i % q] += v;
                }
                self.accumulate(grads, *b, Tensor::row(gb));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, zip_map(g, tb, |x, y| x * y));
                self.accumulate(grads, *b, zip_map(g, ta, |x, y| x * y));
            }
            Op::MulConst(a, c) => self.accumulate(grads, *a, zip_map(g, c, |x, y| x * y)),
            Op::Scale(a, k) => {
                let k = *k;
                self.accumulate(grads, *a, map(g, |x| x * k));
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv))),
            Op::Tanh(a) => self.accumulate(grads, *a, zip_map(g, y, |gv, yv| gv * (1.0 - yv * yv))),
            Op::Log(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, zip_map(g, ta, |gv, x| gv / x));
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut data = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row_slice(r)[offset..offset + c]);
                        }
                        self.accumulate(grads, p, Tensor::matrix(rows, c, data).unwrap());
                    }
                    offset += c;
                }
            }
            Op::StackRows(parts) => {
                let c = g.cols();
                let mut row = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.requires_grad(p) {
                        let data = g.data()[row * c..(row + r) * c].to_vec();
                        self.accumulate(grads, p, Tensor::matrix(r, c, data).unwrap());
                    }
                    row += r;
                }
            }
            Op::SliceRows(a, start) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.shape());
                let c = ta.cols();
                ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.shape());
                let (c, len) = (ta.cols(), g.cols());
                for r in 0..ta.rows() {
                    ga.data_mut()[r * c + start..r * c + start + len].copy_from_slice(g.row_slice(r));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows(table, idx) => {
                let tt = self.value(*table);
                let mut gt = Tensor::zeros(tt.shape());
                let c = tt.cols();
                for (k, i) in idx.iter().enumerate() {
                    if let Some(i) = *i {
                        let dst = &mut gt.data_mut()[i * c..(i + 1) * c];
                        for (d, s) in dst.iter_mut().zip(g.row_slice(k)) {
                            *d += s;
                        }
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::MaskedSoftmax(a) => {
                let c = y.cols();
                let mut ga = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        ga[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), ga).unwrap());
            }
            Op::SumAll(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.data()[0]));
            }
            Op::Normalize(a) => {
                let s = self.value(*a).sum();
                let dot: f64 = g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
                self.accumulate(grads, *a, map(g, |gv| (gv - dot) / s));
            }
            Op::PointerSum(yv, groups) => {
                let ty = self.value(*yv);
                let mut gy = vec![0.0; ty.len()];
                for (c, grp) in groups.iter().enumerate() {
                    for &i in grp {
                        gy[i] += g.data()[c];
                    }
                }
                self.accumulate(grads, *yv, Tensor::new(ty.shape().to_vec(), gy).unwrap());
            }
            Op::GruCell(op) => self.backward_gru_cell(op, g, grads),
            Op::GruSeq(op) => self.backward_gru_seq(op, g, grads),
        }
    }

    fn backward_gru_cell(&self, op: &GruOp, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (tx, twx, twh) = (self.value(op.x), self.value(op.wx), self.value(op.wh));
        let dims = op.dims;
        let hd = dims.hidden;
        let rows = tx.rows();
        let mut acc = gru_math::GradAcc::new(dims);
        let mut gx = vec![0.0; rows * dims.input];
        let mut gh = vec![0.0; rows * hd];
        for row in 0..rows {
            let span = row * hd..(row + 1) * hd;
            let grow = g.row_slice(row);
            if !op.mask[row] {
                gh[span].copy_from_slice(grow);
                continue;
            }
            let saved = gru_math::Saved {
                z: &op.cache.z[span.clone()],
                r: &op.cache.r[span.clone()],
                n: &op.cache.n[span.clone()],
                h_prev: &op.cache.h_prev[span.clone()],
            };
            let (dx, dh) = gru_math::backward(dims, tx.row_slice(row), saved, twx.data(), twh.data(), grow, &mut acc);
            gx[row * dims.input..(row + 1) * dims.input].copy_from_slice(&dx);
            gh[span].copy_from_slice(&dh);
        }
        self.finish_gru_backward(op, gx, gh, acc, grads);
    }

    fn backward_gru_seq(&self, op: &GruOp, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (tx, twx, twh) = (self.value(op.x), self.value(op.wx), self.value(op.wh));
        let dims = op.dims;
        let hd = dims.hidden;
        let steps = tx.rows();
        let mut acc = gru_math::GradAcc::new(dims);
        let mut gx = vec![0.0; steps * dims.input];
        let mut carry = vec![0.0; hd];
        let order: Vec<usize> = step_order(steps, op.reverse).collect();
        for &t in order.iter().rev() {
            let span = t * hd..(t + 1) * hd;
            for (c, gv) in carry.iter_mut().zip(g.row_slice(t)) {
                *c += gv;
            }
            if !op.mask[t] {
                continue;
            }
            let saved = gru_math::Saved {
                z: &op.cache.z[span.clone()],
                r: &op.cache.r[span.clone()],
                n: &op.cache.n[span.clone()],
                h_prev: &op.cache.h_prev[span.clone()],
            };
            let (dx, dh) = gru_math::backward(dims, tx.row_slice(t), saved, twx.data(), twh.data(), &carry, &mut acc);
            gx[t * dims.input..(t + 1) * dims.input].copy_from_slice(&dx);
            carry = dh;
        }
        self.finish_gru_backward(op, gx, carry, acc, grads);
    }

    fn finish_gru_backward(
        &self,
        op: &GruOp,
        gx: Vec<f64>,
        gh: Vec<f64>,
        acc: gru_math::GradAcc,
        grads: &mut [Option<Tensor>],
    ) {
        let xs = self.value(op.x).shape().to_vec();
        let hs = self.value(op.h).shape().to_vec();
        let dims = op.dims;
        self.accumulate(grads, op.x, Tensor::new(xs, gx).unwrap());
        self.accumulate(grads, op.h, Tensor::new(hs, gh).unwrap());
        self.accumulate(
            grads,
            op.wx,
            Tensor::matrix(dims.input, 3 * dims.hidden, acc.wx).unwrap(),
        );
        self.accumulate(
            grads,
            op.wh,
            Tensor::matrix(dims.hidden, 3 * dims.hidden, acc.wh).unwrap(),
        );
        self.accumulate(grads, op.b, Tensor::row(acc.b));
    }
}

fn step_order(steps: usize, reverse: bool) -> Box<dyn DoubleEndedIterator<Item = usize>> {
    if reverse {
        Box::new((0..steps).rev())
    } else {
        Box::new(0..steps)
    }
}
