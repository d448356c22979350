//! Independent reference implementations used as test oracles.
//!
//! Nothing here touches the tape: every routine is plain nested-loop
//! arithmetic over `Vec<f64>` so it can check the tape-based code paths.

#![allow(dead_code)]

pub mod fuzz;
pub mod ga_reader;
pub mod toy;

use dgr_core::autodiff::{GruParams, ParamStore, Tensor};
use rand::Rng;

pub fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Weight matrices of one GRU read out of a store as nested rows.
pub struct ScalarGru {
    pub wx: Vec<Vec<f64>>,
    pub wh: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub hidden: usize,
}

impl ScalarGru {
    pub fn from_store(store: &ParamStore, p: &GruParams) -> Self {
        ScalarGru {
            wx: store.tensor(p.wx).to_rows(),
            wh: store.tensor(p.wh).to_rows(),
            b: store.tensor(p.b).data().to_vec(),
            hidden: p.hidden,
        }
    }

    /// Column `col` of `x W + h U` evaluated term by term.
    fn pre(&self, x: &[f64], hin: &[f64], col: usize) -> f64 {
        let mut s = self.b[col];
        for i in 0..x.len() {
            s += x[i] * self.wx[i][col];
        }
        for k in 0..hin.len() {
            s += hin[k] * self.wh[k][col];
        }
        s
    }

    pub fn step(&self, x: &[f64], h: &[f64]) -> Vec<f64> {
        let hd = self.hidden;
        let zeros = vec![0.0; hd];
        let mut out = vec![0.0; hd];
        let r: Vec<f64> = (0..hd).map(|j| sig(self.pre(x, h, hd + j))).collect();
        let rh: Vec<f64> = (0..hd).map(|k| r[k] * h[k]).collect();
        for j in 0..hd {
            let z = sig(self.pre(x, h, j));
            // candidate: x Wn + bn + (r*h) Un
            let mut a = self.pre(x, &zeros, 2 * hd + j);
            for k in 0..hd {
                a += rh[k] * self.wh[k][2 * hd + j];
            }
            let n = a.tanh();
            out[j] = (1.0 - z) * h[j] + z * n;
        }
        out
    }

    /// States after each position; `reverse` consumes from the end.
    pub fn run(&self, xs: &[Vec<f64>], h0: &[f64], reverse: bool) -> Vec<Vec<f64>> {
        let t = xs.len();
        let mut out = vec![Vec::new(); t];
        let mut h = h0.to_vec();
        let order: Vec<usize> = if reverse {
            (0..t).rev().collect()
        } else {
            (0..t).collect()
        };
        for i in order {
            h = self.step(&xs[i], &h);
            out[i] = h.clone();
        }
        out
    }
}

/// Scalar bidirectional read: rows are `[fwd | bwd]`, plus final states.
pub fn scalar_bigru(
    fwd: &ScalarGru,
    bwd: &ScalarGru,
    xs: &[Vec<f64>],
    h0f: &[f64],
    h0b: &[f64],
) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let f = fwd.run(xs, h0f, false);
    let b = bwd.run(xs, h0b, true);
    let rows = f
        .iter()
        .zip(&b)
        .map(|(a, c)| a.iter().chain(c).copied().collect())
        .collect();
    (rows, f.last().unwrap().clone(), b[0].clone())
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Plain softmax over the entries where `keep` is true; zeros elsewhere.
pub fn softmax_masked(logits: &[f64], keep: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .zip(keep)
        .map(|(&l, &k)| if k { (l - max).exp() } else { 0.0 })
        .collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|e| e / s).collect()
}
