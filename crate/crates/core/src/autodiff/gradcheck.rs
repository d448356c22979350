//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use super::param::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{DgrError, Result};

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
///
/// The floor keeps entries whose true gradient is (numerically) zero from
/// dividing round-off noise by round-off noise.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct WorstEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<WorstEntry>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn eval_loss<F>(store: &ParamStore, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let loss = loss_fn(&mut tape)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(DgrError::contract("gradient check needs a scalar loss"));
    }
    Ok(v.data()[0])
}

/// Compares the tape gradient of every trainable scalar against a central
/// difference. `loss_fn` must rebuild the same deterministic graph each call.
pub fn check_gradients<F>(store: &mut ParamStore, opts: GradCheckOptions, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new(store);
        let loss = loss_fn(&mut tape)?;
        tape.backward(loss)?
    };
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for id in store.trainable_ids() {
        let analytic = grads.get(store, id);
        for k in 0..analytic.len() {
            let orig = store.tensor(id).data()[k];
            store.tensor_mut(id).data_mut()[k] = orig + opts.step;
            let plus = eval_loss(store, &loss_fn);
            store.tensor_mut(id).data_mut()[k] = orig - opts.step;
            let minus = eval_loss(store, &loss_fn);
            store.tensor_mut(id).data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.step);
            let a = analytic.data()[k];
            let err = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(WorstEntry {
                    param: store.get(id).name.clone(),
                    index: k,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
