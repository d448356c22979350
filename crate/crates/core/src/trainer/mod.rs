//! Batching, loss, Adam and the epoch loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Gradients, ParamStore, Tape, Tensor};
use crate::config::{write_opt, KvMap, KvReader};
use crate::corpus::DatasetSplit;
use crate::error::{DgrError, Result};
use crate::model::{EncodedSample, Model};
use crate::reader::Dropout;

pub const LOG_HEADER: &str = "epoch,train_loss,dev_acc,seconds";
pub const LOG_FILE: &str = "train_log.csv";
pub const BEST_DIR: &str = "best";

#[derive(Clone, Debug, PartialEq)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub dropout: f64,
    /// Apply dropout to each hop's BiGRU inputs as well as the embeddings.
    pub hop_dropout: bool,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without dev improvement before stopping; `None` disables.
    pub patience: Option<usize>,
    /// Stop as soon as dev accuracy reaches this value.
    pub stop_accuracy: Option<f64>,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; `None` disables.
    pub clip: Option<f64>,
    pub shuffle: bool,
    /// Record wall-clock seconds in the log; off keeps logs reproducible.
    pub log_seconds: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            learning_rate: 0.0005,
            dropout: 0.4,
            hop_dropout: true,
            batch_size: 32,
            epochs: 20,
            patience: Some(5),
            stop_accuracy: None,
            seed: 1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip: None,
            shuffle: true,
            log_seconds: false,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DgrError::config("dropout", format!("{} outside [0, 1)", self.dropout)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(DgrError::config(
                "learning_rate",
                "must be a finite non-negative number",
            ));
        }
        if self.batch_size == 0 {
            return Err(DgrError::config("batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(DgrError::config("beta1", "Adam betas must lie in [0, 1)"));
        }
        if self.epsilon <= 0.0 {
            return Err(DgrError::config("epsilon", "must be positive"));
        }
        if matches!(self.clip, Some(c) if c <= 0.0) {
            return Err(DgrError::config("clip", "must be positive"));
        }
        Ok(())
    }

    pub(crate) fn read(r: &mut KvReader) -> Result<Self> {
        let d = HyperParams::default();
        let hp = HyperParams {
            learning_rate: r.take("learning_rate", d.learning_rate)?,
            dropout: r.take("dropout", d.dropout)?,
            hop_dropout: r.take("hop_dropout", d.hop_dropout)?,
            batch_size: r.take("batch_size", d.batch_size)?,
            epochs: r.take("epochs", d.epochs)?,
            patience: match r.take::<String>("patience", "5".into())?.as_str() {
                "none" => None,
                v => Some(
                    v.parse()
                        .map_err(|e| DgrError::config("patience", format!("{v:?}: {e}")))?,
                ),
            },
            stop_accuracy: r.take_opt("stop_accuracy")?,
            seed: r.take("seed", d.seed)?,
            beta1: r.take("beta1", d.beta1)?,
            beta2: r.take("beta2", d.beta2)?,
            epsilon: r.take("epsilon", d.epsilon)?,
            clip: r.take_opt("clip")?,
            shuffle: r.take("shuffle", d.shuffle)?,
            log_seconds: r.take("log_seconds", d.log_seconds)?,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub(crate) fn write(&self, m: &mut KvMap) {
        m.insert("learning_rate".into(), self.learning_rate.to_string());
        m.insert("dropout".into(), self.dropout.to_string());
        m.insert("hop_dropout".into(), self.hop_dropout.to_string());
        m.insert("batch_size".into(), self.batch_size.to_string());
        m.insert("epochs".into(), self.epochs.to_string());
        write_opt(m, "patience", &self.patience);
        write_opt(m, "stop_accuracy", &self.stop_accuracy);
        m.insert("seed".into(), self.seed.to_string());
        m.insert("beta1".into(), self.beta1.to_string());
        m.insert("beta2".into(), self.beta2.to_string());
        m.insert("epsilon".into(), self.epsilon.to_string());
        write_opt(m, "clip", &self.clip);
        m.insert("shuffle".into(), self.shuffle.to_string());
        m.insert("log_seconds".into(), self.log_seconds.to_string());
    }
}

/// First and second moments per parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
    pub t: u64,
}

/// One bias-corrected Adam update of every trainable parameter.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState, hp: &HyperParams) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    state.m.resize(store.len(), None);
    state.v.resize(store.len(), None);
    for id in store.trainable_ids() {
        let g = grads.get(store, id);
        let i = id.index();
        let m = state.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
        let theta = store.tensor_mut(id);
        for (((th, &gj), mj), vj) in theta
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mj = hp.beta1 * *mj + (1.0 - hp.beta1) * gj;
            *vj = hp.beta2 * *vj + (1.0 - hp.beta2) * gj * gj;
            let mh = *mj / bc1;
            let vh = *vj / bc2;
            *th -= hp.learning_rate * mh / (vh.sqrt() + hp.epsilon);
        }
    }
}

/// Mean of `-ln p` over gold-answer probabilities.
pub fn nll_loss(gold_probs: &[f64]) -> Result<f64> {
    if gold_probs.is_empty() {
        return Err(DgrError::contract("loss over an empty batch"));
    }
    Ok(gold_probs.iter().map(|p| -p.ln()).sum::<f64>() / gold_probs.len() as f64)
}

/// Samples padded to the longest document and query in the batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub index: usize,
    pub samples: Vec<EncodedSample>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Splits into consecutive batches, shuffling first when `rng` is given.
pub fn make_batches(samples: &[EncodedSample], batch_size: usize, rng: Option<&mut ChaCha8Rng>) -> Result<Vec<Batch>> {
    if samples.is_empty() {
        return Err(DgrError::contract("cannot batch an empty split"));
    }
    if batch_size == 0 {
        return Err(DgrError::config("batch_size", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    Ok(order
        .chunks(batch_size)
        .enumerate()
        .map(|(index, idx)| {
            let n = idx.iter().map(|&i| samples[i].doc.len()).max().unwrap_or(0);
            let m = idx.iter().map(|&i| samples[i].query.len()).max().unwrap_or(0);
            Batch {
                index,
                samples: idx.iter().map(|&i| samples[i].padded(n, m)).collect(),
            }
        })
        .collect())
}

pub fn encode_split(model: &Model, split: &DatasetSplit) -> Result<Vec<EncodedSample>> {
    split.samples.iter().map(|s| model.encode(s)).collect()
}

/// Fraction of samples whose prediction matches the gold answer.
pub fn evaluate_accuracy(model: &Model, samples: &[EncodedSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(DgrError::contract("accuracy over an empty split"));
    }
    let hits: Vec<bool> = samples
        .par_iter()
        .map(|s| {
            let gold = s
                .answer
                .ok_or_else(|| DgrError::contract(format!("sample {} has no gold answer", s.id)))?;
            Ok(model.predict(s)?.predicted == s.candidates[gold])
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / samples.len() as f64)
}

/// Mean loss and gradient over a batch. Each sample draws its own dropout
/// stream from `seeds`, so the result does not depend on thread timing.
pub fn batch_gradients(
    model: &Model,
    batch: &Batch,
    rate: f64,
    hop_dropout: bool,
    seeds: &[u64],
) -> Result<(f64, Gradients)> {
    let parts: Vec<(f64, Gradients)> = batch
        .samples
        .par_iter()
        .zip(seeds)
        .map(|(s, &seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut dropout = if rate > 0.0 {
                Dropout::train(rate, &mut rng).with_hops(hop_dropout)
            } else {
                Dropout::off()
            };
            let mut tape = Tape::new(&model.store);
            let loss = model.sample_loss(&mut tape, s, &mut dropout)?;
            let value = tape.value(loss).data()[0];
            Ok((value, tape.backward(loss)?))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut grads: Option<Gradients> = None;
    for (l, g) in parts {
        total += l;
        match grads.as_mut() {
            Some(acc) => acc.merge(&g),
            None => grads = Some(g),
        }
    }
    let mut grads = grads.ok_or_else(|| DgrError::contract("empty batch"))?;
    let k = 1.0 / batch.len() as f64;
    grads.scale(k);
    Ok((total * k, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_acc: f64,
    pub seconds: f64,
}

impl EpochLog {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.3}",
            self.epoch, self.train_loss, self.dev_acc, self.seconds
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_dev_acc: f64,
    pub log_csv: String,
    pub best_dir: Option<PathBuf>,
}

fn diagnostics(store: &ParamStore) -> String {
    let mut norms = store.norms();
    // NaN sorts above every finite norm, so broken tensors come first
    norms.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut s = String::new();
    for (name, n) in norms.iter().take(5) {
        let _ = write!(s, " {name}={n:.3e}");
    }
    s
}

/// Trains `model` in place and leaves it holding the best-dev parameters.
/// With `out_dir`, the log is written there and the best model is saved
/// under `out_dir/best`.
pub fn train(
    model: &mut Model,
    train: &DatasetSplit,
    dev: &DatasetSplit,
    hp: &HyperParams,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    hp.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(DgrError::contract("training needs non-empty train and dev splits"));
    }
    let train_enc = encode_split(model, train)?;
    let dev_enc = encode_split(model, dev)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut adam = AdamState::default();
    let mut log_csv = format!("{LOG_HEADER}\n");
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut stale = 0;
    let best_dir = out_dir.map(|d| d.join(BEST_DIR));
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| DgrError::io(d, e))?;
    }
    for epoch in 1..=hp.epochs {
        let start = Instant::now();
        let batches = make_batches(&train_enc, hp.batch_size, hp.shuffle.then_some(&mut rng))?;
        let mut loss_sum = 0.0;
        for batch in &batches {
            let seeds: Vec<u64> = (0..batch.len()).map(|_| rng.gen()).collect();
            let located = |what: String| {
                DgrError::Numerical(format!(
                    "{what} at epoch {epoch}, batch {}; largest parameter norms:{}",
                    batch.index,
                    diagnostics(&model.store)
                ))
            };
            let (loss, mut grads) = match batch_gradients(model, batch, hp.dropout, hp.hop_dropout, &seeds) {
                Err(DgrError::Numerical(what)) => return Err(located(what)),
                r => r?,
            };
            if !loss.is_finite() || !grads.global_norm().is_finite() {
                return Err(located(format!("non-finite loss {loss}")));
            }
            if let Some(c) = hp.clip {
                let n = grads.global_norm();
                if n > c {
                    grads.scale(c / n);
                }
            }
            adam_step(&mut model.store, &grads, &mut adam, hp);
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / train_enc.len() as f64;
        let dev_acc = evaluate_accuracy(model, &dev_enc)?;
        let seconds = if hp.log_seconds {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let entry = EpochLog {
            epoch,
            train_loss,
            dev_acc,
            seconds,
        };
        log::info!("{}", entry.csv_line());
        log_csv.push_str(&entry.csv_line());
        log_csv.push('\n');
        epochs.push(entry);
        if let Some(d) = out_dir {
            let p = d.join(LOG_FILE);
            fs::write(&p, &log_csv).map_err(|e| DgrError::io(&p, e))?;
        }

        if best.as_ref().is_none_or(|b| dev_acc > b.1) {
            best = Some((epoch, dev_acc, model.store.clone()));
            stale = 0;
            if let Some(d) = &best_dir {
                model.save(d)?;
            }
        } else {
            stale += 1;
        }
        if hp.stop_accuracy.is_some_and(|t| dev_acc >= t) {
            log::info!("dev accuracy {dev_acc} reached target at epoch {epoch}");
            break;
        }
        if hp.patience.is_some_and(|p| stale >= p) {
            log::info!("no dev improvement for {stale} epochs; stopping at epoch {epoch}");
            break;
        }
    }
    let (best_epoch, best_dev_acc) = match best {
        Some((e, a, store)) => {
            model.store = store;
            (e, a)
        }
        None => (0, 0.0),
    };
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_dev_acc,
        log_csv,
        best_dir,
    })
}
