mod common;

use common::{flatten, max_abs_diff, random_matrix, scalar_bigru, ScalarGru};
use dgr_core::autodiff::gradcheck::{check_gradients, GradCheckOptions};
use dgr_core::autodiff::{bigru, gru_cell, zero_state, BiGruParams, GruParams, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;

fn zero_gru(store: &mut ParamStore, name: &str, input: usize, hidden: usize) -> GruParams {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = GruParams::new(store, name, input, hidden, &mut rng).unwrap();
    for id in p.ids() {
        store.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    p
}

#[test]
fn gru_cell_zero_weights_halves_state() {
    let mut store = ParamStore::new();
    let p = zero_gru(&mut store, "g", 3, 2);
    let mut tape = Tape::new(&store);
    let x = tape.constant(Tensor::row(vec![0.3, -1.0, 2.0]));
    let h = tape.constant(Tensor::row(vec![2.0, -4.0]));
    let out = gru_cell(&mut tape, x, h, &p).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, -2.0]);
}

#[test]
fn gru_cell_saturated_update_gate_returns_candidate() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = GruParams::new(&mut store, "g", 3, 2, &mut rng).unwrap();
    for j in 0..2 {
        store.tensor_mut(p.b).data_mut()[j] = 50.0;
    }
    let x = vec![0.2, -0.7, 0.4];
    let h = vec![0.5, -0.1];
    let oracle = ScalarGru::from_store(&store, &p);
    // candidate computed directly: with z == 1 the new state is n
    let r: Vec<f64> = (0..2)
        .map(|j| {
            let mut s = oracle.b[2 + j];
            for i in 0..3 {
                s += x[i] * oracle.wx[i][2 + j];
            }
            for k in 0..2 {
                s += h[k] * oracle.wh[k][2 + j];
            }
            common::sig(s)
        })
        .collect();
    let cand: Vec<f64> = (0..2)
        .map(|j| {
            let mut s = oracle.b[4 + j];
            for i in 0..3 {
                s += x[i] * oracle.wx[i][4 + j];
            }
            for k in 0..2 {
                s += r[k] * h[k] * oracle.wh[k][4 + j];
            }
            s.tanh()
        })
        .collect();
    let mut tape = Tape::new(&store);
    let xv = tape.constant(Tensor::row(x));
    let hv = tape.constant(Tensor::row(h));
    let out = gru_cell(&mut tape, xv, hv, &p).unwrap();
    assert!(max_abs_diff(tape.value(out).data(), &cand) < 1e-12);
}

#[test]
fn gru_cell_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (input, hidden) = (rng.gen_range(1..6), rng.gen_range(1..5));
        let mut store = ParamStore::new();
        let p = GruParams::new(&mut store, "g", input, hidden, &mut rng).unwrap();
        let x: Vec<f64> = (0..input).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..hidden).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let expected = ScalarGru::from_store(&store, &p).step(&x, &h);
        let mut tape = Tape::new(&store);
        let xv = tape.constant(Tensor::row(x));
        let hv = tape.constant(Tensor::row(h));
        let out = gru_cell(&mut tape, xv, hv, &p).unwrap();
        assert!(max_abs_diff(tape.value(out).data(), &expected) < 1e-14);
    }
}

#[test]
fn gru_cell_dimension_mismatch() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = GruParams::new(&mut store, "g", 3, 2, &mut rng).unwrap();
    let mut tape = Tape::new(&store);
    let x = tape.constant(Tensor::row(vec![1.0, 2.0]));
    let h = tape.constant(Tensor::row(vec![0.0, 0.0]));
    assert!(matches!(
        gru_cell(&mut tape, x, h, &p),
        Err(dgr_core::DgrError::Dimension { .. })
    ));
}

#[test]
fn bigru_single_step_zero_weights() {
    let mut store = ParamStore::new();
    let fwd = zero_gru(&mut store, "f", 2, 3);
    let bwd = zero_gru(&mut store, "b", 2, 3);
    let p = BiGruParams { fwd, bwd };
    let mut tape = Tape::new(&store);
    let seq = tape.constant(Tensor::row(vec![1.0, -1.0]));
    let h0 = zero_state(&mut tape, 3);
    let out = bigru(&mut tape, seq, h0, h0, &p, None).unwrap();
    assert_eq!(tape.value(out.outputs).data(), &[0.0; 6]);
    assert_eq!(tape.value(out.outputs).shape(), &[1, 6]);
}

#[test]
fn bigru_rejects_empty_sequence() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = BiGruParams::new(&mut store, "bi", 2, 2, &mut rng).unwrap();
    let mut tape = Tape::new(&store);
    let seq = tape.constant(Tensor::zeros(&[0, 2]));
    let h0 = zero_state(&mut tape, 2);
    assert!(matches!(
        bigru(&mut tape, seq, h0, h0, &p, None),
        Err(dgr_core::DgrError::Contract(_))
    ));
}

#[test]
fn bigru_reversal_swaps_halves_with_shared_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let fwd = GruParams::new(&mut store, "f", 3, 2, &mut rng).unwrap();
    let p = BiGruParams {
        fwd: fwd.clone(),
        bwd: fwd,
    };
    let xs = random_matrix(&mut rng, 5, 3, 1.0);
    let rev = Tensor::from_rows(&xs.to_rows().into_iter().rev().collect::<Vec<_>>()).unwrap();
    let mut tape = Tape::new(&store);
    let h0 = zero_state(&mut tape, 2);
    let a = tape.constant(xs);
    let b = tape.constant(rev);
    let oa = bigru(&mut tape, a, h0, h0, &p, None).unwrap();
    let ob = bigru(&mut tape, b, h0, h0, &p, None).unwrap();
    let ra = tape.value(oa.outputs).to_rows();
    let rb = tape.value(ob.outputs).to_rows();
    for t in 0..5 {
        let mirrored = &ra[4 - t];
        let swapped: Vec<f64> = mirrored[2..].iter().chain(&mirrored[..2]).copied().collect();
        assert_eq!(rb[t], swapped);
    }
}

#[test]
fn bigru_matches_unrolled_cell_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let p = BiGruParams::new(&mut store, "bi", 4, 3, &mut rng).unwrap();
    let xs = random_matrix(&mut rng, 3, 4, 1.0);
    let h0f = random_matrix(&mut rng, 1, 3, 0.5);
    let h0b = random_matrix(&mut rng, 1, 3, 0.5);

    let mut tape = Tape::new(&store);
    let seq = tape.constant(xs.clone());
    let hf = tape.constant(h0f.clone());
    let hb = tape.constant(h0b.clone());
    let out = bigru(&mut tape, seq, hf, hb, &p, None).unwrap();

    // unrolled chain of single gru_cell nodes
    let mut fwd_states = Vec::new();
    let mut h = hf;
    for t in 0..3 {
        let x = tape.row(seq, t).unwrap();
        h = gru_cell(&mut tape, x, h, &p.fwd).unwrap();
        fwd_states.push(h);
    }
    let mut bwd_states = vec![hb; 3];
    let mut h = hb;
    for t in (0..3).rev() {
        let x = tape.row(seq, t).unwrap();
        h = gru_cell(&mut tape, x, h, &p.bwd).unwrap();
        bwd_states[t] = h;
    }
    let got = tape.value(out.outputs).to_rows();
    for t in 0..3 {
        let expect: Vec<f64> = tape
            .value(fwd_states[t])
            .data()
            .iter()
            .chain(tape.value(bwd_states[t]).data())
            .copied()
            .collect();
        assert!(max_abs_diff(&got[t], &expect) < 1e-15);
    }
    assert_eq!(tape.value(out.final_fwd).data(), tape.value(fwd_states[2]).data());
    assert_eq!(tape.value(out.final_bwd).data(), tape.value(bwd_states[0]).data());

    // and the scalar oracle
    let (rows, ff, fb) = scalar_bigru(
        &ScalarGru::from_store(&store, &p.fwd),
        &ScalarGru::from_store(&store, &p.bwd),
        &xs.to_rows(),
        h0f.data(),
        h0b.data(),
    );
    assert!(max_abs_diff(tape.value(out.outputs).data(), &flatten(&rows)) < 1e-14);
    assert!(max_abs_diff(tape.value(out.final_fwd).data(), &ff) < 1e-14);
    assert!(max_abs_diff(tape.value(out.final_bwd).data(), &fb) < 1e-14);
}

#[test]
fn bigru_masked_tail_leaves_real_positions_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let p = BiGruParams::new(&mut store, "bi", 3, 2, &mut rng).unwrap();
    let xs = random_matrix(&mut rng, 4, 3, 1.0);
    let mut padded_rows = xs.to_rows();
    padded_rows.extend((0..3).map(|_| vec![rng.gen_range(-1.0..1.0); 3]));
    let padded = Tensor::from_rows(&padded_rows).unwrap();
    let mask = [true, true, true, true, false, false, false];

    let mut tape = Tape::new(&store);
    let h0 = zero_state(&mut tape, 2);
    let a = tape.constant(xs);
    let b = tape.constant(padded);
    let oa = bigru(&mut tape, a, h0, h0, &p, None).unwrap();
    let ob = bigru(&mut tape, b, h0, h0, &p, Some(&mask)).unwrap();
    let ra = tape.value(oa.outputs).data().to_vec();
    let rb = tape.value(ob.outputs).data().to_vec();
    assert_eq!(&rb[..ra.len()], &ra[..]);
    assert!(rb[ra.len()..].iter().all(|&v| v == 0.0));
    assert_eq!(tape.value(oa.final_fwd).data(), tape.value(ob.final_fwd).data());
    assert_eq!(tape.value(oa.final_bwd).data(), tape.value(ob.final_bwd).data());
}

/// Builds a store with one trainable parameter per shape.
fn params(rng: &mut ChaCha8Rng, shapes: &[(&str, usize, usize)]) -> ParamStore {
    let mut s = ParamStore::new();
    for &(n, r, c) in shapes {
        s.add(n, random_matrix(rng, r, c, 1.0), true).unwrap();
    }
    s
}

fn assert_gradcheck<F>(store: &mut ParamStore, f: F)
where
    F: Fn(&mut Tape<'_>) -> dgr_core::Result<dgr_core::autodiff::Var>,
{
    let report = check_gradients(store, GradCheckOptions::default(), f).unwrap();
    assert!(report.passes(GRAD_TOL), "{report:?}");
    assert!(report.checked > 0);
}

#[test]
fn gradcheck_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for trial in 0..5 {
        let (p, k, q) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(2..6));
        let mut store = params(&mut rng, &[("a", p, k), ("b", k, q), ("bias", 1, q), ("w", p, q)]);
        let mask = Tensor::matrix(
            p,
            q,
            (0..p * q)
                .map(|i| if i % q < 2 || rng.gen_bool(0.7) { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        let ids: Vec<_> = store.ids().collect();
        let seed = 1000 + trial;
        assert_gradcheck(&mut store, |t| {
            let (a, b, bias, w) = (t.param(ids[0]), t.param(ids[1]), t.param(ids[2]), t.param(ids[3]));
            let ab = t.matmul(a, b)?;
            let ab = t.add_row(ab, bias)?;
            let s = t.sigmoid(ab);
            let th = t.tanh(w);
            let m = t.mul(s, th)?;
            let sum = t.add(m, w)?;
            let cat = t.concat_cols(&[sum, s])?;
            let sl = t.slice_cols(cat, 1, q)?;
            let tr = t.transpose(sl)?;
            let tr = t.transpose(tr)?;
            let sm = t.masked_softmax(tr, &mask)?;
            let stacked = t.stack_rows(&[sm, s])?;
            let rows: Vec<Option<usize>> = (0..3).map(|i| Some(i % (2 * p))).chain([None]).collect();
            let g = t.gather_rows(stacked, &rows)?;
            let first = t.row(g, 0)?;
            let norm = t.normalize(first)?;
            let ps = t.pointer_sum(norm, &[vec![0], (1..q).collect()])?;
            let lg = t.log(ps)?;
            let dropped = {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                t.dropout(g, 0.3, true, &mut r)?
            };
            let l1 = t.sum_all(lg);
            let d2 = t.mul(dropped, dropped)?;
            let l2 = t.sum_all(d2);
            let l2 = t.scale(l2, 0.5);
            let total = t.add(l1, l2)?;
            Ok(total)
        });
    }
}

#[test]
fn gradcheck_gru_ops_with_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..4 {
        let (input, hidden, steps) = (rng.gen_range(1..5), rng.gen_range(1..4), rng.gen_range(1..6));
        let mut store = ParamStore::new();
        let bi = BiGruParams::new(&mut store, "bi", input, hidden, &mut rng).unwrap();
        let xid = store
            .add("x", random_matrix(&mut rng, steps, input, 1.0), true)
            .unwrap();
        let hid = store.add("h0", random_matrix(&mut rng, 1, hidden, 1.0), true).unwrap();
        let target = random_matrix(&mut rng, steps, 2 * hidden, 1.0);
        let mut mask: Vec<bool> = (0..steps).map(|_| rng.gen_bool(0.75)).collect();
        mask[0] = true;
        assert_gradcheck(&mut store, |t| {
            let x = t.param(xid);
            let h0 = t.param(hid);
            let out = bigru(t, x, h0, h0, &bi, Some(&mask))?;
            let tgt = t.constant(target.clone());
            let prod = t.mul(out.outputs, tgt)?;
            let s = t.sum_all(prod);
            let cell_in = t.row(x, 0)?;
            let c = gru_cell(t, cell_in, out.final_bwd, &bi.fwd)?;
            let c2 = t.mul(c, out.final_fwd)?;
            let s2 = t.sum_all(c2);
            t.add(s, s2)
        });
    }
}

#[test]
fn repeated_forward_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut store = ParamStore::new();
    let p = BiGruParams::new(&mut store, "bi", 3, 4, &mut rng).unwrap();
    let xs = random_matrix(&mut rng, 6, 3, 1.0);
    let run = || {
        let mut tape = Tape::new(&store);
        let seq = tape.constant(xs.clone());
        let h0 = zero_state(&mut tape, 4);
        let out = bigru(&mut tape, seq, h0, h0, &p, None).unwrap();
        let s = tape.sum_all(out.outputs);
        let g = tape.backward(s).unwrap();
        let bits: Vec<u64> = tape.value(out.outputs).data().iter().map(|v| v.to_bits()).collect();
        let gbits: Vec<u64> = g.get(&store, p.fwd.wx).data().iter().map(|v| v.to_bits()).collect();
        (bits, gbits)
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn masked_softmax_rows_normalised(
        rows in 1usize..5,
        logits in prop::collection::vec(-30.0f64..30.0, 40),
        keep in prop::collection::vec(any::<bool>(), 8),
    ) {
        let cols = 8;
        let mut keep = keep;
        keep[3] = true;
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.constant(Tensor::matrix(rows, cols, logits[..rows * cols].to_vec()).unwrap());
        let y = tape.masked_softmax_rows(a, &keep).unwrap();
        for r in tape.value(y).to_rows() {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (v, k) in r.iter().zip(&keep) {
                if !k {
                    prop_assert_eq!(*v, 0.0);
                } else {
                    prop_assert!(*v >= 0.0);
                }
            }
        }
    }
}
