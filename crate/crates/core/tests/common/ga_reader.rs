//! Gated-attention reader written out directly: fresh query reads from
//! zero states, document-only gating, plain loops throughout. Weights are
//! looked up by parameter name so the code shares nothing with the reader
//! module except the store layout.

use dgr_core::autodiff::ParamStore;

use super::{dot, scalar_bigru, softmax_masked, ScalarGru};

fn load_gru(store: &ParamStore, prefix: &str) -> ScalarGru {
    let get = |s: &str| {
        let id = store
            .id(&format!("{prefix}.{s}"))
            .unwrap_or_else(|| panic!("missing {prefix}.{s}"));
        store.tensor(id).clone()
    };
    let (wx, wh, b) = (get("wx"), get("wh"), get("b"));
    ScalarGru {
        hidden: wh.rows(),
        wx: wx.to_rows(),
        wh: wh.to_rows(),
        b: b.data().to_vec(),
    }
}

/// Bidirectional read over the real positions only; padded rows stay zero.
fn read(store: &ParamStore, prefix: &str, xs: &[Vec<f64>], keep: &[bool]) -> Vec<Vec<f64>> {
    let f = load_gru(store, &format!("{prefix}.fwd"));
    let b = load_gru(store, &format!("{prefix}.bwd"));
    let real: Vec<Vec<f64>> = xs
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(x, _)| x.clone())
        .collect();
    let zero = vec![0.0; f.hidden];
    let (rows, _, _) = scalar_bigru(&f, &b, &real, &zero, &zero);
    let mut it = rows.into_iter();
    keep.iter()
        .map(|&k| if k { it.next().unwrap() } else { vec![0.0; 2 * f.hidden] })
        .collect()
}

/// Final `(doc, query)` encodings after `hops` gated-attention layers.
pub fn ga_reader_encode(
    store: &ParamStore,
    hops: usize,
    doc_emb: &[Vec<f64>],
    query_emb: &[Vec<f64>],
    doc_keep: &[bool],
    query_keep: &[bool],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut d = read(store, "reader.doc0", doc_emb, doc_keep);
    let mut q = read(store, "reader.query0", query_emb, query_keep);
    for s in 1..=hops {
        let mut x = Vec::with_capacity(d.len());
        for di in &d {
            let logits: Vec<f64> = q.iter().map(|qj| dot(di, qj)).collect();
            let alpha = softmax_masked(&logits, query_keep);
            let mut tilde = vec![0.0; di.len()];
            for (a, qj) in alpha.iter().zip(&q) {
                for (t, v) in tilde.iter_mut().zip(qj) {
                    *t += a * v;
                }
            }
            x.push(di.iter().zip(&tilde).map(|(a, b)| a * b).collect());
        }
        d = read(store, &format!("reader.doc{s}"), &x, doc_keep);
        q = read(store, &format!("reader.query{s}"), query_emb, query_keep);
    }
    (d, q)
}
