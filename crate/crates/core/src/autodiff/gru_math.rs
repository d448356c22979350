//! Single-row GRU arithmetic shared by the fused tape operations.
//!
//! Gate layout along the `3h` axis is `[update z | reset r | candidate n]`:
//!
//! ```text
//! z  = sigmoid(x Wz + h Uz + bz)
//! r  = sigmoid(x Wr + h Ur + br)
//! n  = tanh(x Wn + (r * h) Un + bn)
//! h' = (1 - z) * h + z * n
//! ```

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruDims {
    pub input: usize,
    pub hidden: usize,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub struct Step {
    pub h: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub n: Vec<f64>,
}

pub struct Saved<'s> {
    pub z: &'s [f64],
    pub r: &'s [f64],
    pub n: &'s [f64],
    pub h_prev: &'s [f64],
}

/// Running parameter gradients for one GRU op.
pub struct GradAcc {
    pub wx: Vec<f64>,
    pub wh: Vec<f64>,
    pub b: Vec<f64>,
}

impl GradAcc {
    pub fn new(d: GruDims) -> Self {
        GradAcc {
            wx: vec![0.0; d.input * 3 * d.hidden],
            wh: vec![0.0; d.hidden * 3 * d.hidden],
            b: vec![0.0; 3 * d.hidden],
        }
    }
}

pub fn forward(d: GruDims, x: &[f64], h: &[f64], wx: &[f64], wh: &[f64], b: &[f64]) -> Step {
    let hd = d.hidden;
    let w3 = 3 * hd;
    let mut gx = b.to_vec();
    for (i, &xv) in x.iter().enumerate() {
        let row = &wx[i * w3..(i + 1) * w3];
        for (g, &w) in gx.iter_mut().zip(row) {
            *g += xv * w;
        }
    }
    let mut gh = vec![0.0; 2 * hd];
    for (k, &hv) in h.iter().enumerate() {
        let row = &wh[k * w3..k * w3 + 2 * hd];
        for (g, &w) in gh.iter_mut().zip(row) {
            *g += hv * w;
        }
    }
    let z: Vec<f64> = (0..hd).map(|j| sigmoid(gx[j] + gh[j])).collect();
    let r: Vec<f64> = (0..hd).map(|j| sigmoid(gx[hd + j] + gh[hd + j])).collect();
    let mut an: Vec<f64> = gx[2 * hd..].to_vec();
    for k in 0..hd {
        let rh = r[k] * h[k];
        let row = &wh[k * w3 + 2 * hd..(k + 1) * w3];
        for (a, &w) in an.iter_mut().zip(row) {
            *a += rh * w;
        }
    }
    let n: Vec<f64> = an.iter().map(|a| a.tanh()).collect();
    let hn = (0..hd).map(|j| (1.0 - z[j]) * h[j] + z[j] * n[j]).collect();
    Step { h: hn, z, r, n }
}

/// Returns `(dL/dx, dL/dh_prev)` and adds parameter gradients into `acc`.
pub fn backward(
    d: GruDims,
    x: &[f64],
    s: Saved<'_>,
    wx: &[f64],
    wh: &[f64],
    dh_out: &[f64],
    acc: &mut GradAcc,
) -> (Vec<f64>, Vec<f64>) {
    let hd = d.hidden;
    let w3 = 3 * hd;
    let h = s.h_prev;
    let mut da = vec![0.0; w3];
    let mut dh = vec![0.0; hd];
    for j in 0..hd {
        let g = dh_out[j];
        let dn = g * s.z[j];
        let dz = g * (s.n[j] - h[j]);
        dh[j] = g * (1.0 - s.z[j]);
        da[j] = dz * s.z[j] * (1.0 - s.z[j]);
        da[2 * hd + j] = dn * (1.0 - s.n[j] * s.n[j]);
    }
    // candidate path through (r * h) Un
    for k in 0..hd {
        let rh = s.r[k] * h[k];
        let row = &wh[k * w3 + 2 * hd..(k + 1) * w3];
        let grow = &mut acc.wh[k * w3 + 2 * hd..(k + 1) * w3];
        let mut drh = 0.0;
        for j in 0..hd {
            grow[j] += rh * da[2 * hd + j];
            drh += row[j] * da[2 * hd + j];
        }
        dh[k] += drh * s.r[k];
        let dr = drh * h[k];
        da[hd + k] = dr * s.r[k] * (1.0 - s.r[k]);
    }
    // z and r recurrent paths
    for k in 0..hd {
        let row = &wh[k * w3..k * w3 + 2 * hd];
        let grow = &mut acc.wh[k * w3..k * w3 + 2 * hd];
        let mut acc_h = 0.0;
        for j in 0..2 * hd {
            grow[j] += h[k] * da[j];
            acc_h += row[j] * da[j];
        }
        dh[k] += acc_h;
    }
    let mut dx = vec![0.0; d.input];
    for (i, &xv) in x.iter().enumerate() {
        let row = &wx[i * w3..(i + 1) * w3];
        let grow = &mut acc.wx[i * w3..(i + 1) * w3];
        let mut sdx = 0.0;
        for j in 0..w3 {
            grow[j] += xv * da[j];
            sdx += row[j] * da[j];
        }
        dx[i] = sdx;
    }
    for (bg, a) in acc.b.iter_mut().zip(&da) {
        *bg += a;
    }
    (dx, dh)
}
