//! Fused GRU sequence op: forward and backward-through-time in tight loops.
//!
//! Gate convention (Cho et al. form):
//!   z = sigmoid(Wz x + Uz h + bz)
//!   r = sigmoid(Wr x + Ur h + br)
//!   c = tanh(Wh x + Uh (r * h) + bh)
//!   h' = (1 - z) * h + z * c
//!
//! Weights pack the three gates column-wise: `w` in x 3h, `u` h x 3h,
//! `b` 1 x 3h, gate order z | r | c.

use super::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

/// One GRU's weights as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights {
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

impl GruWeights {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruWeights {
            w: Tensor::zeros(input, 3 * hidden),
            u: Tensor::zeros(hidden, 3 * hidden),
            b: Tensor::zeros(1, 3 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.rows()
    }
}

/// Single cell step on plain values; the scalar reference the tape op is
/// checked against, also used directly in tests.
pub fn gru_cell(x: &[f64], h_prev: &[f64], weights: &GruWeights) -> Vec<f64> {
    let hidden = weights.hidden();
    let input = weights.w.rows();
    assert_eq!(x.len(), input, "gru_cell input size");
    assert_eq!(h_prev.len(), hidden, "gru_cell hidden size");
    let w = weights.w.data();
    let u = weights.u.data();
    let b = weights.b.data();
    let g = |col: usize, gate: usize| -> f64 {
        let j = gate * hidden + col;
        let mut acc = b[j];
        for (k, &xv) in x.iter().enumerate() {
            acc += xv * w[k * 3 * hidden + j];
        }
        acc
    };
    let mut z = vec![0.0; hidden];
    let mut r = vec![0.0; hidden];
    for j in 0..hidden {
        let mut az = g(j, 0);
        let mut ar = g(j, 1);
        for (k, &hv) in h_prev.iter().enumerate() {
            az += hv * u[k * 3 * hidden + j];
            ar += hv * u[k * 3 * hidden + hidden + j];
        }
        z[j] = sigmoid(az);
        r[j] = sigmoid(ar);
    }
    let mut out = vec![0.0; hidden];
    for j in 0..hidden {
        let mut ac = g(j, 2);
        for (k, &hv) in h_prev.iter().enumerate() {
            ac += r[k] * hv * u[k * 3 * hidden + 2 * hidden + j];
        }
        let c = ac.tanh();
        out[j] = (1.0 - z[j]) * h_prev[j] + z[j] * c;
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Saved gate activations for backward-through-time.
pub(super) struct GruSaved {
    z: Tensor,
    r: Tensor,
    c: Tensor,
}

fn step_order(n: usize, reversed: bool) -> Box<dyn Iterator<Item = usize>> {
    if reversed {
        Box::new((0..n).rev())
    } else {
        Box::new(0..n)
    }
}

pub(super) fn forward(
    x: &Tensor,
    w: &Tensor,
    u: &Tensor,
    b: &Tensor,
    reversed: bool,
    save: bool,
) -> (Tensor, Option<Box<GruSaved>>) {
    let (n, input) = x.shape();
    assert!(n >= 1, "gru_seq needs a non-empty sequence");
    let h3 = w.cols();
    assert_eq!(w.rows(), input, "gru w shape");
    assert_eq!(h3 % 3, 0, "gru w columns must be 3*hidden");
    let hidden = h3 / 3;
    assert_eq!(u.shape(), (hidden, h3), "gru u shape");
    assert_eq!(b.shape(), (1, h3), "gru b shape");

    // input-side contributions for the whole sequence in one matmul
    let mut xw = vec![0.0; n * h3];
    for row in xw.chunks_mut(h3) {
        row.copy_from_slice(b.data());
    }
    matmul_acc(&mut xw, x.data(), n, input, w.data(), h3);

    let ud = u.data();
    let mut h = vec![0.0; hidden];
    let mut out = vec![0.0; n * hidden];
    let mut zs = vec![0.0; if save { n * hidden } else { 0 }];
    let mut rs = zs.clone();
    let mut cs = zs.clone();
    let mut az = vec![0.0; hidden];
    let mut ar = vec![0.0; hidden];
    let mut ac = vec![0.0; hidden];
    let mut rh = vec![0.0; hidden];

    for t in step_order(n, reversed) {
        let g = &xw[t * h3..(t + 1) * h3];
        az.copy_from_slice(&g[..hidden]);
        ar.copy_from_slice(&g[hidden..2 * hidden]);
        ac.copy_from_slice(&g[2 * hidden..]);
        for (k, &hv) in h.iter().enumerate() {
            let urow = &ud[k * h3..(k + 1) * h3];
            super::axpy(&mut az, hv, &urow[..hidden]);
            super::axpy(&mut ar, hv, &urow[hidden..2 * hidden]);
        }
        for j in 0..hidden {
            az[j] = sigmoid(az[j]);
            ar[j] = sigmoid(ar[j]);
            rh[j] = ar[j] * h[j];
        }
        for (k, &rhv) in rh.iter().enumerate() {
            super::axpy(&mut ac, rhv, &ud[k * h3 + 2 * hidden..(k + 1) * h3]);
        }
        let orow = &mut out[t * hidden..(t + 1) * hidden];
        for j in 0..hidden {
            let c = ac[j].tanh();
            let hn = (1.0 - az[j]) * h[j] + az[j] * c;
            orow[j] = hn;
            if save {
                zs[t * hidden + j] = az[j];
                rs[t * hidden + j] = ar[j];
                cs[t * hidden + j] = c;
            }
        }
        h.copy_from_slice(orow);
    }

    let value = Tensor::from_vec(n, hidden, out);
    let saved = save.then(|| {
        Box::new(GruSaved {
            z: Tensor::from_vec(n, hidden, zs),
            r: Tensor::from_vec(n, hidden, rs),
            c: Tensor::from_vec(n, hidden, cs),
        })
    });
    (value, saved)
}

pub(super) fn backward(
    x: &Tensor,
    w: &Tensor,
    u: &Tensor,
    h_out: &Tensor,
    saved: &GruSaved,
    grad: &Tensor,
    reversed: bool,
) -> (Tensor, Tensor, Tensor, Tensor) {
    let (n, input) = x.shape();
    let h3 = w.cols();
    let hidden = h3 / 3;
    let ud = u.data();

    let mut dxw = vec![0.0; n * h3];
    let mut du = vec![0.0; hidden * h3];
    let mut dh = vec![0.0; hidden];
    let mut dhp = vec![0.0; hidden];
    let mut daz = vec![0.0; hidden];
    let mut dar = vec![0.0; hidden];
    let mut dac = vec![0.0; hidden];
    let mut drh = vec![0.0; hidden];

    let order: Vec<usize> = step_order(n, reversed).collect();
    for (pos, &t) in order.iter().enumerate().rev() {
        let h_prev: &[f64] = if pos == 0 {
            &[]
        } else {
            h_out.row(order[pos - 1])
        };
        let hp = |j: usize| -> f64 {
            if h_prev.is_empty() {
                0.0
            } else {
                h_prev[j]
            }
        };
        let z = saved.z.row(t);
        let r = saved.r.row(t);
        let c = saved.c.row(t);
        let grow = grad.row(t);

        for j in 0..hidden {
            dh[j] += grow[j];
            let dzj = dh[j] * (c[j] - hp(j));
            let dcj = dh[j] * z[j];
            dhp[j] = dh[j] * (1.0 - z[j]);
            dac[j] = dcj * (1.0 - c[j] * c[j]);
            daz[j] = dzj * z[j] * (1.0 - z[j]);
        }
        // through the candidate's recurrent term: d(r*h) and dUh
        for k in 0..hidden {
            let urow = &ud[k * h3 + 2 * hidden..(k + 1) * h3];
            drh[k] = super::dot(urow, &dac);
            let rhk = r[k] * hp(k);
            super::axpy(&mut du[k * h3 + 2 * hidden..(k + 1) * h3], rhk, &dac);
        }
        for j in 0..hidden {
            let drj = drh[j] * hp(j);
            dhp[j] += drh[j] * r[j];
            dar[j] = drj * r[j] * (1.0 - r[j]);
        }
        // through the z/r recurrent terms
        for k in 0..hidden {
            let urow = &ud[k * h3..(k + 1) * h3];
            dhp[k] += super::dot(&urow[..hidden], &daz) + super::dot(&urow[hidden..2 * hidden], &dar);
            let hk = hp(k);
            if hk != 0.0 {
                let durow = &mut du[k * h3..(k + 1) * h3];
                super::axpy(&mut durow[..hidden], hk, &daz);
                super::axpy(&mut durow[hidden..2 * hidden], hk, &dar);
            }
        }
        let drow = &mut dxw[t * h3..(t + 1) * h3];
        drow[..hidden].copy_from_slice(&daz);
        drow[hidden..2 * hidden].copy_from_slice(&dar);
        drow[2 * hidden..].copy_from_slice(&dac);

        std::mem::swap(&mut dh, &mut dhp);
        dhp.iter_mut().for_each(|v| *v = 0.0);
    }

    let mut dx = vec![0.0; n * input];
    matmul_nt_acc(&mut dx, &dxw, n, h3, w.data(), input);
    let mut dw = vec![0.0; input * h3];
    matmul_tn_acc(&mut dw, x.data(), n, input, &dxw, h3);
    let mut db = vec![0.0; h3];
    for row in dxw.chunks(h3) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }

    (
        Tensor::from_vec(n, input, dx),
        Tensor::from_vec(input, h3, dw),
        Tensor::from_vec(hidden, h3, du),
        Tensor::from_vec(1, h3, db),
    )
}
