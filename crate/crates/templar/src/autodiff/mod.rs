//! Minimal reverse-mode automatic differentiation over small dense tensors.
//!
//! Values are rank-2 row-major `f64` tensors (vectors are 1 x n, scalars
//! 1 x 1). A [`Tape`] records operations as they execute; [`Tape::backward`]
//! replays them in reverse to produce gradients for bound parameters.
//! Shape mismatches are programming errors and panic.
//!
//! One tape serves one forward/backward pass. Forward-only tapes
//! ([`Tape::forward_only`]) skip the activation bookkeeping that backward
//! needs; they are used for action selection and bootstrap targets where no
//! gradients flow.

mod adam;
mod gradcheck;
mod gru;

pub use adam::AdamState;
pub use gradcheck::grad_check;
use gru::GruSaved;
pub use gru::{gru_cell, GruWeights};

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

/// Dense row-major matrix of f64 values. Cloning is cheap (shared storage).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: Arc::new(vec![0.0; rows * cols]),
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Tensor {
            rows,
            cols,
            data: Arc::new(data),
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::from_vec(1, 1, vec![x])
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor::from_vec(1, data.len(), data)
    }

    /// Matrix with entries uniform in `(-bound, bound)`.
    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Tensor::from_vec(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// The single value of a 1 x 1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn transposed(&self) -> Tensor {
        let mut out = vec![0.0; self.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Tensor::from_vec(self.cols, self.rows, out)
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// axpy over contiguous rows: out += s * row (vectorizes to FMA)
#[inline]
pub(crate) fn axpy(out: &mut [f64], s: f64, row: &[f64]) {
    for (o, &v) in out.iter_mut().zip(row) {
        *o = s.mul_add(v, *o);
    }
}

/// Dot product with a fixed-order eight-lane reduction.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] = xa[l].mul_add(xb[l], lanes[l]);
        }
    }
    let mut tail = 0.0;
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = x.mul_add(y, tail);
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5]))
        + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]))
        + tail
}

/// out += a (n x k) @ b (k x m)
pub(crate) fn matmul_acc(out: &mut [f64], a: &[f64], n: usize, k: usize, b: &[f64], m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            axpy(orow, av, &b[kk * m..(kk + 1) * m]);
        }
    }
}

/// out += a (n x m) @ b^T (b is k x m) -> n x k
pub(crate) fn matmul_nt_acc(out: &mut [f64], a: &[f64], n: usize, m: usize, b: &[f64], k: usize) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        let orow = &mut out[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            *o += dot(arow, &b[j * m..(j + 1) * m]);
        }
    }
}

/// out += a^T (a is n x k) @ b (n x m) -> k x m
pub(crate) fn matmul_tn_acc(out: &mut [f64], a: &[f64], n: usize, k: usize, b: &[f64], m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for (j, &av) in arow.iter().enumerate() {
            axpy(&mut out[j * m..(j + 1) * m], av, brow);
        }
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

/// Identity of a parameter across tapes; assigned by the model's registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

struct LnSaved {
    xhat: Tensor,
    rstd: Vec<f64>,
}

enum Op {
    Constant,
    Param(ParamId),
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulRow(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    LeakyRelu(Var, f64),
    Abs(Var),
    Tanh(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        saved: Option<LnSaved>,
    },
    MeanRows(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    RowMax(Var, Vec<usize>),
    Scale(Var, f64),
    SumAll(Var),
    Transpose(Var),
    GruSeq {
        x: Var,
        w: Var,
        u: Var,
        b: Var,
        reversed: bool,
        saved: Option<Box<GruSaved>>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients keyed by parameter id, produced by [`Tape::backward`].
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id.0)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn add(&mut self, id: ParamId, grad: &Tensor, scale: f64) {
        match self.map.entry(id.0) {
            std::collections::hash_map::Entry::Occupied(mut e) => {
                let dst = e.get_mut().data_mut();
                for (d, &g) in dst.iter_mut().zip(grad.data()) {
                    *d += g * scale;
                }
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                if scale == 1.0 {
                    e.insert(grad.clone());
                } else {
                    let data = grad.data().iter().map(|&g| g * scale).collect();
                    e.insert(Tensor::from_vec(grad.rows(), grad.cols(), data));
                }
            }
        }
    }

    /// Accumulate `other`, scaled. Used to fold per-group gradients.
    pub fn merge_scaled(&mut self, other: &Gradients, scale: f64) {
        for (&id, g) in &other.map {
            self.add(ParamId(id), g, scale);
        }
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(64),
            grad_enabled: true,
        }
    }

    /// A tape that computes values but cannot run backward. Cheaper: ops skip
    /// saving activations needed only for gradients.
    pub fn forward_only() -> Self {
        Tape {
            nodes: Vec::with_capacity(64),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0 as usize].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node { op, value });
        Var(id)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t)
    }

    pub fn param(&mut self, id: ParamId, t: &Tensor) -> Var {
        self.push(Op::Param(id), t.clone())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.value(a).shape();
        let (k2, m) = self.value(b).shape();
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; n * m];
        matmul_acc(&mut out, self.value(a).data(), n, k, self.value(b).data(), m);
        self.push(Op::Matmul(a, b), Tensor::from_vec(n, m, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (n, m) = self.value(a).shape();
        assert_eq!(self.value(b).shape(), (n, m), "add shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(Op::Add(a, b), Tensor::from_vec(n, m, data))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (n, m) = self.value(a).shape();
        assert_eq!(self.value(b).shape(), (n, m), "sub shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        self.push(Op::Sub(a, b), Tensor::from_vec(n, m, data))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (n, m) = self.value(a).shape();
        assert_eq!(self.value(b).shape(), (n, m), "mul shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        self.push(Op::Mul(a, b), Tensor::from_vec(n, m, data))
    }

    /// Add a 1 x m row vector to every row of an n x m matrix.
    pub fn add_row(&mut self, a: Var, v: Var) -> Var {
        let (n, m) = self.value(a).shape();
        assert_eq!(self.value(v).shape(), (1, m), "add_row vector shape");
        let vd = self.value(v).data();
        let data = self
            .value(a)
            .data()
            .chunks(m)
            .flat_map(|row| row.iter().zip(vd).map(|(&x, &y)| x + y))
            .collect();
        self.push(Op::AddRow(a, v), Tensor::from_vec(n, m, data))
    }

    /// Add an n x 1 column vector to every column of an n x m matrix.
    pub fn add_col(&mut self, a: Var, v: Var) -> Var {
        let (n, m) = self.value(a).shape();
        assert_eq!(self.value(v).shape(), (n, 1), "add_col vector shape");
        let vd = self.value(v).data();
        let data = self
            .value(a)
            .data()
            .chunks(m)
            .zip(vd)
            .flat_map(|(row, &y)| row.iter().map(move |&x| x + y))
            .collect();
        self.push(Op::AddCol(a, v), Tensor::from_vec(n, m, data))
    }

    /// Multiply every row of an n x m matrix by a 1 x m row vector.
    pub fn mul_row(&mut self, a: Var, v: Var) -> Var {
        let (n, m) = self.value(a).shape();
        assert_eq!(self.value(v).shape(), (1, m), "mul_row vector shape");
        let vd = self.value(v).data();
        let data = self
            .value(a)
            .data()
            .chunks(m)
            .flat_map(|row| row.iter().zip(vd).map(|(&x, &y)| x * y))
            .collect();
        self.push(Op::MulRow(a, v), Tensor::from_vec(n, m, data))
    }

    /// Concatenate along columns: inputs share row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = vec![0.0; n * total];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), n, "concat_cols row mismatch");
            let c = t.cols();
            for i in 0..n {
                data[i * total + offset..i * total + offset + c].copy_from_slice(t.row(i));
            }
            offset += c;
        }
        self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::from_vec(n, total, data),
        )
    }

    /// Concatenate along rows: inputs share column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(total * m);
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), m, "concat_rows col mismatch");
            data.extend_from_slice(t.data());
        }
        self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor::from_vec(total, m, data),
        )
    }

    /// Softmax within each row (normalizes across columns). Subtracts the row
    /// max before exponentiation.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (n, m) = self.value(x).shape();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(m) {
            softmax_in_place(row);
        }
        self.push(Op::SoftmaxRows(x), Tensor::from_vec(n, m, data))
    }

    /// Softmax within each column (normalizes across rows).
    pub fn softmax_cols(&mut self, x: Var) -> Var {
        let t = self.value(x).transposed();
        let (m, n) = t.shape();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor::from_vec(m, n, data).transposed();
        self.push(Op::SoftmaxCols(x), out)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let (n, m) = self.value(x).shape();
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        self.push(Op::LeakyRelu(x, slope), Tensor::from_vec(n, m, data))
    }

    /// Element-wise absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, x: Var) -> Var {
        let (n, m) = self.value(x).shape();
        let data = self.value(x).data().iter().map(|&v| v.abs()).collect();
        self.push(Op::Abs(x), Tensor::from_vec(n, m, data))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let (n, m) = self.value(x).shape();
        let data = self.value(x).data().iter().map(|&v| v.tanh()).collect();
        self.push(Op::Tanh(x), Tensor::from_vec(n, m, data))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (n, m) = self.value(x).shape();
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        self.push(Op::Sigmoid(x), Tensor::from_vec(n, m, data))
    }

    /// Normalize each row to mean 0 / variance 1 (eps 1e-5), then scale and
    /// shift by `gain` and `bias` (both 1 x m).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (n, m) = self.value(x).shape();
        assert_eq!(self.value(gain).shape(), (1, m), "layer_norm gain shape");
        assert_eq!(self.value(bias).shape(), (1, m), "layer_norm bias shape");
        let mut xhat = vec![0.0; n * m];
        let mut rstd = vec![0.0; n];
        let mut data = vec![0.0; n * m];
        {
            let g = self.value(gain).data();
            let b = self.value(bias).data();
            for i in 0..n {
                let row = self.value(x).row(i);
                let mean = row.iter().sum::<f64>() / m as f64;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                let r = 1.0 / (var + EPS).sqrt();
                rstd[i] = r;
                for j in 0..m {
                    let h = (row[j] - mean) * r;
                    xhat[i * m + j] = h;
                    data[i * m + j] = h * g[j] + b[j];
                }
            }
        }
        let saved = self.grad_enabled.then(|| LnSaved {
            xhat: Tensor::from_vec(n, m, xhat),
            rstd,
        });
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                saved,
            },
            Tensor::from_vec(n, m, data),
        )
    }

    /// Mean of the selected rows: returns 1 x m.
    pub fn mean_rows(&mut self, x: Var, indices: &[usize]) -> Var {
        assert!(!indices.is_empty(), "mean_rows needs at least one index");
        let m = self.value(x).cols();
        let mut out = vec![0.0; m];
        for &i in indices {
            for (o, &v) in out.iter_mut().zip(self.value(x).row(i)) {
                *o += v;
            }
        }
        let k = indices.len() as f64;
        out.iter_mut().for_each(|o| *o /= k);
        self.push(
            Op::MeanRows(x, indices.to_vec()),
            Tensor::from_vec(1, m, out),
        )
    }

    /// Select rows by index: returns k x m.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Var {
        let m = self.value(x).cols();
        let mut data = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            data.extend_from_slice(self.value(x).row(i));
        }
        self.push(
            Op::GatherRows(x, indices.to_vec()),
            Tensor::from_vec(indices.len(), m, data),
        )
    }

    /// Maximum of each row: returns n x 1. Gradient flows to the first
    /// maximal element of each row.
    pub fn row_max(&mut self, x: Var) -> Var {
        let (n, m) = self.value(x).shape();
        assert!(m >= 1);
        let mut out = vec![0.0; n];
        let mut argmax = vec![0usize; n];
        for i in 0..n {
            let row = self.value(x).row(i);
            let (mut best, mut bi) = (row[0], 0);
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    bi = j;
                }
            }
            out[i] = best;
            argmax[i] = bi;
        }
        self.push(Op::RowMax(x, argmax), Tensor::from_vec(n, 1, out))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let (n, m) = self.value(x).shape();
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        self.push(Op::Scale(x, c), Tensor::from_vec(n, m, data))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x).transposed();
        self.push(Op::Transpose(x), t)
    }

    /// Run a GRU over the rows of `x` (n x in), producing the hidden state
    /// after each step (n x h). `reversed` iterates right-to-left while
    /// keeping outputs aligned with input positions.
    ///
    /// Weight layout: `w` is in x 3h, `u` is h x 3h, `b` is 1 x 3h, with gate
    /// columns ordered update | reset | candidate. The cell follows
    /// `h' = (1 - z) * h + z * tanh(Wh x + Uh (r * h) + bh)`.
    pub fn gru_seq(&mut self, x: Var, w: Var, u: Var, b: Var, reversed: bool) -> Var {
        let (value, saved) = gru::forward(
            self.value(x),
            self.value(w),
            self.value(u),
            self.value(b),
            reversed,
            self.grad_enabled,
        );
        self.push(
            Op::GruSeq {
                x,
                w,
                u,
                b,
                reversed,
                saved,
            },
            value,
        )
    }

    /// Reverse-mode sweep from a scalar loss node. Panics if the tape was
    /// created forward-only or the loss is not 1 x 1.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert!(self.grad_enabled, "backward on a forward-only tape");
        assert_eq!(
            self.value(loss).len(),
            1,
            "backward requires a scalar loss node"
        );
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize(self.nodes.len(), None);
        grads[loss.0 as usize] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();

        for idx in (0..self.nodes.len()).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Constant => {}
                Op::Param(id) => out.add(*id, &grad, 1.0),
                Op::Matmul(a, b) => {
                    let (n, k) = self.value(*a).shape();
                    let m = self.value(*b).cols();
                    let da = slot(&mut grads, *a, n, k);
                    matmul_nt_acc(da, grad.data(), n, m, self.value(*b).data(), k);
                    let db = slot(&mut grads, *b, k, m);
                    matmul_tn_acc(db, self.value(*a).data(), n, k, grad.data(), m);
                }
                Op::Add(a, b) => {
                    acc_into(&mut grads, *a, self.value(*a).shape(), grad.data(), 1.0);
                    acc_into(&mut grads, *b, self.value(*b).shape(), grad.data(), 1.0);
                }
                Op::Sub(a, b) => {
                    acc_into(&mut grads, *a, self.value(*a).shape(), grad.data(), 1.0);
                    acc_into(&mut grads, *b, self.value(*b).shape(), grad.data(), -1.0);
                }
                Op::Mul(a, b) => {
                    let (n, m) = grad.shape();
                    {
                        let da = slot(&mut grads, *a, n, m);
                        for ((d, &g), &v) in
                            da.iter_mut().zip(grad.data()).zip(self.value(*b).data())
                        {
                            *d += g * v;
                        }
                    }
                    let db = slot(&mut grads, *b, n, m);
                    for ((d, &g), &v) in db.iter_mut().zip(grad.data()).zip(self.value(*a).data())
                    {
                        *d += g * v;
                    }
                }
                Op::AddRow(a, v) => {
                    let (n, m) = grad.shape();
                    let _ = n;
                    acc_into(&mut grads, *a, (n, m), grad.data(), 1.0);
                    let dv = slot(&mut grads, *v, 1, m);
                    for row in grad.data().chunks(m) {
                        for (d, &g) in dv.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                }
                Op::AddCol(a, v) => {
                    let (n, m) = grad.shape();
                    acc_into(&mut grads, *a, (n, m), grad.data(), 1.0);
                    let dv = slot(&mut grads, *v, n, 1);
                    for (i, row) in grad.data().chunks(m).enumerate() {
                        dv[i] += row.iter().sum::<f64>();
                    }
                }
                Op::MulRow(a, v) => {
                    let (n, m) = grad.shape();
                    {
                        let vv = self.value(*v).data();
                        let da = slot(&mut grads, *a, n, m);
                        for (drow, grow) in da.chunks_mut(m).zip(grad.data().chunks(m)) {
                            for ((d, &g), &vl) in drow.iter_mut().zip(grow).zip(vv) {
                                *d += g * vl;
                            }
                        }
                    }
                    let av = self.value(*a).data();
                    let dv = slot(&mut grads, *v, 1, m);
                    for (arow, grow) in av.chunks(m).zip(grad.data().chunks(m)) {
                        for ((d, &g), &al) in dv.iter_mut().zip(grow).zip(arow) {
                            *d += g * al;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = grad.cols();
                    let n = grad.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        let dp = slot(&mut grads, p, n, c);
                        for i in 0..n {
                            let src = &grad.data()[i * total + offset..i * total + offset + c];
                            for (d, &g) in dp[i * c..(i + 1) * c].iter_mut().zip(src) {
                                *d += g;
                            }
                        }
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let m = grad.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let r = self.value(p).rows();
                        let src = &grad.data()[offset * m..(offset + r) * m];
                        acc_into(&mut grads, p, (r, m), src, 1.0);
                        offset += r;
                    }
                }
                Op::SoftmaxRows(x) => {
                    let (n, m) = grad.shape();
                    let y = &self.nodes[idx].value;
                    let dx = slot(&mut grads, *x, n, m);
                    for i in 0..n {
                        let yrow = y.row(i);
                        let grow = &grad.data()[i * m..(i + 1) * m];
                        let dot: f64 = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        for (d, (&yv, &g)) in dx[i * m..(i + 1) * m]
                            .iter_mut()
                            .zip(yrow.iter().zip(grow))
                        {
                            *d += yv * (g - dot);
                        }
                    }
                }
                Op::SoftmaxCols(x) => {
                    let (n, m) = grad.shape();
                    let y = &self.nodes[idx].value;
                    let dx = slot(&mut grads, *x, n, m);
                    for j in 0..m {
                        let mut dot = 0.0;
                        for i in 0..n {
                            dot += y.get(i, j) * grad.get(i, j);
                        }
                        for i in 0..n {
                            dx[i * m + j] += y.get(i, j) * (grad.get(i, j) - dot);
                        }
                    }
                }
                Op::LeakyRelu(x, slope) => {
                    let (n, m) = grad.shape();
                    let xv = self.value(*x).data();
                    let dx = slot(&mut grads, *x, n, m);
                    for ((d, &g), &v) in dx.iter_mut().zip(grad.data()).zip(xv) {
                        *d += g * if v > 0.0 { 1.0 } else { *slope };
                    }
                }
                Op::Abs(x) => {
                    let (n, m) = grad.shape();
                    let xv = self.value(*x).data();
                    let dx = slot(&mut grads, *x, n, m);
                    for ((d, &g), &v) in dx.iter_mut().zip(grad.data()).zip(xv) {
                        *d += g * if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                }
                Op::Tanh(x) => {
                    let (n, m) = grad.shape();
                    let y = &self.nodes[idx].value;
                    let dx = slot(&mut grads, *x, n, m);
                    for ((d, &g), &yv) in dx.iter_mut().zip(grad.data()).zip(y.data()) {
                        *d += g * (1.0 - yv * yv);
                    }
                }
                Op::Sigmoid(x) => {
                    let (n, m) = grad.shape();
                    let y = &self.nodes[idx].value;
                    let dx = slot(&mut grads, *x, n, m);
                    for ((d, &g), &yv) in dx.iter_mut().zip(grad.data()).zip(y.data()) {
                        *d += g * yv * (1.0 - yv);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    saved,
                } => {
                    let s = saved.as_ref().expect("layer_norm saved state");
                    let (n, m) = grad.shape();
                    let g = self.value(*gain).data();
                    {
                        let dgain = slot(&mut grads, *gain, 1, m);
                        for i in 0..n {
                            let grow = &grad.data()[i * m..(i + 1) * m];
                            let hrow = s.xhat.row(i);
                            for (d, (&gv, &hv)) in
                                dgain.iter_mut().zip(grow.iter().zip(hrow))
                            {
                                *d += gv * hv;
                            }
                        }
                    }
                    {
                        let dbias = slot(&mut grads, *bias, 1, m);
                        for row in grad.data().chunks(m) {
                            for (d, &gv) in dbias.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                    }
                    let dx = slot(&mut grads, *x, n, m);
                    let mf = m as f64;
                    for i in 0..n {
                        let grow = &grad.data()[i * m..(i + 1) * m];
                        let hrow = s.xhat.row(i);
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..m {
                            let dxh = grow[j] * g[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * hrow[j];
                        }
                        mean_dxhat /= mf;
                        mean_dxhat_xhat /= mf;
                        for j in 0..m {
                            let dxh = grow[j] * g[j];
                            dx[i * m + j] +=
                                s.rstd[i] * (dxh - mean_dxhat - hrow[j] * mean_dxhat_xhat);
                        }
                    }
                }
                Op::MeanRows(x, indices) => {
                    let (n, m) = self.value(*x).shape();
                    let k = indices.len() as f64;
                    let dx = slot(&mut grads, *x, n, m);
                    for &i in indices {
                        for (d, &g) in dx[i * m..(i + 1) * m].iter_mut().zip(grad.data()) {
                            *d += g / k;
                        }
                    }
                }
                Op::GatherRows(x, indices) => {
                    let (n, m) = self.value(*x).shape();
                    let dx = slot(&mut grads, *x, n, m);
                    for (j, &i) in indices.iter().enumerate() {
                        let src = &grad.data()[j * m..(j + 1) * m];
                        for (d, &g) in dx[i * m..(i + 1) * m].iter_mut().zip(src) {
                            *d += g;
                        }
                    }
                }
                Op::RowMax(x, argmax) => {
                    let (n, m) = self.value(*x).shape();
                    let _ = n;
                    let dx = slot(&mut grads, *x, n, m);
                    for (i, &j) in argmax.iter().enumerate() {
                        dx[i * m + j] += grad.data()[i];
                    }
                }
                Op::Scale(x, c) => {
                    acc_into(&mut grads, *x, grad.shape(), grad.data(), *c);
                }
                Op::SumAll(x) => {
                    let (n, m) = self.value(*x).shape();
                    let g = grad.item();
                    let dx = slot(&mut grads, *x, n, m);
                    for d in dx.iter_mut() {
                        *d += g;
                    }
                }
                Op::Transpose(x) => {
                    let gt = grad.transposed();
                    acc_into(&mut grads, *x, gt.shape(), gt.data(), 1.0);
                }
                Op::GruSeq {
                    x,
                    w,
                    u,
                    b,
                    reversed,
                    saved,
                } => {
                    let s = saved.as_ref().expect("gru saved state");
                    let h_out = &self.nodes[idx].value;
                    let (dx, dw, du, db) = gru::backward(
                        self.value(*x),
                        self.value(*w),
                        self.value(*u),
                        h_out,
                        s,
                        &grad,
                        *reversed,
                    );
                    acc_into(&mut grads, *x, dx.shape(), dx.data(), 1.0);
                    acc_into(&mut grads, *w, dw.shape(), dw.data(), 1.0);
                    acc_into(&mut grads, *u, du.shape(), du.data(), 1.0);
                    acc_into(&mut grads, *b, db.shape(), db.data(), 1.0);
                }
            }
        }
        out
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Get (allocating if needed) the gradient buffer for a node.
fn slot(grads: &mut [Option<Tensor>], v: Var, rows: usize, cols: usize) -> &mut [f64] {
    grads[v.0 as usize]
        .get_or_insert_with(|| Tensor::zeros(rows, cols))
        .data_mut()
}

/// Accumulate a scaled same-shaped gradient contribution.
fn acc_into(
    grads: &mut [Option<Tensor>],
    v: Var,
    shape: (usize, usize),
    contribution: &[f64],
    scale: f64,
) {
    let dst = slot(grads, v, shape.0, shape.1);
    for (d, &g) in dst.iter_mut().zip(contribution) {
        *d += g * scale;
    }
}
