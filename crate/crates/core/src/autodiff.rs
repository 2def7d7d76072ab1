//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles; a single
//! [`backward`] sweep then accumulates gradients for all recorded nodes.
//! The op set is exactly what the networks in this crate need: dense and
//! transposed matrix products, broadcasting row/column arithmetic, the
//! activations, row-wise softmax (optionally masked), layer
//! normalization, row shifting for convolutions, gather/scatter for
//! sparse expert routing, and scalar-producing losses.
//!
//! Gradient accumulation walks the tape in reverse creation order, so
//! results are bit-deterministic for a fixed graph construction order.

use std::cell::RefCell;

use ndarray::{s, Array2, Axis};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Input,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    Affine(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Silu(usize),
    Gelu(usize),
    Abs(usize),
    SoftmaxRows(usize),
    MaskedSoftmaxRows(usize),
    LayerNormRows(usize),
    ShiftRows(usize, isize),
    GatherRows(usize, Vec<usize>),
    ScatterRows(usize, Vec<usize>),
    SliceCols(usize, usize),
    ConcatCols(usize, usize),
    MeanAll(usize),
    BceWithLogits(usize, Array2<f64>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Array2<f64>,
}

/// Append-only record of a computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to one node on a tape. Cheap to copy; all arithmetic goes
/// through methods that record onto the owning tape.
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a leaf holding `value`. Leaves are the only nodes whose
    /// gradients are of interest to callers (parameters and inputs).
    pub fn input(&self, value: Array2<f64>) -> Var<'_> {
        self.push(Op::Input, value)
    }

    fn push(&self, op: Op, value: Array2<f64>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn value_at(&self, idx: usize) -> Array2<f64> {
        self.nodes.borrow()[idx].value.clone()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn shift_rows_values(x: &Array2<f64>, offset: isize) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, d));
    for i in 0..n {
        let src = i as isize - offset;
        if src >= 0 && (src as usize) < n {
            out.row_mut(i).assign(&x.row(src as usize));
        }
    }
    out
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Array2<f64> {
        self.tape.value_at(self.idx)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.idx].value.dim()
    }

    pub fn index(&self) -> usize {
        self.idx
    }

    fn binary(
        self,
        other: Var<'t>,
        f: impl FnOnce(&Array2<f64>, &Array2<f64>) -> Array2<f64>,
        op: fn(usize, usize) -> Op,
    ) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.idx].value, &nodes[other.idx].value)
        };
        self.tape.push(op(self.idx, other.idx), value)
    }

    /// `self @ other`
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a.dot(b), Op::MatMul)
    }

    /// `self @ other^T`
    pub fn matmul_nt(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a.dot(&b.t()), Op::MatMulNT)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a + b, Op::Add)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a - b, Op::Sub)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a * b, Op::Mul)
    }

    /// Add a `1 x d` row vector to every row.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        self.binary(row, |a, r| a + &r.row(0), Op::AddRow)
    }

    /// Multiply every row elementwise by a `1 x d` row vector.
    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        self.binary(row, |a, r| a * &r.row(0), Op::MulRow)
    }

    /// Multiply every column elementwise by an `n x 1` column vector.
    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        self.binary(
            col,
            |a, c| a * &c.column(0).insert_axis(Axis(1)),
            Op::MulCol,
        )
    }

    /// `k * self + b`, elementwise with scalar constants.
    pub fn affine(self, k: f64, b: f64) -> Var<'t> {
        let value = self.tape.nodes.borrow()[self.idx].value.mapv(|x| k * x + b);
        self.tape.push(Op::Affine(self.idx, k), value)
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.affine(k, 0.0)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let value = self.tape.nodes.borrow()[self.idx].value.mapv(sigmoid);
        self.tape.push(Op::Sigmoid(self.idx), value)
    }

    pub fn tanh(self) -> Var<'t> {
        let value = self.tape.nodes.borrow()[self.idx].value.mapv(f64::tanh);
        self.tape.push(Op::Tanh(self.idx), value)
    }

    pub fn silu(self) -> Var<'t> {
        let value = self.tape.nodes.borrow()[self.idx]
            .value
            .mapv(|x| x * sigmoid(x));
        self.tape.push(Op::Silu(self.idx), value)
    }

    pub fn gelu(self) -> Var<'t> {
        let value = self.tape.nodes.borrow()[self.idx].value.mapv(gelu);
        self.tape.push(Op::Gelu(self.idx), value)
    }

    pub fn abs(self) -> Var<'t> {
        let value = self.tape.nodes.borrow()[self.idx].value.mapv(f64::abs);
        self.tape.push(Op::Abs(self.idx), value)
    }

    pub fn softmax_rows(self) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            softmax_rows_values(&nodes[self.idx].value, None)
        };
        self.tape.push(Op::SoftmaxRows(self.idx), value)
    }

    /// Row-wise softmax restricted to entries where `mask` is nonzero;
    /// masked-out entries produce exactly 0.
    pub fn masked_softmax_rows(self, mask: Array2<f64>) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            assert_eq!(nodes[self.idx].value.dim(), mask.dim());
            softmax_rows_values(&nodes[self.idx].value, Some(&mask))
        };
        self.tape.push(Op::MaskedSoftmaxRows(self.idx), value)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm_rows(self) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            layer_norm_values(&nodes[self.idx].value)
        };
        self.tape.push(Op::LayerNormRows(self.idx), value)
    }

    /// Shift rows down by `offset` (negative shifts up), zero-filling.
    pub fn shift_rows(self, offset: isize) -> Var<'t> {
        let value = shift_rows_values(&self.tape.nodes.borrow()[self.idx].value, offset);
        self.tape.push(Op::ShiftRows(self.idx, offset), value)
    }

    /// Select rows by index (repeats allowed).
    pub fn gather_rows(self, indices: Vec<usize>) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            let mut out = Array2::zeros((indices.len(), x.ncols()));
            for (i, &src) in indices.iter().enumerate() {
                out.row_mut(i).assign(&x.row(src));
            }
            out
        };
        self.tape.push(Op::GatherRows(self.idx, indices), value)
    }

    /// Place row `i` of `self` at row `indices[i]` of an `n_rows`-tall
    /// zero matrix, accumulating on collisions.
    pub fn scatter_rows(self, indices: Vec<usize>, n_rows: usize) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            assert_eq!(x.nrows(), indices.len());
            let mut out = Array2::zeros((n_rows, x.ncols()));
            for (i, &dst) in indices.iter().enumerate() {
                let mut row = out.row_mut(dst);
                row += &x.row(i);
            }
            out
        };
        self.tape.push(Op::ScatterRows(self.idx, indices), value)
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.idx]
                .value
                .slice(s![.., start..start + len])
                .to_owned()
        };
        self.tape.push(Op::SliceCols(self.idx, start), value)
    }

    pub fn concat_cols(self, other: Var<'t>) -> Var<'t> {
        self.binary(
            other,
            |a, b| {
                ndarray::concatenate(Axis(1), &[a.view(), b.view()])
                    .expect("concat_cols: row count mismatch")
            },
            Op::ConcatCols,
        )
    }

    /// Mean over all entries, as a `1 x 1` matrix.
    pub fn mean_all(self) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            Array2::from_elem((1, 1), x.sum() / x.len() as f64)
        };
        self.tape.push(Op::MeanAll(self.idx), value)
    }

    /// Mean binary cross-entropy between logits `self` and fixed targets,
    /// as a `1 x 1` matrix. Numerically stable for large logits.
    pub fn bce_with_logits(self, targets: Array2<f64>) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let l = &nodes[self.idx].value;
            assert_eq!(l.dim(), targets.dim());
            let mut acc = 0.0;
            for (&x, &t) in l.iter().zip(targets.iter()) {
                acc += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
            }
            Array2::from_elem((1, 1), acc / l.len() as f64)
        };
        self.tape.push(Op::BceWithLogits(self.idx, targets), value)
    }
}

fn softmax_rows_values(x: &Array2<f64>, mask: Option<&Array2<f64>>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, d));
    for i in 0..n {
        let selected: Vec<usize> = (0..d)
            .filter(|&j| mask.is_none_or(|m| m[[i, j]] != 0.0))
            .collect();
        if selected.is_empty() {
            continue;
        }
        let m = selected
            .iter()
            .map(|&j| x[[i, j]])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &j in &selected {
            let e = (x[[i, j]] - m).exp();
            out[[i, j]] = e;
            sum += e;
        }
        for &j in &selected {
            out[[i, j]] /= sum;
        }
    }
    out
}

fn layer_norm_values(x: &Array2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, d));
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            out[[i, j]] = (x[[i, j]] - mean) * inv;
        }
    }
    out
}

/// Gradients for every node of a tape, indexed like the tape.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&Array2<f64>> {
        self.grads[var.idx].as_ref()
    }

    /// Gradient of a leaf, or zeros if the leaf never influenced the loss.
    pub fn wrt_or_zero(&self, var: Var<'_>) -> Array2<f64> {
        match self.grads[var.idx].as_ref() {
            Some(g) => g.clone(),
            None => Array2::zeros(var.dim()),
        }
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

/// Reverse sweep from a `1 x 1` loss node.
pub fn backward(loss: Var<'_>) -> Gradients {
    let nodes = loss.tape.nodes.borrow();
    assert_eq!(nodes[loss.idx].value.dim(), (1, 1), "loss must be 1x1");
    let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(nodes.len());
    grads.resize_with(nodes.len(), || None);
    grads[loss.idx] = Some(Array2::ones((1, 1)));

    for i in (0..=loss.idx).rev() {
        if grads[i].is_none() {
            continue;
        }
        let (lower, upper) = grads.split_at_mut(i);
        let g = upper[0].as_ref().unwrap();
        match &nodes[i].op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                let av = &nodes[*a].value;
                let bv = &nodes[*b].value;
                accumulate(&mut lower[*a], g.dot(&bv.t()));
                accumulate(&mut lower[*b], av.t().dot(g));
            }
            Op::MatMulNT(a, b) => {
                let av = &nodes[*a].value;
                let bv = &nodes[*b].value;
                accumulate(&mut lower[*a], g.dot(bv));
                accumulate(&mut lower[*b], g.t().dot(av));
            }
            Op::Add(a, b) => {
                accumulate(&mut lower[*a], g.clone());
                accumulate(&mut lower[*b], g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(&mut lower[*a], g.clone());
                accumulate(&mut lower[*b], -g);
            }
            Op::Mul(a, b) => {
                accumulate(&mut lower[*a], g * &nodes[*b].value);
                accumulate(&mut lower[*b], g * &nodes[*a].value);
            }
            Op::AddRow(a, r) => {
                accumulate(&mut lower[*a], g.clone());
                let col_sum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                accumulate(&mut lower[*r], col_sum);
            }
            Op::MulRow(a, r) => {
                let rv = &nodes[*r].value;
                accumulate(&mut lower[*a], g * &rv.row(0));
                let dr = (g * &nodes[*a].value)
                    .sum_axis(Axis(0))
                    .insert_axis(Axis(0));
                accumulate(&mut lower[*r], dr);
            }
            Op::MulCol(a, c) => {
                let cv = &nodes[*c].value;
                accumulate(&mut lower[*a], g * &cv.column(0).insert_axis(Axis(1)));
                let dc = (g * &nodes[*a].value)
                    .sum_axis(Axis(1))
                    .insert_axis(Axis(1));
                accumulate(&mut lower[*c], dc);
            }
            Op::Affine(a, k) => {
                accumulate(&mut lower[*a], g * *k);
            }
            Op::Sigmoid(a) => {
                let y = &nodes[i].value;
                accumulate(&mut lower[*a], g * y * &y.mapv(|v| 1.0 - v));
            }
            Op::Tanh(a) => {
                let y = &nodes[i].value;
                accumulate(&mut lower[*a], g * &y.mapv(|v| 1.0 - v * v));
            }
            Op::Silu(a) => {
                let x = &nodes[*a].value;
                let d = x.mapv(|v| {
                    let s = sigmoid(v);
                    s * (1.0 + v * (1.0 - s))
                });
                accumulate(&mut lower[*a], g * &d);
            }
            Op::Gelu(a) => {
                let x = &nodes[*a].value;
                accumulate(&mut lower[*a], g * &x.mapv(gelu_deriv));
            }
            Op::Abs(a) => {
                let x = &nodes[*a].value;
                accumulate(
                    &mut lower[*a],
                    g * &x.mapv(|v| v.signum() * f64::from(v != 0.0)),
                );
            }
            Op::SoftmaxRows(a) | Op::MaskedSoftmaxRows(a) => {
                let y = &nodes[i].value;
                let dot = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                accumulate(&mut lower[*a], y * &(g - &dot));
            }
            Op::LayerNormRows(a) => {
                let x = &nodes[*a].value;
                let y = &nodes[i].value;
                let d = x.ncols() as f64;
                let mut dx = Array2::zeros(x.dim());
                for r in 0..x.nrows() {
                    let row = x.row(r);
                    let mean = row.sum() / d;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let gy = g.row(r);
                    let yr = y.row(r);
                    let g_mean = gy.sum() / d;
                    let gy_dot = gy.iter().zip(yr.iter()).map(|(&a, &b)| a * b).sum::<f64>() / d;
                    for c in 0..x.ncols() {
                        dx[[r, c]] = inv * (gy[c] - g_mean - yr[c] * gy_dot);
                    }
                }
                accumulate(&mut lower[*a], dx);
            }
            Op::ShiftRows(a, offset) => {
                accumulate(&mut lower[*a], shift_rows_values(g, -offset));
            }
            Op::GatherRows(a, indices) => {
                let mut dx = Array2::zeros(nodes[*a].value.dim());
                for (r, &src) in indices.iter().enumerate() {
                    let mut row = dx.row_mut(src);
                    row += &g.row(r);
                }
                accumulate(&mut lower[*a], dx);
            }
            Op::ScatterRows(a, indices) => {
                let mut dx = Array2::zeros(nodes[*a].value.dim());
                for (r, &dst) in indices.iter().enumerate() {
                    dx.row_mut(r).assign(&g.row(dst));
                }
                accumulate(&mut lower[*a], dx);
            }
            Op::SliceCols(a, start) => {
                let mut dx = Array2::zeros(nodes[*a].value.dim());
                let len = nodes[i].value.ncols();
                dx.slice_mut(s![.., *start..start + len]).assign(g);
                accumulate(&mut lower[*a], dx);
            }
            Op::ConcatCols(a, b) => {
                let wa = nodes[*a].value.ncols();
                let wb = nodes[*b].value.ncols();
                accumulate(&mut lower[*a], g.slice(s![.., 0..wa]).to_owned());
                accumulate(&mut lower[*b], g.slice(s![.., wa..wa + wb]).to_owned());
            }
            Op::MeanAll(a) => {
                let x = &nodes[*a].value;
                let k = g[[0, 0]] / x.len() as f64;
                accumulate(&mut lower[*a], Array2::from_elem(x.dim(), k));
            }
            Op::BceWithLogits(a, targets) => {
                let l = &nodes[*a].value;
                let k = g[[0, 0]] / l.len() as f64;
                let mut dx = Array2::zeros(l.dim());
                for ((d, &x), &t) in dx.iter_mut().zip(l.iter()).zip(targets.iter()) {
                    *d = k * (sigmoid(x) - t);
                }
                accumulate(&mut lower[*a], dx);
            }
        }
    }
    drop(nodes);
    Gradients { grads }
}
