//! Neural-network building blocks on top of the autodiff tape: a named
//! parameter store, deterministic initializers, and reusable layers
//! (affine maps, multi-head attention, feedforward blocks, 1-D
//! convolutions expressed as shifted matrix products, GRU cells, and
//! time-conditioned modulation).

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{Gradients, Tape, Var};

/// Trainable tensors keyed by dotted path. Iteration order is the sorted
/// key order, which fixes tape layout, optimizer update order, and
/// checkpoint layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Array2<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        let name = name.into();
        assert!(
            self.tensors.insert(name.clone(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }
}

/// Tape handles for every parameter of a [`ParamSet`], created in sorted
/// key order so graph construction is deterministic.
pub struct Binding<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl ParamSet {
    pub fn bind<'t>(&self, tape: &'t Tape) -> Binding<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|(name, value)| (name.clone(), tape.input(value.clone())))
            .collect();
        Binding { vars }
    }
}

impl<'t> Binding<'t> {
    pub fn var(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Extract per-parameter gradients after a backward sweep. Parameters
    /// that did not influence the loss get zero gradients.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Array2<f64>> {
        self.vars
            .iter()
            .map(|(name, &var)| (name.clone(), grads.wrt_or_zero(var)))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

pub(crate) fn xavier(
    rng: &mut ChaCha20Rng,
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen::<f64>() * 2.0 * limit - limit)
}

pub(crate) fn uniform(rng: &mut ChaCha20Rng, rows: usize, cols: usize, limit: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen::<f64>() * 2.0 * limit - limit)
}

pub fn init_linear(
    set: &mut ParamSet,
    rng: &mut ChaCha20Rng,
    name: &str,
    d_in: usize,
    d_out: usize,
) {
    set.insert(format!("{name}.w"), xavier(rng, d_in, d_out, d_in, d_out));
    set.insert(format!("{name}.b"), Array2::zeros((1, d_out)));
}

/// Zero-initialized affine map; used for layers that must start as the
/// zero function (conditioning gates).
pub fn init_linear_zero(set: &mut ParamSet, name: &str, d_in: usize, d_out: usize) {
    set.insert(format!("{name}.w"), Array2::zeros((d_in, d_out)));
    set.insert(format!("{name}.b"), Array2::zeros((1, d_out)));
}

pub fn init_layer_norm(set: &mut ParamSet, name: &str, d: usize) {
    set.insert(format!("{name}.g"), Array2::ones((1, d)));
    set.insert(format!("{name}.b"), Array2::zeros((1, d)));
}

pub fn init_attention(set: &mut ParamSet, rng: &mut ChaCha20Rng, name: &str, d_model: usize) {
    for proj in ["q", "k", "v", "o"] {
        init_linear(set, rng, &format!("{name}.{proj}"), d_model, d_model);
    }
}

pub fn init_ffn(
    set: &mut ParamSet,
    rng: &mut ChaCha20Rng,
    name: &str,
    d_model: usize,
    d_hidden: usize,
) {
    init_linear(set, rng, &format!("{name}.in"), d_model, d_hidden);
    init_linear(set, rng, &format!("{name}.out"), d_hidden, d_model);
}

pub fn init_conv(
    set: &mut ParamSet,
    rng: &mut ChaCha20Rng,
    name: &str,
    kernel: usize,
    d_in: usize,
    d_out: usize,
) {
    for k in 0..kernel {
        set.insert(
            format!("{name}.w{k}"),
            xavier(rng, d_in, d_out, kernel * d_in, kernel * d_out),
        );
    }
    set.insert(format!("{name}.b"), Array2::zeros((1, d_out)));
}

pub fn init_gru_cell(
    set: &mut ParamSet,
    rng: &mut ChaCha20Rng,
    name: &str,
    d_in: usize,
    d_hidden: usize,
) {
    for gate in ["r", "z", "n"] {
        set.insert(
            format!("{name}.wx{gate}"),
            xavier(rng, d_in, d_hidden, d_in, d_hidden),
        );
        set.insert(
            format!("{name}.wh{gate}"),
            xavier(rng, d_hidden, d_hidden, d_hidden, d_hidden),
        );
    }
    set.insert(format!("{name}.br"), Array2::zeros((1, d_hidden)));
    set.insert(format!("{name}.bz"), Array2::zeros((1, d_hidden)));
    set.insert(format!("{name}.bxn"), Array2::zeros((1, d_hidden)));
    set.insert(format!("{name}.bhn"), Array2::zeros((1, d_hidden)));
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

pub fn linear<'t>(x: Var<'t>, p: &Binding<'t>, name: &str) -> Var<'t> {
    x.matmul(p.var(&format!("{name}.w")))
        .add_row(p.var(&format!("{name}.b")))
}

/// Layer normalization with learned per-feature scale and shift.
pub fn layer_norm_affine<'t>(x: Var<'t>, p: &Binding<'t>, name: &str) -> Var<'t> {
    x.layer_norm_rows()
        .mul_row(p.var(&format!("{name}.g")))
        .add_row(p.var(&format!("{name}.b")))
}

/// `x * (1 + scale) + shift` with `1 x d` modulation rows.
pub fn modulate<'t>(x: Var<'t>, shift: Var<'t>, scale: Var<'t>) -> Var<'t> {
    x.mul_row(scale.affine(1.0, 1.0)).add_row(shift)
}

/// Multi-head scaled dot-product attention; queries from `q_in`,
/// keys/values from `kv_in`.
pub fn attention<'t>(
    q_in: Var<'t>,
    kv_in: Var<'t>,
    p: &Binding<'t>,
    name: &str,
    n_heads: usize,
    head_dim: usize,
) -> Var<'t> {
    let q = linear(q_in, p, &format!("{name}.q"));
    let k = linear(kv_in, p, &format!("{name}.k"));
    let v = linear(kv_in, p, &format!("{name}.v"));
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut merged: Option<Var<'t>> = None;
    for h in 0..n_heads {
        let qh = q.slice_cols(h * head_dim, head_dim);
        let kh = k.slice_cols(h * head_dim, head_dim);
        let vh = v.slice_cols(h * head_dim, head_dim);
        let attn = qh.matmul_nt(kh).scale(scale).softmax_rows();
        let oh = attn.matmul(vh);
        merged = Some(match merged {
            Some(acc) => acc.concat_cols(oh),
            None => oh,
        });
    }
    linear(merged.expect("n_heads >= 1"), p, &format!("{name}.o"))
}

/// Position-wise feedforward: affine, GELU, affine.
pub fn ffn<'t>(x: Var<'t>, p: &Binding<'t>, name: &str) -> Var<'t> {
    let h = linear(x, p, &format!("{name}.in")).gelu();
    linear(h, p, &format!("{name}.out"))
}

/// Centered same-padding 1-D convolution along rows (time), written as a
/// sum of shifted matrix products. `kernel` must be odd.
pub fn conv1d_same<'t>(x: Var<'t>, p: &Binding<'t>, name: &str, kernel: usize) -> Var<'t> {
    assert!(kernel % 2 == 1, "conv1d_same requires an odd kernel");
    let half = (kernel / 2) as isize;
    let mut acc: Option<Var<'t>> = None;
    for k in 0..kernel {
        let offset = half - k as isize;
        let term = x.shift_rows(offset).matmul(p.var(&format!("{name}.w{k}")));
        acc = Some(match acc {
            Some(a) => a.add(term),
            None => term,
        });
    }
    acc.unwrap().add_row(p.var(&format!("{name}.b")))
}

/// Causal 1-D convolution: output at row i sees rows i-kernel+1 ..= i.
pub fn conv1d_causal<'t>(x: Var<'t>, p: &Binding<'t>, name: &str, kernel: usize) -> Var<'t> {
    let mut acc: Option<Var<'t>> = None;
    for k in 0..kernel {
        let term = x
            .shift_rows(k as isize)
            .matmul(p.var(&format!("{name}.w{k}")));
        acc = Some(match acc {
            Some(a) => a.add(term),
            None => term,
        });
    }
    acc.unwrap().add_row(p.var(&format!("{name}.b")))
}

/// One GRU step over a batch-major input: `x` is `batch x d_in`, `h` is
/// `batch x d_hidden`; returns the next hidden state.
pub fn gru_cell<'t>(x: Var<'t>, h: Var<'t>, p: &Binding<'t>, name: &str) -> Var<'t> {
    let gate = |wx: &str, wh: &str, b: &str| {
        x.matmul(p.var(&format!("{name}.{wx}")))
            .add(h.matmul(p.var(&format!("{name}.{wh}"))))
            .add_row(p.var(&format!("{name}.{b}")))
    };
    let r = gate("wxr", "whr", "br").sigmoid();
    let z = gate("wxz", "whz", "bz").sigmoid();
    let h_term = h
        .matmul(p.var(&format!("{name}.whn")))
        .add_row(p.var(&format!("{name}.bhn")));
    let n = x
        .matmul(p.var(&format!("{name}.wxn")))
        .add_row(p.var(&format!("{name}.bxn")))
        .add(r.mul(h_term))
        .tanh();
    z.affine(-1.0, 1.0).mul(n).add(z.mul(h))
}

/// Sinusoidal embedding of a scalar flow time, `1 x dim` with `dim` even.
/// The input is scaled so the usable frequency band covers [0, 1].
pub fn time_embedding(t: f64, dim: usize) -> Array2<f64> {
    assert!(
        dim.is_multiple_of(2),
        "time embedding dimension must be even"
    );
    let half = dim / 2;
    let mut out = Array2::zeros((1, dim));
    for i in 0..half {
        let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
        let arg = t * 1000.0 * freq;
        out[[0, i]] = arg.cos();
        out[[0, half + i]] = arg.sin();
    }
    out
}
