//! Sparse per-timestep mixture-of-experts: a linear router scores M
//! expert feedforward networks per timestep, the top-k are selected
//! (ties broken toward the lower index), their raw scores are
//! softmax-normalized, and only the selected experts are evaluated on
//! the timesteps that chose them. The layer output is a residual
//! connection followed by an affine layer normalization.

use ndarray::Array2;
use rand_chacha::ChaCha20Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{self, Binding, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FrmConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub d_model: usize,
    pub d_hidden: usize,
}

impl FrmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k < 1 || self.top_k > self.n_experts {
            return Err(Error::config(format!(
                "top_k {} must be in 1..={}",
                self.top_k, self.n_experts
            )));
        }
        if self.d_model < 1 || self.d_hidden < 1 {
            return Err(Error::config("d_model and d_hidden must be >= 1"));
        }
        Ok(())
    }
}

/// Routing decision for one input: raw scores, the selected expert
/// indices per timestep (score-descending), and their normalized weights.
#[derive(Debug, Clone)]
pub struct RoutingState {
    pub scores: Array2<f64>,
    pub selected: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
}

/// Indices of the k largest entries, largest first; equal scores prefer
/// the lower index.
fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .expect("non-finite routing score")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

fn softmax_1d(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Score every timestep against every expert (`scores = Z W^T`) and pick
/// the top-k per row with softmax weights over the selected raw scores.
pub fn route(z: &Array2<f64>, gate_weights: &Array2<f64>, top_k: usize) -> Result<RoutingState> {
    let n_experts = gate_weights.nrows();
    if gate_weights.ncols() != z.ncols() {
        return Err(Error::config(format!(
            "router weight width {} does not match d_model {}",
            gate_weights.ncols(),
            z.ncols()
        )));
    }
    if top_k < 1 || top_k > n_experts {
        return Err(Error::config(format!(
            "top_k {top_k} must be in 1..={n_experts}"
        )));
    }
    let scores = z.dot(&gate_weights.t());
    let mut selected = Vec::with_capacity(z.nrows());
    let mut weights = Vec::with_capacity(z.nrows());
    for row in scores.rows() {
        let row: Vec<f64> = row.to_vec();
        let idx = top_k_indices(&row, top_k);
        let picked: Vec<f64> = idx.iter().map(|&m| row[m]).collect();
        selected.push(idx);
        weights.push(softmax_1d(&picked));
    }
    Ok(RoutingState {
        scores,
        selected,
        weights,
    })
}

/// Register the layer's parameters: router matrix, M expert FFNs, and the
/// output layer norm.
pub fn init_frm(set: &mut ParamSet, rng: &mut ChaCha20Rng, prefix: &str, cfg: &FrmConfig) {
    set.insert(
        format!("{prefix}.router.w"),
        crate::nn::xavier(rng, cfg.n_experts, cfg.d_model, cfg.d_model, cfg.n_experts),
    );
    for m in 0..cfg.n_experts {
        nn::init_ffn(
            set,
            rng,
            &format!("{prefix}.expert{m}"),
            cfg.d_model,
            cfg.d_hidden,
        );
    }
    nn::init_layer_norm(set, &format!("{prefix}.ln"), cfg.d_model);
}

/// Sparse expert mixture on the tape: `LayerNorm(Z + sum_m g_m * f_m(Z))`
/// where each expert runs only on the timesteps that selected it.
pub fn frm_forward<'t>(
    z: Var<'t>,
    p: &Binding<'t>,
    prefix: &str,
    cfg: &FrmConfig,
) -> Result<Var<'t>> {
    let tau = z.dim().0;
    let scores = z.matmul_nt(p.var(&format!("{prefix}.router.w")));
    let score_values = scores.value();
    if score_values.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("expert routing produced non-finite scores"));
    }

    let mut mask = Array2::zeros((tau, cfg.n_experts));
    let mut rows_per_expert: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_experts];
    for i in 0..tau {
        let row: Vec<f64> = score_values.row(i).to_vec();
        for m in top_k_indices(&row, cfg.top_k) {
            mask[[i, m]] = 1.0;
            rows_per_expert[m].push(i);
        }
    }
    let gates = scores.masked_softmax_rows(mask);

    let mut y: Option<Var<'t>> = None;
    for (m, rows) in rows_per_expert.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let zg = z.gather_rows(rows.clone());
        let fm = nn::ffn(zg, p, &format!("{prefix}.expert{m}"));
        if fm.value().iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "expert {m} produced non-finite output"
            )));
        }
        let gm = gates.slice_cols(m, 1).gather_rows(rows.clone());
        let contribution = fm.mul_col(gm).scatter_rows(rows.clone(), tau);
        y = Some(match y {
            Some(acc) => acc.add(contribution),
            None => contribution,
        });
    }
    let mixed = match y {
        Some(y) => z.add(y),
        None => z,
    };
    Ok(nn::layer_norm_affine(mixed, p, &format!("{prefix}.ln")))
}
