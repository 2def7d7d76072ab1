//! Training loop: epoch-shuffled batching, dual-path forward, flow
//! matching loss, clipped adaptive-moment updates under a warmup +
//! cosine schedule, binary checkpoints, and the ablation switches.
//!
//! Per-sample randomness comes from streams derived from the iteration
//! and batch slot, so any iteration can be reconstructed in isolation;
//! this is what makes resume and the parallel batch fold bit-exact.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, Tape, Var};
use crate::config::ExperimentConfig;
use crate::data::{self, NormalizationStats, TimeSeriesWindow};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::parallel;
use crate::rng::{self, Domain};
use crate::velocity_net::{NetConfig, VelocityNet};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const CLIP_NORM: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Expert mixture replaced by a dense feedforward of matched width.
    NoFrm,
    /// Decoder stack removed; the projector reads the encoder output.
    NoTd,
    /// Decoder removed and the perturbation branch disabled (sigma 0,
    /// no refinement): plain flow matching on the encoder-projector net.
    NoTdTpb,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_frm" => Ok(Ablation::NoFrm),
            "no_td" => Ok(Ablation::NoTd),
            "no_td_tpb" => Ok(Ablation::NoTdTpb),
            other => Err(Error::config(format!(
                "unknown ablation '{other}' (expected full, no_frm, no_td, no_td_tpb)"
            ))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::NoFrm => "no_frm",
            Ablation::NoTd => "no_td",
            Ablation::NoTdTpb => "no_td_tpb",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub batch_size: usize,
    /// Perturbation scale for the dual-path branch; 0 disables it.
    pub sigma: f64,
    /// Refinement strength on the gated correction.
    pub alpha: f64,
    pub seed: u64,
    #[serde(default)]
    pub ablation: Ablation,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init.is_finite() && self.lr_init > 0.0) {
            return Err(Error::config("train.lr_init must be finite and > 0"));
        }
        if self.warmup_iters >= self.total_iters {
            return Err(Error::config("train.warmup_iters must be < total_iters"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be >= 1"));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::config("train.sigma must be finite and >= 0"));
        }
        if !self.alpha.is_finite() {
            return Err(Error::config("train.alpha must be finite"));
        }
        Ok(())
    }

    /// Training-time perturbation scale after the ablation switch.
    pub fn effective_sigma(&self) -> f64 {
        if self.ablation == Ablation::NoTdTpb {
            0.0
        } else {
            self.sigma
        }
    }
}

/// Learning rate at 1-based iteration `step`: linear ramp to `lr_init`
/// over the warmup, then cosine decay to zero at `total_iters`.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    if step <= cfg.warmup_iters {
        cfg.lr_init * step as f64 / cfg.warmup_iters as f64
    } else {
        let span = (cfg.total_iters - cfg.warmup_iters) as f64;
        let progress = (step - cfg.warmup_iters) as f64 / span;
        cfg.lr_init * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Network shape for an ablation mode.
pub fn apply_ablation(net_cfg: &NetConfig, mode: Ablation) -> NetConfig {
    let mut cfg = net_cfg.clone();
    match mode {
        Ablation::Full => {}
        Ablation::NoFrm => cfg.dense_ffn = true,
        Ablation::NoTd | Ablation::NoTdTpb => cfg.dec_layers = 0,
    }
    cfg
}

pub type Moments = BTreeMap<String, Array2<f64>>;

pub fn zero_moments(params: &ParamSet) -> Moments {
    params
        .iter()
        .map(|(name, t)| (name.clone(), Array2::zeros(t.dim())))
        .collect()
}

/// Scale gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut Moments, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}

/// One adaptive-moment update with bias correction at 1-based `step`.
pub fn adam_step(
    params: &mut ParamSet,
    m: &mut Moments,
    v: &mut Moments,
    grads: &Moments,
    step: usize,
    lr: f64,
) {
    let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
    for (name, g) in grads {
        let m_t = m.get_mut(name).expect("moment for param");
        let v_t = v.get_mut(name).expect("moment for param");
        ndarray::Zip::from(m_t.view_mut())
            .and(g.view())
            .for_each(|m_e, &g_e| *m_e = ADAM_BETA1 * *m_e + (1.0 - ADAM_BETA1) * g_e);
        ndarray::Zip::from(v_t.view_mut())
            .and(g.view())
            .for_each(|v_e, &g_e| *v_e = ADAM_BETA2 * *v_e + (1.0 - ADAM_BETA2) * g_e * g_e);
        let p = params.get_mut(name);
        ndarray::Zip::from(p.view_mut())
            .and(m_t.view())
            .and(v_t.view())
            .for_each(|p_e, &m_e, &v_e| {
                let m_hat = m_e / bc1;
                let v_hat = v_e / bc2;
                *p_e -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericFailure {
    /// Iteration at which training aborted.
    pub iter: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub config: ExperimentConfig,
    /// Completed iterations.
    pub iter: u64,
    pub opt_m: Moments,
    pub opt_v: Moments,
    pub normalization: NormalizationStats,
}

impl Checkpoint {
    /// Rebuild the network this checkpoint was trained with.
    pub fn net(&self) -> Result<VelocityNet> {
        let net_cfg = apply_ablation(&self.config.net, self.config.train.ablation);
        VelocityNet::from_params(
            net_cfg,
            self.config.data.window_len,
            self.config.data.n_features,
            self.params.clone(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final state, or the last finite state if training aborted.
    pub checkpoint: Checkpoint,
    pub loss_log: Vec<LossRecord>,
    /// Set when training aborted on a non-finite loss or gradient.
    pub failure: Option<NumericFailure>,
}

fn check_data(windows: &[TimeSeriesWindow], cfg: &ExperimentConfig) -> Result<()> {
    if windows.is_empty() {
        return Err(Error::argument("training data is empty"));
    }
    let want = (cfg.data.window_len, cfg.data.n_features);
    for w in windows {
        if w.values.dim() != want {
            return Err(Error::argument(format!(
                "window {} has shape {:?}, config expects {:?}",
                w.window_index,
                w.values.dim(),
                want
            )));
        }
    }
    Ok(())
}

/// Train from scratch. The windows must already be normalized; `stats`
/// travels into the checkpoint so samples can be denormalized later.
pub fn train(
    windows: &[TimeSeriesWindow],
    stats: &NormalizationStats,
    cfg: &ExperimentConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(windows, cfg)?;
    let net_cfg = apply_ablation(&cfg.net, cfg.train.ablation);
    let mut net = VelocityNet::new(
        net_cfg,
        cfg.data.window_len,
        cfg.data.n_features,
        cfg.train.seed,
    )?;
    let mut m = zero_moments(&net.params);
    let mut v = zero_moments(&net.params);
    let (loss_log, failure, iter) = run_loop(
        &mut net,
        &mut m,
        &mut v,
        0,
        cfg.train.total_iters,
        windows,
        cfg,
    )?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            params: net.params,
            config: cfg.clone(),
            iter,
            opt_m: m,
            opt_v: v,
            normalization: stats.clone(),
        },
        loss_log,
        failure,
    })
}

/// Continue a run to `total_iters`. Reproduces the loss sequence an
/// uninterrupted run would have produced from the same seed.
pub fn resume(ckpt: &Checkpoint, windows: &[TimeSeriesWindow]) -> Result<TrainOutcome> {
    let cfg = &ckpt.config;
    cfg.validate()?;
    check_data(windows, cfg)?;
    if ckpt.iter as usize >= cfg.train.total_iters {
        return Err(Error::argument(format!(
            "checkpoint already at iteration {} of {}",
            ckpt.iter, cfg.train.total_iters
        )));
    }
    let mut net = ckpt.net()?;
    let mut m = ckpt.opt_m.clone();
    let mut v = ckpt.opt_v.clone();
    let (loss_log, failure, iter) = run_loop(
        &mut net,
        &mut m,
        &mut v,
        ckpt.iter as usize,
        cfg.train.total_iters,
        windows,
        cfg,
    )?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            params: net.params,
            config: cfg.clone(),
            iter,
            opt_m: m,
            opt_v: v,
            normalization: ckpt.normalization.clone(),
        },
        loss_log,
        failure,
    })
}

/// Advance training from `start_iter` to `stop_iter`. The learning-rate
/// schedule always spans `cfg.train.total_iters`, so a shorter stop
/// bound pauses the run without altering it.
fn run_loop(
    net: &mut VelocityNet,
    m: &mut Moments,
    v: &mut Moments,
    start_iter: usize,
    stop_iter: usize,
    windows: &[TimeSeriesWindow],
    cfg: &ExperimentConfig,
) -> Result<(Vec<LossRecord>, Option<NumericFailure>, u64)> {
    let tc = &cfg.train;
    let sigma = tc.effective_sigma();
    let n = windows.len();
    let mut log = Vec::with_capacity(stop_iter - start_iter);

    for step in (start_iter + 1)..=stop_iter {
        let iter0 = step - 1;
        let idx = data::batch_indices(n, tc.batch_size, tc.seed, iter0 as u64);
        let bsz = idx.len();
        let lr = lr_at(tc, step);

        let chunk_results = batch_gradients(net, windows, &idx, iter0, tc, sigma);
        let mut loss_sum = 0.0;
        let mut grads: Moments = BTreeMap::new();
        let mut numeric_err: Option<Error> = None;
        for res in chunk_results {
            match res {
                Ok((chunk_loss, chunk_grads)) => {
                    if numeric_err.is_some() {
                        continue;
                    }
                    loss_sum += chunk_loss;
                    if grads.is_empty() {
                        grads = chunk_grads;
                    } else {
                        for (name, g) in chunk_grads {
                            *grads.get_mut(&name).expect("matching grad keys") += &g;
                        }
                    }
                }
                Err(e @ Error::Numeric(_)) => {
                    if numeric_err.is_none() {
                        numeric_err = Some(e);
                    }
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(e) = numeric_err {
            let failure = NumericFailure {
                iter: step,
                message: format!("iteration {step}: {e}"),
            };
            return Ok((log, Some(failure), iter0 as u64));
        }

        let loss = loss_sum / bsz as f64;
        if !loss.is_finite() {
            log.push(LossRecord {
                iter: step,
                lr,
                loss,
            });
            let failure = NumericFailure {
                iter: step,
                message: format!("loss became non-finite at iteration {step}"),
            };
            return Ok((log, Some(failure), iter0 as u64));
        }
        let inv_b = 1.0 / bsz as f64;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * inv_b);
        }
        let norm = clip_global_norm(&mut grads, CLIP_NORM);
        if !norm.is_finite() {
            log.push(LossRecord {
                iter: step,
                lr,
                loss,
            });
            let failure = NumericFailure {
                iter: step,
                message: format!("gradient norm became non-finite at iteration {step}"),
            };
            return Ok((log, Some(failure), iter0 as u64));
        }
        adam_step(&mut net.params, m, v, &grads, step, lr);
        log.push(LossRecord {
            iter: step,
            lr,
            loss,
        });
    }
    Ok((log, None, stop_iter as u64))
}

/// Per-chunk sum of sample losses and gradients for one batch. Chunks
/// are fixed consecutive slot ranges, so the fold order (and therefore
/// the result) does not depend on scheduling.
fn batch_gradients(
    net: &VelocityNet,
    windows: &[TimeSeriesWindow],
    idx: &[usize],
    iter0: usize,
    tc: &TrainConfig,
    sigma: f64,
) -> Vec<Result<(f64, Moments)>> {
    let (tau, d) = (
        windows[idx[0]].values.nrows(),
        windows[idx[0]].values.ncols(),
    );
    parallel::map_chunks(idx.len(), |range| {
        let tape = Tape::new();
        let binding = net.params.bind(&tape);
        let mut chunk_loss: Option<Var> = None;
        for slot in range {
            let x1 = &windows[idx[slot]].values;
            let stream = (iter0 * tc.batch_size + slot) as u64;
            let mut r = rng::derive(tc.seed, Domain::TrainIter, stream);
            let t: f64 = r.gen();
            let x0 = rng::normal_matrix(&mut r, tau, d);
            let xt = &x0 * (1.0 - t) + x1 * t;
            let target = tape.input(x1 - &x0);

            let sample_loss = if sigma > 0.0 {
                let eps = rng::normal_matrix(&mut r, tau, d);
                let xt_pert = &xt + &(eps * sigma);
                let out = net.dual_path(
                    &tape,
                    &binding,
                    tape.input(xt),
                    tape.input(xt_pert),
                    t,
                    tc.alpha,
                )?;
                let res = out.v_final.sub(target);
                res.mul(res).mean_all()
            } else {
                let v = net.single_path(&tape, &binding, tape.input(xt), t)?;
                let res = v.sub(target);
                res.mul(res).mean_all()
            };
            chunk_loss = Some(match chunk_loss {
                Some(acc) => acc.add(sample_loss),
                None => sample_loss,
            });
        }
        let total = chunk_loss.expect("non-empty chunk");
        let grads = backward(total);
        Ok((total.value()[[0, 0]], binding.gradients(&grads)))
    })
}

/// Loss log as CSV `iter,lr,loss`.
pub fn write_loss_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iter,lr,loss")?;
    for rec in log {
        writeln!(f, "{},{},{}", rec.iter, rec.lr, rec.loss)?;
    }
    f.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoint file format
// ---------------------------------------------------------------------------
//
// Little-endian binary: magic "PAFMCKPT", format version u32, completed
// iteration u64, config TOML (u64 length + UTF-8), normalization stats
// (u64 dim, then per-feature min and max), then three tensor sections
// (parameters, first moments, second moments). A tensor section is a u64
// count followed by entries: name (u64 length + UTF-8), rows u64, cols
// u64, row-major f64 data.

const CKPT_MAGIC: &[u8; 8] = b"PAFMCKPT";
const CKPT_VERSION: u32 = 1;

fn write_string(w: &mut impl IoWrite, s: &str) -> Result<()> {
    w.write_u64::<LittleEndian>(s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_string(r: &mut impl IoRead, what: &str) -> Result<String> {
    let len = r
        .read_u64::<LittleEndian>()
        .map_err(|_| Error::checkpoint(format!("truncated file while reading {what}")))?
        as usize;
    if len > 1 << 30 {
        return Err(Error::checkpoint(format!(
            "implausible {what} length {len}"
        )));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| Error::checkpoint(format!("truncated file while reading {what}")))?;
    String::from_utf8(buf).map_err(|_| Error::checkpoint(format!("{what} is not UTF-8")))
}

fn write_tensor_section(w: &mut impl IoWrite, tensors: Vec<(&String, &Array2<f64>)>) -> Result<()> {
    w.write_u64::<LittleEndian>(tensors.len() as u64)?;
    for (name, tensor) in tensors {
        write_string(w, name)?;
        w.write_u64::<LittleEndian>(tensor.nrows() as u64)?;
        w.write_u64::<LittleEndian>(tensor.ncols() as u64)?;
        for &x in tensor.iter() {
            w.write_f64::<LittleEndian>(x)?;
        }
    }
    Ok(())
}

fn read_tensor_section(r: &mut impl IoRead, section: &str) -> Result<Moments> {
    let count = r
        .read_u64::<LittleEndian>()
        .map_err(|_| Error::checkpoint(format!("truncated file at {section} section")))?;
    let mut out = Moments::new();
    for i in 0..count {
        let name = read_string(r, &format!("{section} tensor {i} name"))?;
        let rows = r
            .read_u64::<LittleEndian>()
            .map_err(|_| Error::checkpoint(format!("truncated shape for {section} {name}")))?
            as usize;
        let cols = r
            .read_u64::<LittleEndian>()
            .map_err(|_| Error::checkpoint(format!("truncated shape for {section} {name}")))?
            as usize;
        if rows.saturating_mul(cols) > 1 << 32 {
            return Err(Error::checkpoint(format!(
                "implausible shape {rows}x{cols} for {section} {name}"
            )));
        }
        let mut data = vec![0.0f64; rows * cols];
        r.read_f64_into::<LittleEndian>(&mut data).map_err(|_| {
            Error::checkpoint(format!("truncated file while reading {section} {name}"))
        })?;
        let tensor = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::checkpoint(format!("{section} {name}: {e}")))?;
        if out.insert(name.clone(), tensor).is_some() {
            return Err(Error::checkpoint(format!(
                "duplicate {section} tensor {name}"
            )));
        }
    }
    Ok(out)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_u32::<LittleEndian>(CKPT_VERSION)?;
    w.write_u64::<LittleEndian>(ckpt.iter)?;
    write_string(&mut w, &ckpt.config.to_toml_string()?)?;
    let stats = &ckpt.normalization;
    w.write_u64::<LittleEndian>(stats.dim() as u64)?;
    for &x in stats.min.iter().chain(stats.max.iter()) {
        w.write_f64::<LittleEndian>(x)?;
    }
    write_tensor_section(&mut w, ckpt.params.iter().collect())?;
    write_tensor_section(&mut w, ckpt.opt_m.iter().collect())?;
    write_tensor_section(&mut w, ckpt.opt_v.iter().collect())?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::checkpoint("file too short for header"))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::checkpoint("bad magic; not a checkpoint file"));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::checkpoint("truncated header"))?;
    if version != CKPT_VERSION {
        return Err(Error::checkpoint(format!(
            "unsupported format version {version} (expected {CKPT_VERSION})"
        )));
    }
    let iter = r
        .read_u64::<LittleEndian>()
        .map_err(|_| Error::checkpoint("truncated header"))?;
    let config_text = read_string(&mut r, "config")?;
    let config = ExperimentConfig::from_toml_str(&config_text)
        .map_err(|e| Error::checkpoint(format!("embedded config: {e}")))?;
    let dim = r
        .read_u64::<LittleEndian>()
        .map_err(|_| Error::checkpoint("truncated normalization stats"))? as usize;
    if dim > 1 << 20 {
        return Err(Error::checkpoint(format!(
            "implausible feature count {dim}"
        )));
    }
    let mut min = vec![0.0f64; dim];
    let mut max = vec![0.0f64; dim];
    r.read_f64_into::<LittleEndian>(&mut min)
        .and_then(|_| r.read_f64_into::<LittleEndian>(&mut max))
        .map_err(|_| Error::checkpoint("truncated normalization stats"))?;
    let param_map = read_tensor_section(&mut r, "parameter")?;
    let opt_m = read_tensor_section(&mut r, "first-moment")?;
    let opt_v = read_tensor_section(&mut r, "second-moment")?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::checkpoint("trailing bytes after checkpoint data"));
    }

    for (name, tensor) in &param_map {
        for (section, moments) in [("first-moment", &opt_m), ("second-moment", &opt_v)] {
            match moments.get(name) {
                None => {
                    return Err(Error::checkpoint(format!(
                        "parameter {name} has no {section} entry"
                    )))
                }
                Some(mt) if mt.dim() != tensor.dim() => {
                    return Err(Error::checkpoint(format!(
                        "{section} for {name} has shape {:?}, parameter has {:?}",
                        mt.dim(),
                        tensor.dim()
                    )))
                }
                _ => {}
            }
        }
    }
    for name in opt_m.keys().chain(opt_v.keys()) {
        if !param_map.contains_key(name) {
            return Err(Error::checkpoint(format!(
                "optimizer entry {name} has no matching parameter"
            )));
        }
    }

    let mut params = ParamSet::new();
    for (name, tensor) in param_map {
        params.insert(name, tensor);
    }
    let ckpt = Checkpoint {
        params,
        config,
        iter,
        opt_m,
        opt_v,
        normalization: NormalizationStats { min, max },
    };
    ckpt.net()
        .map_err(|e| Error::checkpoint(format!("parameters do not match config: {e}")))?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{preset, Preset};
    use crate::frm_moe::FrmConfig;

    fn tiny_experiment(n_features: usize) -> ExperimentConfig {
        let mut cfg = preset(Preset::Sines);
        cfg.data.window_len = 4;
        cfg.data.n_features = n_features;
        cfg.data.n_samples = 32;
        cfg.net = NetConfig {
            d_model: 8,
            n_heads: 2,
            head_dim: 4,
            enc_layers: 1,
            dec_layers: 1,
            frm: FrmConfig {
                n_experts: 2,
                top_k: 1,
                d_model: 8,
                d_hidden: 16,
            },
            conv_kernel: 3,
            time_embed_dim: 8,
            dense_ffn: false,
            untied_paths: false,
        };
        cfg.train = TrainConfig {
            lr_init: 1e-3,
            warmup_iters: 2,
            total_iters: 6,
            batch_size: 4,
            sigma: 0.1,
            alpha: 1.0,
            seed: 11,
            ablation: Ablation::Full,
        };
        cfg
    }

    fn toy_windows(n: usize, tau: usize, d: usize) -> Vec<TimeSeriesWindow> {
        (0..n)
            .map(|i| {
                let mut r = rng::derive(99, Domain::Sines, i as u64);
                TimeSeriesWindow {
                    values: rng::normal_matrix(&mut r, tau, d)
                        .mapv(|x| (x * 0.2 + 0.5).clamp(0.0, 1.0)),
                    window_index: i,
                }
            })
            .collect()
    }

    #[test]
    fn lr_schedule_shape() {
        let tc = TrainConfig {
            lr_init: 8e-4,
            warmup_iters: 500,
            total_iters: 12_000,
            batch_size: 1,
            sigma: 0.1,
            alpha: 1.0,
            seed: 0,
            ablation: Ablation::Full,
        };
        assert!((lr_at(&tc, 250) - 4e-4).abs() < 1e-18);
        assert!((lr_at(&tc, 500) - 8e-4).abs() < 1e-18);
        // Continuous at the warmup boundary and zero at the end.
        assert!((lr_at(&tc, 501) - 8e-4).abs() < 1e-6);
        assert!(lr_at(&tc, 12_000).abs() < 1e-12);
        for step in [600, 2000, 6000, 11_000] {
            assert!(lr_at(&tc, step) < lr_at(&tc, step - 50));
        }
    }

    #[test]
    fn adam_matches_textbook_update() {
        let mut params = ParamSet::new();
        params.insert("x", ndarray::array![[1.0]]);
        let mut m = zero_moments(&params);
        let mut v = zero_moments(&params);
        let mut grads = Moments::new();
        // f(x) = x^2 at x=1: gradient 2.
        grads.insert("x".into(), ndarray::array![[2.0]]);
        adam_step(&mut params, &mut m, &mut v, &grads, 1, 0.1);
        let m1: f64 = (1.0 - ADAM_BETA1) * 2.0;
        let v1: f64 = (1.0 - ADAM_BETA2) * 4.0;
        let expect =
            1.0 - 0.1 * (m1 / (1.0 - ADAM_BETA1)) / ((v1 / (1.0 - ADAM_BETA2)).sqrt() + ADAM_EPS);
        assert!((params.get("x")[[0, 0]] - expect).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_large_gradients_only() {
        let mut grads = Moments::new();
        grads.insert("a".into(), ndarray::array![[3.0, 4.0]]);
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let clipped: f64 = grads["a"].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((clipped - 1.0).abs() < 1e-12);

        let mut small = Moments::new();
        small.insert("a".into(), ndarray::array![[0.3, 0.4]]);
        let before = small["a"].clone();
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small["a"].mapv(f64::to_bits), before.mapv(f64::to_bits));
    }

    #[test]
    fn ablation_modes_reshape_config() {
        let cfg = tiny_experiment(2).net;
        assert_eq!(apply_ablation(&cfg, Ablation::Full), cfg);
        let no_frm = apply_ablation(&cfg, Ablation::NoFrm);
        assert!(no_frm.dense_ffn);
        assert_eq!(no_frm.dec_layers, cfg.dec_layers);
        let no_td = apply_ablation(&cfg, Ablation::NoTd);
        assert_eq!(no_td.dec_layers, 0);
    }

    #[test]
    fn single_iteration_smoke() {
        let mut cfg = tiny_experiment(2);
        cfg.train.total_iters = 1;
        cfg.train.warmup_iters = 0;
        let windows = toy_windows(4, 4, 2);
        let out = train(&windows, &NormalizationStats::identity(2), &cfg).unwrap();
        assert!(out.failure.is_none());
        assert_eq!(out.loss_log.len(), 1);
        assert_eq!(out.loss_log[0].iter, 1);
        assert!(out.loss_log[0].loss.is_finite());
        assert_eq!(out.checkpoint.iter, 1);
    }

    #[test]
    fn identical_seeds_identical_loss_logs() {
        let cfg = tiny_experiment(2);
        let windows = toy_windows(8, 4, 2);
        let stats = NormalizationStats::identity(2);
        let a = train(&windows, &stats, &cfg).unwrap();
        let b = train(&windows, &stats, &cfg).unwrap();
        for (ra, rb) in a.loss_log.iter().zip(&b.loss_log) {
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
        }
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let cfg = tiny_experiment(2);
        let windows = toy_windows(8, 4, 2);
        let stats = NormalizationStats::identity(2);
        let full = train(&windows, &stats, &cfg).unwrap();

        // Run the first 3 iterations, checkpoint, then resume. The
        // resumed run must keep the original schedule, so the mid-run
        // checkpoint carries the full config with the stop point only in
        // the loop bound.
        let mut net = VelocityNet::new(
            apply_ablation(&cfg.net, cfg.train.ablation),
            4,
            2,
            cfg.train.seed,
        )
        .unwrap();
        let mut m = zero_moments(&net.params);
        let mut v = zero_moments(&net.params);
        let (first_log, fail, it) =
            run_loop(&mut net, &mut m, &mut v, 0, 3, &windows, &cfg).unwrap();
        assert!(fail.is_none());
        let mid = Checkpoint {
            params: net.params.clone(),
            config: cfg.clone(),
            iter: it,
            opt_m: m,
            opt_v: v,
            normalization: stats.clone(),
        };
        let rest = resume(&mid, &windows).unwrap();
        let combined: Vec<f64> = first_log
            .iter()
            .chain(&rest.loss_log)
            .map(|r| r.loss)
            .collect();
        let reference: Vec<f64> = full.loss_log.iter().map(|r| r.loss).collect();
        assert_eq!(combined.len(), reference.len());
        for (a, b) in combined.iter().zip(&reference) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in rest
            .checkpoint
            .params
            .iter()
            .zip(full.checkpoint.params.iter())
        {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1.mapv(f64::to_bits), b.1.mapv(f64::to_bits));
        }
    }

    #[test]
    fn every_module_group_trains() {
        let mut cfg = tiny_experiment(2);
        cfg.train.total_iters = 3;
        cfg.train.warmup_iters = 1;
        cfg.train.lr_init = 1e-3;
        let windows = toy_windows(8, 4, 2);
        let init = VelocityNet::new(
            apply_ablation(&cfg.net, cfg.train.ablation),
            4,
            2,
            cfg.train.seed,
        )
        .unwrap();
        let out = train(&windows, &NormalizationStats::identity(2), &cfg).unwrap();
        assert!(out.failure.is_none());

        let group_of = |name: &str| {
            let mut parts = name.split('.');
            let first = parts.next().unwrap().to_string();
            if first.starts_with("dec") {
                format!("{first}.{}", parts.next().unwrap())
            } else {
                first
            }
        };
        let mut changed: BTreeMap<String, bool> = BTreeMap::new();
        for (name, after) in out.checkpoint.params.iter() {
            let before = init.params.get(name);
            let any = after.iter().zip(before.iter()).any(|(a, b)| a != b);
            *changed.entry(group_of(name)).or_insert(false) |= any;
        }
        for (group, moved) in changed {
            assert!(moved, "module group {group} never updated");
        }
    }

    #[test]
    fn diverging_run_aborts_with_last_finite_state() {
        let mut cfg = tiny_experiment(2);
        cfg.train.lr_init = 1e200;
        cfg.train.warmup_iters = 1;
        cfg.train.total_iters = 6;
        let windows = toy_windows(8, 4, 2);
        let out = train(&windows, &NormalizationStats::identity(2), &cfg).unwrap();
        let failure = out.failure.expect("expected numeric failure");
        assert!(failure.iter <= 6);
        assert!((out.checkpoint.iter as usize) < 6);
        for (name, tensor) in out.checkpoint.params.iter() {
            assert!(
                tensor.iter().all(|x| x.is_finite()),
                "{name} non-finite in abort checkpoint"
            );
        }
    }

    #[test]
    fn constant_target_is_learned() {
        let tau = 4;
        let d = 1;
        let pattern = Array2::from_shape_fn((tau, d), |(i, _)| 0.2 + 0.15 * i as f64);
        let windows: Vec<TimeSeriesWindow> = (0..64)
            .map(|i| TimeSeriesWindow {
                values: pattern.clone(),
                window_index: i,
            })
            .collect();
        let mut cfg = tiny_experiment(d);
        cfg.data.window_len = tau;
        cfg.train = TrainConfig {
            lr_init: 5e-3,
            warmup_iters: 100,
            total_iters: 1500,
            batch_size: 8,
            sigma: 0.0,
            alpha: 1.0,
            seed: 3,
            ablation: Ablation::Full,
        };
        let out = train(&windows, &NormalizationStats::identity(d), &cfg).unwrap();
        assert!(out.failure.is_none());
        let smoothed: Vec<f64> = out
            .loss_log
            .chunks(50)
            .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64)
            .collect();
        let first = smoothed[0];
        let last = *smoothed.last().unwrap();
        assert!(
            last < 0.1 * first,
            "loss did not drop below 10% of start: {first} -> {last}"
        );
        // The per-iteration loss is stochastic in t and x0, so windows
        // may wobble; only a sustained return toward the starting level
        // counts as failure.
        for (i, w) in smoothed.iter().enumerate().skip(smoothed.len() / 2) {
            assert!(
                *w < 0.5 * first,
                "smoothed loss window {i} rebounded to {w} (start {first})"
            );
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut cfg = tiny_experiment(2);
        cfg.train.total_iters = 2;
        cfg.train.warmup_iters = 1;
        let windows = toy_windows(4, 4, 2);
        let out = train(&windows, &NormalizationStats::identity(2), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&out.checkpoint, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.iter, out.checkpoint.iter);
        assert_eq!(loaded.config, out.checkpoint.config);
        assert_eq!(loaded.normalization, out.checkpoint.normalization);
        for (a, b) in loaded.params.iter().zip(out.checkpoint.params.iter()) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1.mapv(f64::to_bits), b.1.mapv(f64::to_bits));
        }
        for (a, b) in loaded.opt_m.iter().zip(out.checkpoint.opt_m.iter()) {
            assert_eq!(a.1.mapv(f64::to_bits), b.1.mapv(f64::to_bits));
        }
        for (a, b) in loaded.opt_v.iter().zip(out.checkpoint.opt_v.iter()) {
            assert_eq!(a.1.mapv(f64::to_bits), b.1.mapv(f64::to_bits));
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let mut cfg = tiny_experiment(2);
        cfg.train.total_iters = 2;
        cfg.train.warmup_iters = 1;
        let windows = toy_windows(4, 4, 2);
        let out = train(&windows, &NormalizationStats::identity(2), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&out.checkpoint, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let truncated = dir.path().join("truncated.ckpt");
        std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&truncated).is_err());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        let bad_path = dir.path().join("bad.ckpt");
        std::fs::write(&bad_path, &bad).unwrap();
        let err = load_checkpoint(&bad_path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }
}
