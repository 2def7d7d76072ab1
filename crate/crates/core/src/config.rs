//! Experiment configuration: one serializable struct covering data,
//! network, training, sampling, conditional tasks, and evaluation, with
//! named per-dataset presets, a desk-scale reduction for CPU runs, and
//! dotted-path overrides (`train.sigma=0.2`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frm_moe::FrmConfig;
use crate::sampler::SamplerConfig;
use crate::trainer::{Ablation, TrainConfig};
use crate::velocity_net::NetConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// `"sines"` for the synthetic generator, otherwise a CSV path.
    pub source: String,
    pub window_len: usize,
    pub stride: usize,
    pub split_seed: u64,
    /// Number of windows to generate when `source == "sines"`.
    pub n_samples: usize,
    pub n_features: usize,
    #[serde(default)]
    pub has_header: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondConfig {
    /// Integration steps for conditional tasks (imputation, prediction).
    pub n_steps: usize,
    pub gamma: f64,
    pub refine_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_runs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub cond: CondConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.source.is_empty() {
            return Err(Error::config("data.source must not be empty"));
        }
        if d.window_len < 2 || d.stride == 0 || d.n_features == 0 {
            return Err(Error::config(
                "data.window_len must be >= 2, stride and n_features >= 1",
            ));
        }
        if d.source == "sines" && d.n_samples == 0 {
            return Err(Error::config("data.n_samples must be >= 1 for sines"));
        }
        self.net.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        if self.cond.n_steps == 0 {
            return Err(Error::config("cond.n_steps must be >= 1"));
        }
        if !self.cond.gamma.is_finite() || self.cond.gamma < 0.0 {
            return Err(Error::config("cond.gamma must be finite and >= 0"));
        }
        if self.eval.n_runs == 0 {
            return Err(Error::config("eval.n_runs must be >= 1"));
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("serialize config: {e}")))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("parse config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `path=value` override, e.g. `train.sigma=0.2`. Values
    /// are parsed as bool, integer, float, then string, in that order.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        self.apply_overrides(&[assignment])
    }

    /// Apply a batch of overrides and validate once at the end, so
    /// interdependent fields (e.g. warmup and total iterations) can be
    /// changed together in any order. A failing batch leaves the config
    /// untouched.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, assignments: &[S]) -> Result<()> {
        if assignments.is_empty() {
            return Ok(());
        }
        let mut root = toml::Value::try_from(&*self)
            .map_err(|e| Error::config(format!("serialize config: {e}")))?;
        for assignment in assignments {
            set_in_tree(&mut root, assignment.as_ref())?;
        }
        let updated: ExperimentConfig = root
            .try_into()
            .map_err(|e| Error::config(format!("apply overrides: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}

fn set_in_tree(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override '{assignment}' is not path=value")))?;
    let (path, raw) = (path.trim(), raw.trim());
    if path.is_empty() {
        return Err(Error::config("override path is empty"));
    }
    let segments: Vec<&str> = path.split('.').collect();
    let (leaf, parents) = segments.split_last().expect("path is non-empty");
    let mut node = root;
    for seg in parents {
        let current = node;
        node = current
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override path '{path}' is not a field")))?
            .get_mut(*seg)
            .ok_or_else(|| Error::config(format!("unknown config section '{seg}'")))?;
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::config(format!("override path '{path}' is not a field")))?;
    let existing = table
        .get(*leaf)
        .ok_or_else(|| Error::config(format!("unknown config field '{path}'")))?;
    table.insert((*leaf).to_string(), parse_override_value(raw, existing));
    Ok(())
}

fn parse_override_value(raw: &str, existing: &toml::Value) -> toml::Value {
    match existing {
        toml::Value::Boolean(_) => {
            if let Ok(b) = raw.parse::<bool>() {
                return toml::Value::Boolean(b);
            }
        }
        toml::Value::Integer(_) => {
            if let Ok(i) = raw.parse::<i64>() {
                return toml::Value::Integer(i);
            }
        }
        toml::Value::Float(_) => {
            if let Ok(f) = raw.parse::<f64>() {
                return toml::Value::Float(f);
            }
        }
        _ => {}
    }
    if let Ok(b) = raw.parse::<bool>() {
        toml::Value::Boolean(b)
    } else if let Ok(i) = raw.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = raw.parse::<f64>() {
        toml::Value::Float(f)
    } else {
        toml::Value::String(raw.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Sines,
    Stocks,
    Etth1,
    Mujoco,
    Energy,
    Fmri,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sines" => Ok(Preset::Sines),
            "stocks" => Ok(Preset::Stocks),
            "etth1" => Ok(Preset::Etth1),
            "mujoco" => Ok(Preset::Mujoco),
            "energy" => Ok(Preset::Energy),
            "fmri" => Ok(Preset::Fmri),
            other => Err(Error::config(format!(
                "unknown preset '{other}' (expected sines, stocks, etth1, mujoco, energy, fmri)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PresetScale {
    #[default]
    Paper,
    /// CPU-friendly reduction: head width halved (d_model follows), a
    /// third of the training iterations, a fifth of the integration steps.
    Desk,
}

impl std::str::FromStr for PresetScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "paper" => Ok(PresetScale::Paper),
            "desk" => Ok(PresetScale::Desk),
            other => Err(Error::config(format!(
                "unknown preset scale '{other}' (expected paper or desk)"
            ))),
        }
    }
}

struct PresetRow {
    source: &'static str,
    n_features: usize,
    head_dim: usize,
    enc_layers: usize,
    dec_layers: usize,
    batch_size: usize,
    sampling_steps: usize,
    total_iters: usize,
    n_samples: usize,
}

fn preset_row(p: Preset) -> PresetRow {
    match p {
        Preset::Sines => PresetRow {
            source: "sines",
            n_features: 5,
            head_dim: 16,
            enc_layers: 1,
            dec_layers: 2,
            batch_size: 128,
            sampling_steps: 500,
            total_iters: 12_000,
            n_samples: 10_000,
        },
        Preset::Stocks => PresetRow {
            source: "stocks.csv",
            n_features: 6,
            head_dim: 16,
            enc_layers: 2,
            dec_layers: 2,
            batch_size: 64,
            sampling_steps: 500,
            total_iters: 10_000,
            n_samples: 0,
        },
        Preset::Etth1 => PresetRow {
            source: "etth1.csv",
            n_features: 7,
            head_dim: 16,
            enc_layers: 3,
            dec_layers: 2,
            batch_size: 128,
            sampling_steps: 500,
            total_iters: 18_000,
            n_samples: 0,
        },
        Preset::Mujoco => PresetRow {
            source: "mujoco.csv",
            n_features: 14,
            head_dim: 16,
            enc_layers: 3,
            dec_layers: 2,
            batch_size: 128,
            sampling_steps: 1_000,
            total_iters: 14_000,
            n_samples: 0,
        },
        Preset::Energy => PresetRow {
            source: "energy.csv",
            n_features: 28,
            head_dim: 24,
            enc_layers: 4,
            dec_layers: 3,
            batch_size: 64,
            sampling_steps: 1_000,
            total_iters: 25_000,
            n_samples: 0,
        },
        Preset::Fmri => PresetRow {
            source: "fmri.csv",
            n_features: 50,
            head_dim: 24,
            enc_layers: 4,
            dec_layers: 4,
            batch_size: 128,
            sampling_steps: 1_000,
            total_iters: 15_000,
            n_samples: 0,
        },
    }
}

const N_HEADS: usize = 4;

pub fn preset(p: Preset) -> ExperimentConfig {
    let row = preset_row(p);
    let d_model = N_HEADS * row.head_dim;
    ExperimentConfig {
        data: DataConfig {
            source: row.source.to_string(),
            window_len: 24,
            stride: 1,
            split_seed: 7,
            n_samples: row.n_samples,
            n_features: row.n_features,
            has_header: row.source != "sines",
        },
        net: NetConfig {
            d_model,
            n_heads: N_HEADS,
            head_dim: row.head_dim,
            enc_layers: row.enc_layers,
            dec_layers: row.dec_layers,
            frm: FrmConfig {
                n_experts: 4,
                top_k: 2,
                d_model,
                d_hidden: 4 * d_model,
            },
            conv_kernel: 3,
            time_embed_dim: d_model,
            dense_ffn: false,
            untied_paths: false,
        },
        train: TrainConfig {
            lr_init: 8e-4,
            warmup_iters: 500,
            total_iters: row.total_iters,
            batch_size: row.batch_size,
            sigma: 0.1,
            alpha: 1.0,
            seed: 0,
            ablation: Ablation::Full,
        },
        sampler: SamplerConfig {
            n_steps: row.sampling_steps,
            sigma: 0.1,
            alpha: 1.0,
            seed: 0,
        },
        cond: CondConfig {
            n_steps: 200,
            gamma: 0.05,
            refine_steps: 1,
        },
        eval: EvalConfig { n_runs: 5, seed: 0 },
    }
}

pub fn apply_scale(cfg: &mut ExperimentConfig, scale: PresetScale) {
    if scale == PresetScale::Paper {
        return;
    }
    cfg.net.head_dim = (cfg.net.head_dim / 2).max(1);
    cfg.net.d_model = cfg.net.n_heads * cfg.net.head_dim;
    cfg.net.frm.d_model = cfg.net.d_model;
    cfg.net.frm.d_hidden = 4 * cfg.net.d_model;
    cfg.net.time_embed_dim = cfg.net.d_model;
    cfg.train.total_iters = (cfg.train.total_iters / 3).max(cfg.train.warmup_iters + 1);
    cfg.sampler.n_steps = (cfg.sampler.n_steps / 5).max(1);
    cfg.cond.n_steps = (cfg.cond.n_steps / 5).max(1);
}
