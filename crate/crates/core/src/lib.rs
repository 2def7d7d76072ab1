//! Perturbation-aware flow matching for multivariate time series.
//!
//! The crate trains a dual-path transformer velocity field with a
//! flow-routing mixture-of-experts decoder, samples new windows by Euler
//! integration of the learned flow, solves imputation and forecasting as
//! guided conditional sampling, and scores synthetic data against real
//! data with four independent metrics.
//!
//! Modules are layered bottom-up:
//!
//! - [`autodiff`], [`nn`], [`rng`], [`parallel`], [`linalg`]: tape-based
//!   reverse-mode differentiation, layer primitives, deterministic
//!   random streams, deterministic data parallelism, and dense symmetric
//!   eigendecomposition.
//! - [`data`], [`config`]: window extraction, normalization, synthetic
//!   sources, and the experiment configuration with named presets.
//! - [`flowmath`], [`frm_moe`], [`velocity_net`]: the interpolation
//!   path, the routed expert layer, and the full velocity network.
//! - [`trainer`], [`sampler`]: Adam training with checkpointing and
//!   (conditionally) guided Euler sampling.
//! - [`metrics`]: discriminative, predictive, context-distance, and
//!   correlational scores.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod flowmath;
pub mod frm_moe;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod rng;
pub mod sampler;
pub mod trainer;
pub mod velocity_net;

pub use config::{ExperimentConfig, Preset, PresetScale};
pub use error::{Error, Result};
pub use flowmath::VelocityField;
pub use sampler::{ConditionSpec, SamplerConfig};
pub use trainer::{Checkpoint, TrainConfig, TrainOutcome};
pub use velocity_net::{NetConfig, VelocityNet};
