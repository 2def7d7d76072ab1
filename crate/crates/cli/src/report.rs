//! Run reports: one JSON document per command invocation, embedding the
//! exact configuration so any run can be reproduced from its report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use pafm_core::config::ExperimentConfig;
use pafm_core::error::Result;
use pafm_core::metrics::{MetricReport, ScoreStat};

pub const SCHEMA_VERSION: u32 = 1;

/// One sweep entry: the sampler noise level it ran at, how many windows
/// were processed, where the output landed, and the task error when the
/// command measures one.
#[derive(Debug, Serialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<ScoreStat>,
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    /// Full configuration the run used, after presets, scale, and
    /// overrides were applied.
    pub config: ExperimentConfig,
    pub timings_ms: BTreeMap<String, u128>,
    /// Files written by this invocation, in creation order.
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub rows: Vec<SweepRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
    /// Set when training aborted on a numeric failure; the checkpoint
    /// then holds the last finite state.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl RunReport {
    pub fn new(command: &str, config: ExperimentConfig) -> RunReport {
        RunReport {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            timings_ms: BTreeMap::new(),
            outputs: Vec::new(),
            rows: Vec::new(),
            metrics: None,
            failure: None,
        }
    }

    pub fn record_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Time a phase and file its wall-clock duration under `name`.
    pub fn timed<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        self.timings_ms
            .insert(name.to_string(), start.elapsed().as_millis());
        Ok(out)
    }

    /// Serialize to `<out_dir>/<command>_report.json` and return the path.
    pub fn write(&mut self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(format!("{}_report.json", self.command));
        self.outputs.push(path.display().to_string());
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| pafm_core::Error::config(format!("serialize report: {e}")))?;
        std::fs::write(&path, text)?;
        Ok(path)
    }
}
