//! The six command implementations. Each resolves its configuration,
//! does the work through `pafm_core`, and writes a run report next to
//! its other outputs.

use std::path::{Path, PathBuf};

use pafm_core::config::{apply_scale, preset, ExperimentConfig};
use pafm_core::data::{self, NormalizationStats, TimeSeriesWindow};
use pafm_core::error::{Error, Result};
use pafm_core::metrics::{self, ScoreStat};
use pafm_core::sampler::SamplerConfig;
use pafm_core::trainer::{self, Checkpoint};

use crate::report::{RunReport, SweepRow};
use crate::{CommonArgs, EvalArgs, ImputeArgs, PredictArgs, PrepareArgs, SampleArgs, TrainArgs};

/// Build the effective configuration from `--config` or `--preset`,
/// then apply `--seed` and each `--set` override in order.
fn resolve_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match (&common.config, &common.preset) {
        (Some(_), Some(_)) => {
            return Err(Error::config("give either --config or --preset, not both"))
        }
        (Some(path), None) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
            ExperimentConfig::from_toml_str(&text)?
        }
        (None, Some(name)) => {
            let mut cfg = preset(name.parse()?);
            apply_scale(&mut cfg, common.preset_scale.parse()?);
            cfg
        }
        (None, None) => return Err(Error::config("a --config file or --preset is required")),
    };
    apply_common_overrides(&mut cfg, common)?;
    Ok(cfg)
}

fn apply_common_overrides(cfg: &mut ExperimentConfig, common: &CommonArgs) -> Result<()> {
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.sampler.seed = seed;
        cfg.eval.seed = seed;
    }
    cfg.apply_overrides(&common.set)?;
    cfg.validate()
}

fn ensure_out_dir(common: &CommonArgs) -> Result<PathBuf> {
    std::fs::create_dir_all(&common.out_dir)?;
    Ok(common.out_dir.clone())
}

/// Materialize windows and stats from the data section: the synthetic
/// sine source generates directly in `[0, 1]`, CSV sources are windowed
/// and min-max normalized.
fn materialize_data(cfg: &ExperimentConfig) -> Result<(Vec<TimeSeriesWindow>, NormalizationStats)> {
    let dc = &cfg.data;
    if dc.source == "sines" {
        let windows =
            data::generate_sines(dc.n_samples, dc.window_len, dc.n_features, dc.split_seed)?;
        Ok((windows, NormalizationStats::identity(dc.n_features)))
    } else {
        let series = data::load_csv(Path::new(&dc.source), dc.has_header)?;
        if series.dim() != dc.n_features {
            return Err(Error::config(format!(
                "{} has {} features but the config expects {}",
                dc.source,
                series.dim(),
                dc.n_features
            )));
        }
        data::window_and_normalize(&series, dc.window_len, dc.stride)
    }
}

pub fn cmd_prepare(common: &CommonArgs, args: &PrepareArgs) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    if let Some(csv) = &args.csv {
        cfg.apply_override(&format!("data.source={}", csv.display()))?;
        let series = data::load_csv(csv, cfg.data.has_header)?;
        cfg.apply_override(&format!("data.n_features={}", series.dim()))?;
    }
    if let Some(window) = args.window {
        cfg.apply_override(&format!("data.window_len={window}"))?;
    }
    let out_dir = ensure_out_dir(common)?;
    let mut report = RunReport::new("prepare", cfg.clone());

    let (windows, stats) = report.timed("prepare_data", || materialize_data(&cfg))?;
    let (windows_path, stats_path) = report.timed("write", || {
        let windows_path = out_dir.join("windows.csv");
        data::write_windows_csv(&windows_path, &windows)?;
        let stats_path = out_dir.join("stats.csv");
        data::write_stats_csv(&stats_path, &stats)?;
        Ok((windows_path, stats_path))
    })?;
    report.record_output(&windows_path);
    report.record_output(&stats_path);
    let path = report.write(&out_dir)?;
    println!(
        "prepared {} windows ({} x {}) -> {}",
        windows.len(),
        cfg.data.window_len,
        windows[0].dim(),
        path.display()
    );
    Ok(())
}

pub fn cmd_train(common: &CommonArgs, args: &TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    if let Some(mode) = &args.ablation {
        cfg.apply_override(&format!("train.ablation={mode}"))?;
    }
    let out_dir = ensure_out_dir(common)?;
    let mut report = RunReport::new("train", cfg.clone());

    let (windows, stats) = report.timed("prepare_data", || match (&args.data, &args.stats) {
        (Some(data_path), Some(stats_path)) => Ok((
            data::read_windows_csv(data_path)?,
            data::read_stats_csv(stats_path)?,
        )),
        (None, None) => materialize_data(&cfg),
        _ => Err(Error::config(
            "--data and --stats must be given together (or neither)",
        )),
    })?;

    let outcome = report.timed("train", || trainer::train(&windows, &stats, &cfg))?;
    let (ckpt_path, log_path) = report.timed("write", || {
        let ckpt_path = out_dir.join("checkpoint.bin");
        trainer::save_checkpoint(&outcome.checkpoint, &ckpt_path)?;
        let log_path = out_dir.join("loss_log.csv");
        trainer::write_loss_log(&log_path, &outcome.loss_log)?;
        Ok((ckpt_path, log_path))
    })?;
    report.record_output(&ckpt_path);
    report.record_output(&log_path);
    report.failure = outcome.failure.as_ref().map(|f| f.message.clone());
    let path = report.write(&out_dir)?;

    match &outcome.failure {
        Some(f) => {
            eprintln!(
                "training aborted at iteration {}: {} (last finite state saved)",
                f.iter, f.message
            );
            Err(Error::numeric(f.message.clone()))
        }
        None => {
            let last = outcome.loss_log.last().map(|r| r.loss).unwrap_or(f64::NAN);
            println!(
                "trained {} iterations (final loss {last:.6}) -> {}",
                outcome.checkpoint.iter,
                path.display()
            );
            Ok(())
        }
    }
}

/// Load a checkpoint and overlay `--seed`/`--set` onto its embedded
/// configuration, so inference-time sections (sampler, cond) can be
/// adjusted without retraining.
fn load_checkpoint_with_overrides(path: &Path, common: &CommonArgs) -> Result<Checkpoint> {
    let mut ckpt = trainer::load_checkpoint(path)?;
    apply_common_overrides(&mut ckpt.config, common)?;
    Ok(ckpt)
}

/// Parse `--sweep sigma=a,b,c` into the noise levels to run; without a
/// sweep the configured level is the single entry.
fn sweep_sigmas(spec: Option<&str>, default_sigma: f64) -> Result<Vec<f64>> {
    let Some(spec) = spec else {
        return Ok(vec![default_sigma]);
    };
    let values = spec
        .strip_prefix("sigma=")
        .ok_or_else(|| Error::config(format!("unsupported sweep '{spec}' (expected sigma=...)")))?;
    let sigmas: Vec<f64> = values
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad sweep value '{s}'")))
        })
        .collect::<Result<_>>()?;
    if sigmas.is_empty() {
        return Err(Error::config("sweep lists no values"));
    }
    Ok(sigmas)
}

/// File suffix distinguishing sweep outputs; empty for a single run.
fn sweep_suffix(sigmas: &[f64], sigma: f64) -> String {
    if sigmas.len() == 1 {
        String::new()
    } else {
        format!("_sigma{sigma}")
    }
}

fn as_windows(samples: Vec<ndarray::Array2<f64>>) -> Vec<TimeSeriesWindow> {
    samples
        .into_iter()
        .enumerate()
        .map(|(i, values)| TimeSeriesWindow {
            values,
            window_index: i,
        })
        .collect()
}

pub fn cmd_sample(common: &CommonArgs, args: &SampleArgs) -> Result<()> {
    let ckpt = load_checkpoint_with_overrides(&args.ckpt, common)?;
    let out_dir = ensure_out_dir(common)?;
    let mut report = RunReport::new("sample", ckpt.config.clone());

    let mut scfg = ckpt.config.sampler.clone();
    if let Some(steps) = args.steps {
        scfg.n_steps = steps;
    }
    let sigmas = sweep_sigmas(args.sweep.as_deref(), scfg.sigma)?;
    for &sigma in &sigmas {
        let run_cfg = SamplerConfig {
            sigma,
            ..scfg.clone()
        };
        let samples = report.timed(&format!("sample_sigma{sigma}"), || {
            pafm_core::sampler::sample_unconditional(&ckpt, args.n, &run_cfg)
        })?;
        let suffix = sweep_suffix(&sigmas, sigma);
        let path = out_dir.join(format!("samples{suffix}.csv"));
        data::write_windows_csv(&path, &as_windows(samples))?;
        report.record_output(&path);
        report.rows.push(SweepRow {
            sigma,
            n: args.n,
            output: Some(path.display().to_string()),
            mse: None,
        });
    }
    let path = report.write(&out_dir)?;
    println!(
        "sampled {} windows x {} noise level(s) -> {}",
        args.n,
        sigmas.len(),
        path.display()
    );
    Ok(())
}

/// Shared driver for the two conditional tasks: runs `task` on the
/// first `cap` windows at each sweep noise level, exporting the
/// reconstructions and the masked-cell MSE statistics.
#[allow(clippy::too_many_arguments)]
fn conditional_command(
    common: &CommonArgs,
    command: &str,
    output_stem: &str,
    ckpt_path: &Path,
    data_path: &Path,
    cap: Option<usize>,
    steps: Option<usize>,
    sweep: Option<&str>,
    task: impl Fn(
        &Checkpoint,
        &TimeSeriesWindow,
        &SamplerConfig,
        u64,
    ) -> Result<pafm_core::sampler::TaskResult>,
) -> Result<()> {
    let ckpt = load_checkpoint_with_overrides(ckpt_path, common)?;
    let out_dir = ensure_out_dir(common)?;
    let mut report = RunReport::new(command, ckpt.config.clone());

    let windows = data::read_windows_csv(data_path)?;
    let n = cap.map_or(windows.len(), |c| c.min(windows.len()));
    if n == 0 {
        return Err(Error::argument("no windows to process"));
    }

    let mut scfg = ckpt.config.sampler.clone();
    scfg.n_steps = steps.unwrap_or(ckpt.config.cond.n_steps);
    let sigmas = sweep_sigmas(sweep, scfg.sigma)?;
    for &sigma in &sigmas {
        let run_cfg = SamplerConfig {
            sigma,
            ..scfg.clone()
        };
        let (outputs, errors) = report.timed(&format!("{command}_sigma{sigma}"), || {
            let mut outputs = Vec::with_capacity(n);
            let mut errors = Vec::with_capacity(n);
            for (i, w) in windows[..n].iter().enumerate() {
                // Distinct mask seed per window; generation noise stays
                // on the sampler seed's streams.
                let result = task(&ckpt, w, &run_cfg, run_cfg.seed.wrapping_add(i as u64))?;
                errors.push(result.mse);
                outputs.push(TimeSeriesWindow {
                    values: result.output,
                    window_index: i,
                });
            }
            Ok((outputs, errors))
        })?;
        let suffix = sweep_suffix(&sigmas, sigma);
        let path = out_dir.join(format!("{output_stem}{suffix}.csv"));
        data::write_windows_csv(&path, &outputs)?;
        report.record_output(&path);
        report.rows.push(SweepRow {
            sigma,
            n,
            output: Some(path.display().to_string()),
            mse: Some(ScoreStat::from_samples(&errors)),
        });
    }
    let path = report.write(&out_dir)?;
    let mse = report.rows[0].mse.as_ref().expect("mse recorded").mean;
    println!(
        "{command} on {n} windows, mse {mse:.6} at sigma {} -> {}",
        sigmas[0],
        path.display()
    );
    Ok(())
}

pub fn cmd_impute(common: &CommonArgs, args: &ImputeArgs) -> Result<()> {
    let ratio = args.missing_ratio;
    conditional_command(
        common,
        "impute",
        "imputed",
        &args.ckpt,
        &args.data,
        args.n,
        args.steps,
        args.sweep.as_deref(),
        |ckpt, w, cfg, seed| pafm_core::sampler::impute(ckpt, w, ratio, cfg, seed),
    )
}

pub fn cmd_predict(common: &CommonArgs, args: &PredictArgs) -> Result<()> {
    let horizon = args.horizon;
    conditional_command(
        common,
        "predict",
        "predicted",
        &args.ckpt,
        &args.data,
        args.n,
        args.steps,
        args.sweep.as_deref(),
        |ckpt, w, cfg, seed| pafm_core::sampler::predict(ckpt, w, horizon, cfg, seed),
    )
}

pub fn cmd_eval(common: &CommonArgs, args: &EvalArgs) -> Result<()> {
    // Evaluation only reads the eval section; default to the sines
    // preset when no config is named so bare `eval --real .. --synth ..`
    // works.
    let cfg = if common.config.is_none() && common.preset.is_none() {
        let mut cfg = preset("sines".parse()?);
        apply_common_overrides(&mut cfg, common)?;
        cfg
    } else {
        resolve_config(common)?
    };
    let out_dir = ensure_out_dir(common)?;
    let mut report = RunReport::new("eval", cfg.clone());

    let real = data::read_windows_csv(&args.real)?;
    let synth = data::read_windows_csv(&args.synth)?;
    let metric_report = report.timed("evaluate", || {
        metrics::evaluate(&real, &synth, cfg.eval.n_runs, cfg.eval.seed)
    })?;
    if args.export_pca {
        let path = out_dir.join("pca.csv");
        metrics::pca::export_pca_csv(&real, &synth, &path)?;
        report.record_output(&path);
    }
    if args.export_histograms {
        let path = out_dir.join("histograms.csv");
        metrics::pca::export_histograms_csv(&real, &synth, &path)?;
        report.record_output(&path);
    }
    println!(
        "discriminative {:.4} (±{:.4})  predictive {:.4} (±{:.4})  context-fid {:.4} (±{:.4})  correlational {:.4}",
        metric_report.discriminative.mean,
        metric_report.discriminative.std,
        metric_report.predictive.mean,
        metric_report.predictive.std,
        metric_report.context_fid.mean,
        metric_report.context_fid.std,
        metric_report.correlational.mean,
    );
    for warning in &metric_report.warnings {
        eprintln!("warning: {warning}");
    }
    report.metrics = Some(metric_report);
    let path = report.write(&out_dir)?;
    println!("wrote {}", path.display());
    Ok(())
}
