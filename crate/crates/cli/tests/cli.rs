//! End-to-end tests of the `pafm` binary: each test runs the real
//! executable against a temporary directory and inspects its outputs,
//! reports, and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pafm_core::data;
use pafm_core::trainer;
use serde_json::Value;
use tempfile::TempDir;

fn pafm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pafm"))
}

fn run(args: &[&str]) -> Output {
    pafm().args(args).output().expect("spawn pafm")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "pafm {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_report(dir: &Path, command: &str) -> Value {
    let path = dir.join(format!("{command}_report.json"));
    let text =
        std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
    serde_json::from_str(&text).expect("report parses as JSON")
}

/// Common flags for a deliberately tiny model and dataset so training
/// completes in well under a second.
fn tiny_flags(out_dir: &Path) -> Vec<String> {
    let mut flags: Vec<String> = ["--preset", "sines"].map(String::from).to_vec();
    for set in [
        "data.n_samples=12",
        "data.window_len=8",
        "data.n_features=2",
        "net.d_model=8",
        "net.n_heads=2",
        "net.head_dim=4",
        "net.enc_layers=1",
        "net.dec_layers=1",
        "net.frm.n_experts=2",
        "net.frm.top_k=1",
        "net.frm.d_model=8",
        "net.frm.d_hidden=16",
        "net.time_embed_dim=8",
        "train.total_iters=3",
        "train.warmup_iters=1",
        "train.batch_size=4",
        "sampler.n_steps=5",
        "cond.n_steps=5",
    ] {
        flags.push("--set".into());
        flags.push(set.into());
    }
    flags.push("--out-dir".into());
    flags.push(out_dir.display().to_string());
    flags
}

fn run_tiny(subcommand: &[&str], out_dir: &Path) -> Output {
    let mut args: Vec<String> = subcommand.iter().map(|s| s.to_string()).collect();
    args.extend(tiny_flags(out_dir));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    run(&refs)
}

fn tiny_checkpoint(dir: &TempDir) -> PathBuf {
    let out = run_tiny(&["train"], dir.path());
    assert!(
        out.status.success(),
        "tiny train failed: {}",
        stderr_of(&out)
    );
    dir.path().join("checkpoint.bin")
}

#[test]
fn prepare_generates_sines_windows() {
    let dir = TempDir::new().unwrap();
    let out = run_tiny(&["prepare"], dir.path());
    assert!(out.status.success(), "{}", stderr_of(&out));

    let windows = data::read_windows_csv(&dir.path().join("windows.csv")).unwrap();
    assert_eq!(windows.len(), 12);
    assert_eq!(windows[0].values.dim(), (8, 2));

    let stats = data::read_stats_csv(&dir.path().join("stats.csv")).unwrap();
    assert_eq!(stats.min.len(), 2);

    let report = read_report(dir.path(), "prepare");
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["command"], "prepare");
    let outputs: Vec<String> = report["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    assert!(outputs.iter().any(|p| p.ends_with("windows.csv")));
    assert!(outputs.iter().any(|p| p.ends_with("stats.csv")));
}

#[test]
fn prepare_windows_an_external_csv() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("raw.csv");
    let mut text = String::from("a,b,c\n");
    for i in 0..30 {
        text.push_str(&format!("{},{},{}\n", i, 2 * i, 100 - i));
    }
    std::fs::write(&csv, text).unwrap();

    let out = run_ok(&[
        "prepare",
        "--preset",
        "sines",
        "--set",
        "data.has_header=true",
        "--csv",
        csv.to_str().unwrap(),
        "--window",
        "6",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("25 windows"));

    let windows = data::read_windows_csv(&dir.path().join("windows.csv")).unwrap();
    assert_eq!(windows.len(), 25);
    assert_eq!(windows[0].values.dim(), (6, 3));
    for w in &windows {
        for &v in w.values.iter() {
            assert!(
                (0.0..=1.0).contains(&v),
                "normalized value {v} out of range"
            );
        }
    }
}

#[test]
fn prepare_rejects_missing_csv() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = run(&[
        "prepare",
        "--preset",
        "sines",
        "--csv",
        missing.to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 3);
    assert!(stderr_of(&out).contains("nope.csv"));
}

#[test]
fn a_config_source_is_required() {
    let dir = TempDir::new().unwrap();
    let out = run(&["prepare", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr_of(&out).contains("--config") || stderr_of(&out).contains("--preset"));
}

#[test]
fn conflicting_config_sources_are_rejected() {
    let dir = TempDir::new().unwrap();
    let out = run(&[
        "prepare",
        "--config",
        "whatever.toml",
        "--preset",
        "sines",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr_of(&out).contains("not both"));
}

#[test]
fn unknown_override_path_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let out = run(&[
        "prepare",
        "--preset",
        "sines",
        "--set",
        "nope.x=1",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr_of(&out).contains("nope"));
}

#[test]
fn train_writes_checkpoint_log_and_report() {
    let dir = TempDir::new().unwrap();
    let mut args = vec!["train".to_string()];
    args.extend(tiny_flags(dir.path()));
    args.push("--set".into());
    args.push("train.sigma=0.05".into());
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = run(&refs);
    assert!(out.status.success(), "{}", stderr_of(&out));

    let ckpt = trainer::load_checkpoint(&dir.path().join("checkpoint.bin")).unwrap();
    assert_eq!(ckpt.iter, 3);
    assert_eq!(ckpt.config.train.sigma, 0.05);

    let log = std::fs::read_to_string(dir.path().join("loss_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "iter,lr,loss");
    assert_eq!(lines.len(), 4);

    let report = read_report(dir.path(), "train");
    assert_eq!(report["command"], "train");
    assert_eq!(report["config"]["train"]["sigma"], 0.05);
    assert!(report["timings_ms"]["train"].is_number());
    assert!(report["failure"].is_null());
}

#[test]
fn ablation_flag_drops_expert_parameters() {
    let dir = TempDir::new().unwrap();
    let mut args = vec!["train".to_string(), "--ablation".into(), "no_frm".into()];
    args.extend(tiny_flags(dir.path()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = run(&refs);
    assert!(out.status.success(), "{}", stderr_of(&out));

    let ckpt = trainer::load_checkpoint(&dir.path().join("checkpoint.bin")).unwrap();
    assert!(ckpt.params.names().all(|n| !n.contains(".frm.")));

    let sample = run_ok(&[
        "sample",
        "--ckpt",
        dir.path().join("checkpoint.bin").to_str().unwrap(),
        "-n",
        "2",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(String::from_utf8_lossy(&sample.stdout).contains("sampled 2"));
}

#[test]
fn numeric_blowup_reports_failure_and_exits_4() {
    let dir = TempDir::new().unwrap();
    let windows_csv = dir.path().join("windows.csv");
    let mut text = String::from("sample_id,timestep,f0,f1\n");
    for s in 0..4 {
        for t in 0..8 {
            text.push_str(&format!("{s},{t},1e300,-1e300\n"));
        }
    }
    std::fs::write(&windows_csv, text).unwrap();
    std::fs::write(
        dir.path().join("stats.csv"),
        "feature,min,max\n0,0,1\n1,0,1\n",
    )
    .unwrap();

    let mut args = vec![
        "train".to_string(),
        "--data".into(),
        windows_csv.display().to_string(),
        "--stats".into(),
        dir.path().join("stats.csv").display().to_string(),
    ];
    args.extend(tiny_flags(dir.path()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = run(&refs);
    assert_eq!(exit_code(&out), 4);
    assert!(stderr_of(&out).contains("aborted"));

    let report = read_report(dir.path(), "train");
    assert!(report["failure"].as_str().unwrap().contains("non-finite"));
}

#[test]
fn sample_produces_requested_windows() {
    let dir = TempDir::new().unwrap();
    let ckpt = tiny_checkpoint(&dir);
    run_ok(&[
        "sample",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "-n",
        "5",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    let windows = data::read_windows_csv(&dir.path().join("samples.csv")).unwrap();
    assert_eq!(windows.len(), 5);
    assert_eq!(windows[0].values.dim(), (8, 2));

    let report = read_report(dir.path(), "sample");
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["n"], 5);
}

#[test]
fn sampling_is_seeded_and_reproducible() {
    let dir = TempDir::new().unwrap();
    let ckpt = tiny_checkpoint(&dir);
    let sample_to = |sub: &str, seed: &str| {
        let out_dir = dir.path().join(sub);
        run_ok(&[
            "sample",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "-n",
            "2",
            "--seed",
            seed,
            "--out-dir",
            out_dir.to_str().unwrap(),
        ]);
        std::fs::read(out_dir.join("samples.csv")).unwrap()
    };
    let a = sample_to("a", "11");
    let b = sample_to("b", "11");
    let c = sample_to("c", "12");
    assert_eq!(a, b, "same seed must reproduce the same samples");
    assert_ne!(a, c, "different seeds must change the samples");
}

#[test]
fn sigma_sweep_writes_one_file_per_level() {
    let dir = TempDir::new().unwrap();
    let ckpt = tiny_checkpoint(&dir);
    run_ok(&[
        "sample",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "-n",
        "2",
        "--sweep",
        "sigma=0,0.05",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(dir.path().join("samples_sigma0.csv").exists());
    assert!(dir.path().join("samples_sigma0.05.csv").exists());

    let report = read_report(dir.path(), "sample");
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["sigma"], 0.0);
    assert_eq!(rows[1]["sigma"], 0.05);
}

#[test]
fn impute_and_predict_score_missing_cells() {
    let dir = TempDir::new().unwrap();
    let ckpt = tiny_checkpoint(&dir);
    let data_csv = dir.path().join("windows.csv");
    run_tiny(&["prepare"], dir.path());

    run_ok(&[
        "impute",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data_csv.to_str().unwrap(),
        "--missing-ratio",
        "0.5",
        "-n",
        "2",
        "--steps",
        "4",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    let imputed = data::read_windows_csv(&dir.path().join("imputed.csv")).unwrap();
    assert_eq!(imputed.len(), 2);
    let report = read_report(dir.path(), "impute");
    let mse = report["rows"][0]["mse"]["mean"].as_f64().unwrap();
    assert!(mse.is_finite() && mse >= 0.0);

    run_ok(&[
        "predict",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data_csv.to_str().unwrap(),
        "--horizon",
        "3",
        "-n",
        "2",
        "--steps",
        "4",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    let predicted = data::read_windows_csv(&dir.path().join("predicted.csv")).unwrap();
    assert_eq!(predicted.len(), 2);
    assert!(read_report(dir.path(), "predict")["rows"][0]["mse"]["mean"].is_number());
}

#[test]
fn eval_scores_identical_sets_as_indistinguishable() {
    let dir = TempDir::new().unwrap();
    run_ok(&[
        "prepare",
        "--preset",
        "sines",
        "--set",
        "data.n_samples=110",
        "--set",
        "data.window_len=12",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    let windows = dir.path().join("windows.csv");

    let out = run_ok(&[
        "eval",
        "--real",
        windows.to_str().unwrap(),
        "--synth",
        windows.to_str().unwrap(),
        "--set",
        "eval.n_runs=1",
        "--export-pca",
        "--export-histograms",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    for name in [
        "discriminative",
        "predictive",
        "context-fid",
        "correlational",
    ] {
        assert!(stdout.contains(name), "missing {name} in: {stdout}");
    }

    let report = read_report(dir.path(), "eval");
    let metrics = &report["metrics"];
    assert_eq!(metrics["correlational"]["mean"], 0.0);
    assert!(metrics["discriminative"]["mean"].as_f64().unwrap() <= 0.3);
    assert!(metrics["context_fid"]["mean"].as_f64().unwrap() >= 0.0);

    let pca = std::fs::read_to_string(dir.path().join("pca.csv")).unwrap();
    assert!(pca.starts_with("set,pc1,pc2"));
    let hist = std::fs::read_to_string(dir.path().join("histograms.csv")).unwrap();
    assert!(hist.starts_with("feature,bin_start,bin_end,real_count,synthetic_count"));
}

#[test]
fn report_config_reruns_to_an_identical_checkpoint() {
    let dir = TempDir::new().unwrap();
    let first = dir.path().join("first");
    let out = run_tiny(&["train"], &first);
    assert!(out.status.success(), "{}", stderr_of(&out));

    let report = read_report(&first, "train");
    let cfg: pafm_core::config::ExperimentConfig =
        serde_json::from_value(report["config"].clone()).unwrap();
    let toml_path = dir.path().join("rerun.toml");
    std::fs::write(&toml_path, cfg.to_toml_string().unwrap()).unwrap();

    let second = dir.path().join("second");
    std::fs::create_dir(&second).unwrap();
    run_ok(&[
        "train",
        "--config",
        toml_path.to_str().unwrap(),
        "--out-dir",
        second.to_str().unwrap(),
    ]);

    let a = std::fs::read(first.join("checkpoint.bin")).unwrap();
    let b = std::fs::read(second.join("checkpoint.bin")).unwrap();
    assert_eq!(
        a, b,
        "rerun from the report's config must reproduce the checkpoint"
    );
}

#[test]
fn eval_rejects_missing_input() {
    let dir = TempDir::new().unwrap();
    let out = run(&[
        "eval",
        "--real",
        "missing_real.csv",
        "--synth",
        "missing_synth.csv",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 3);
}
