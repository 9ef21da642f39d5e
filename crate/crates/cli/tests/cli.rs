//! End-to-end runs of the `accord` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn accord(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_accord")).args(args).output().unwrap()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"seed = 3
output_dir = "{}"

[schedule]
steps = 20

[denoiser]
embed_dim = 8
hidden = 16
depth = 2
time_dim = 8

[projector]
pairs = 2000

[pretrain]
steps = 150
batch_size = 16
eval_samples = 50

[personalize]
steps = 20
eval_every = 10
eval_samples = 120
final_samples = 120
fidelity_samples = 20
trace_trajectories = 2
{extra}"#,
        dir.join("runs").display()
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn verify_thm33_passes() {
    let out = accord(&["verify", "--suite", "thm33"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["suite"], "thm33");
    assert_eq!(report["checks"], 400);
    assert_eq!(report["failures"], 0);
    assert_eq!(report["passed"], true);
}

#[test]
fn unknown_suite_is_rejected() {
    let out = accord(&["verify", "--suite", "everything"]);
    assert!(!out.status.success());
    assert_eq!(stderr_json(&out)["stage"], "arguments");
}

#[test]
fn unknown_config_key_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = small_config(dir.path(), "learning_rat = 0.1\n");
    let out = accord(&["personalize", path.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = stderr_json(&out);
    assert_eq!(err["command"], "personalize");
    assert_eq!(err["stage"], "config");
    assert!(err["message"].as_str().unwrap().contains("learning_rat"));
}

#[test]
fn missing_config_file_fails_cleanly() {
    let out = accord(&["pretrain", "/nonexistent/run.toml"]);
    assert!(!out.status.success());
    assert_eq!(stderr_json(&out)["stage"], "config");
}

#[test]
fn full_lifecycle_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), "");
    let cfg = config.to_str().unwrap();

    let out = accord(&["pretrain", cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pre = PathBuf::from(String::from_utf8(out.stdout).unwrap().trim());
    assert!(pre.join("base.ckpt").exists());
    assert!(pre.join("pretrain.json").exists());

    let run = |extra: &[&str]| {
        let mut args = vec!["personalize", cfg];
        args.extend_from_slice(extra);
        let out = accord(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        PathBuf::from(String::from_utf8(out.stdout).unwrap().trim())
    };
    let first = run(&[]);
    let metrics = fs::read(first.join("metrics.csv")).unwrap();
    let again = run(&[]);
    assert_eq!(first, again);
    assert_eq!(fs::read(again.join("metrics.csv")).unwrap(), metrics);
    let text = String::from_utf8(metrics).unwrap();
    assert!(text.starts_with("train_step,recon,dd,pd,coupling_metric,cum_discrepancy,mean_cosine_discrepancy\n"));
    assert_eq!(text.lines().count(), 4);

    let report: serde_json::Value = serde_json::from_slice(&fs::read(first.join("report.json")).unwrap()).unwrap();
    for key in ["r_conditional", "r_prior_target", "r_prior_superclass", "coupling_metric", "n_samples", "ambiguous_fraction"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }

    let baseline = run(&["--weights", "1,0,0", "--regime", "embedding", "--cosine-target", "-1"]);
    assert_ne!(baseline, first);
    let cfg_text = fs::read_to_string(baseline.join("config.toml")).unwrap();
    assert!(cfg_text.contains("regime = \"embedding\""));
    assert!(cfg_text.contains("cosine_target = -1"));

    let ckpt = first.join("personalized.ckpt");
    let samples = dir.path().join("samples.csv");
    let out = accord(&["sample", ckpt.to_str().unwrap(), "--condition", "p:g1", "-n", "7", "--seed", "2", "--out", samples.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let body = fs::read_to_string(&samples).unwrap();
    assert_eq!(body.lines().count(), 8);
    assert!(body.starts_with("x_0,x_1,subject_label,context_label"));

    let out = accord(&["sample", ckpt.to_str().unwrap(), "--condition", "p:g1", "-n", "0", "--out", samples.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = stderr_json(&out);
    assert_eq!(err["command"], "sample");
    assert!(err["message"].as_str().unwrap().contains("at least 1"));

    let analysis = dir.path().join("analysis.json");
    let out = accord(&["analyze", ckpt.to_str().unwrap(), "--out", analysis.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let again: serde_json::Value = serde_json::from_slice(&fs::read(&analysis).unwrap()).unwrap();
    assert_eq!(again["coupling_metric"], report["coupling_metric"]);
}

#[test]
fn help_lists_every_flag() {
    let out = accord(&["personalize", "--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for flag in ["--weights", "--regime", "--cosine-target", "--reference-prompt", "--seed"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
    let out = accord(&["sample", "--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for flag in ["--condition", "--num", "-n", "--seed", "--out"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
}
