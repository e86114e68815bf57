//! The `keygate` binary end to end on tiny configurations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use keygate_cli::commands::PretrainSummary;
use keygate_cli::{ExperimentConfig, EXIT_CONFIG, EXIT_IO};

fn keygate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_keygate")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, format!("out_dir = {:?}\n{body}", dir.join("runs"))).unwrap();
    path
}

const TINY: &str = r#"
task = "imitation"
[arch]
hidden = [16, 16]
[data]
demos = 30
personalized_demos = 30
[pretrain]
epochs = 20
steps_per_epoch = 5
[train]
epochs = 5
steps_per_epoch = 5
key_len = 16
encoder_hidden = [8]
[eval]
trials = 4
leakage_trials = 3
"#;

fn run_dir(stdout: &[u8]) -> PathBuf {
    let text = String::from_utf8_lossy(stdout);
    let line = text.lines().find(|l| l.starts_with("run directory: ")).expect("run directory printed");
    PathBuf::from(line.trim_start_matches("run directory: "))
}

#[test]
fn shipped_presets_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 5);
}

#[test]
fn lifecycle_is_replayable_and_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let cfg = cfg.to_str().unwrap();

    let out = keygate(&["--config", cfg, "pretrain"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = run_dir(&out.stdout);
    let pre = dir.join("pretrain.ckpt");
    let pre = pre.to_str().unwrap();
    let summary: PretrainSummary = serde_json::from_str(&fs::read_to_string(dir.join("pretrain.json")).unwrap()).unwrap();
    assert_eq!(summary.config_hash.len(), 64);
    assert!(dir.ends_with(&summary.config_hash[..12]));

    // Evaluating the pretrained checkpoint reproduces the reported null-key metric.
    let out = keygate(&["--config", cfg, "--checkpoint", pre, "eval"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("eval/pretrain/report.json")).unwrap()).unwrap();
    let null_general = report["cells"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["key_class"] == "null" && c["objective"] == "general")
        .unwrap();
    assert_eq!(null_general["summary"]["mean"].as_f64().unwrap(), summary.null_metric.mean);
    assert_eq!(report["config_hash"], summary.config_hash.as_str());

    let out = keygate(&["--config", cfg, "--checkpoint", pre, "personalize"]);
    assert!(out.status.success());
    let first = fs::read(dir.join("personalized.ckpt")).unwrap();
    let out = keygate(&["--config", cfg, "--checkpoint", pre, "personalize"]);
    assert!(out.status.success());
    assert_eq!(first, fs::read(dir.join("personalized.ckpt")).unwrap());

    let ckpt = dir.join("personalized.ckpt");
    let out = keygate(&["--config", cfg, "--checkpoint", ckpt.to_str().unwrap(), "--format", "csv", "leakage"]);
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.join("leakage/personalized/leakage.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 17);
}

#[test]
fn seed_override_changes_the_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "task = \"imitation\"\n[gradcheck]\ninstances = 3\n");
    let cfg = cfg.to_str().unwrap();
    let a = keygate(&["--config", cfg, "gradcheck"]);
    let b = keygate(&["--config", cfg, "--seed", "7", "gradcheck"]);
    assert!(a.status.success() && b.status.success());
    assert_ne!(run_dir(&a.stdout), run_dir(&b.stdout));
    let written: serde_json::Value = serde_json::from_str(&fs::read_to_string(run_dir(&b.stdout).join("gradcheck.json")).unwrap()).unwrap();
    assert!(written["max_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn malformed_config_exits_with_the_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "task = \"imitation\"\n[train]\nepochz = 3\n");
    let out = keygate(&["--config", cfg.to_str().unwrap(), "gradcheck"]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG as i32));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("epochz"), "{err}");
}

#[test]
fn missing_files_exit_with_the_io_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = keygate(&["--config", tmp.path().join("nope.toml").to_str().unwrap(), "pretrain"]);
    assert_eq!(out.status.code(), Some(EXIT_IO as i32));

    let cfg = write_config(tmp.path(), TINY);
    let garbage = tmp.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let out = keygate(&["--config", cfg.to_str().unwrap(), "--checkpoint", garbage.to_str().unwrap(), "eval"]);
    assert_eq!(out.status.code(), Some(EXIT_IO as i32));
}

#[test]
fn derive_key_is_stable() {
    let a = keygate(&["derive-key", "--passphrase", "correct horse", "--bits", "32"]);
    let b = keygate(&["derive-key", "--passphrase", "correct horse", "--bits", "32"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert!(String::from_utf8_lossy(&a.stdout).starts_with("32:"));
}
