use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{"train_horizon": 4, "eval_horizon": 4, "eval_episodes": 3,
    "dql": {"episodes": 5, "batch_size": 8, "hidden": [16, 16], "replay_capacity": 200, "target_interval": 7}}"#;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mec-migrate")).args(args).output().expect("spawn")
}

fn arg(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("small.json");
    std::fs::write(&path, SMALL).unwrap();
    path
}

#[test]
fn verify_passes_on_a_clean_build() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["verify", "--out", arg(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 3);
}

#[test]
fn optimal_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(cli(&["optimal", "--seed", "7", "--out", arg(&a)]).status.success());
    assert!(cli(&["--seed", "7", "optimal", "--out", arg(&b)]).status.success());
    let csv = std::fs::read(a.join("objective.csv")).unwrap();
    assert_eq!(csv, std::fs::read(b.join("objective.csv")).unwrap());
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("method,episode,seed,computing,communication,migration,total\n"));
    assert_eq!(text.lines().count(), 21);
}

#[test]
fn export_lp_starts_with_objective() {
    let dir = tempfile::tempdir().unwrap();
    assert!(cli(&["export-lp", "--out", arg(dir.path())]).status.success());
    let lp = std::fs::read_to_string(dir.path().join("problem.lp")).unwrap();
    assert!(lp.starts_with("Minimize\n"));
    assert!(lp.trim_end().ends_with("End"));
    let too_small = cli(&["export-lp", "--big-m", "1e-9", "--out", arg(dir.path())]);
    assert_eq!(too_small.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(cli(&["--bogus"]).status.code(), Some(2));
    assert_eq!(cli(&["optimal", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(cli(&[]).status.code(), Some(2));
    let missing = cli(&["optimal", "--config", "/definitely/not/here.json"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("not found"));
}

#[test]
fn malformed_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"vehicels": 4}"#).unwrap();
    assert_eq!(cli(&["optimal", "--config", arg(&path), "--out", arg(dir.path())]).status.code(), Some(2));
}

#[test]
fn train_then_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out = dir.path().join("run");
    let train = cli(&["train", "--config", arg(&config), "--seed", "3", "--out", arg(&out)]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let log = std::fs::read_to_string(out.join("reward_log.csv")).unwrap();
    assert!(log.starts_with("episode,agent,mean_reward,epsilon,feasible_fraction\n"));
    assert_eq!(log.lines().count(), 1 + 5 * 3);
    assert!(out.join("reward_log.gp").exists());

    let ckpt = out.join("checkpoint.json");
    let infer = cli(&["infer", "--config", arg(&config), "--checkpoint", arg(&ckpt), "--out", arg(&out)]);
    assert!(infer.status.success(), "{}", String::from_utf8_lossy(&infer.stderr));
    let objective = std::fs::read_to_string(out.join("objective.csv")).unwrap();
    assert_eq!(objective.lines().filter(|l| l.starts_with("dql,")).count(), 3);
    assert_eq!(objective.lines().filter(|l| l.starts_with("optimal,")).count(), 3);

    let sweep = cli(&[
        "sweep",
        "--axis",
        "cores",
        "--replications",
        "2",
        "--checkpoint",
        arg(&ckpt),
        "--config",
        arg(&config),
        "--out",
        arg(&out),
    ]);
    assert!(sweep.status.success(), "{}", String::from_utf8_lossy(&sweep.stderr));
    let rows = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 5 * 2 * 2);
    assert!(out.join("sweep_summary.csv").exists() && out.join("sweep.gp").exists());
}

#[test]
fn infer_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["infer", "--checkpoint", arg(&dir.path().join("none.json")), "--out", arg(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}
