//! Drives the `artaug` binary end to end on a small config.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn artaug(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_artaug"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn json_ok(args: &[&str]) -> Value {
    let mut full = vec!["--json"];
    full.extend_from_slice(args);
    let out = artaug(&full);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.json");
    let cfg = json!({
        "model": {"hidden": 32},
        "base_training": {"steps": 150, "batch_size": 8},
        "dataset_per_prompt": 2,
        "sampler_steps": 8,
        "prompts_per_iteration": 8,
        "fit": {"steps": 10, "batch_size": 2, "rank": 2, "eval_draws": 2},
        "min_pairs": 1,
        "epsilon_stop": -1.0,
        "max_iters": 1,
        "parallelism": 2,
        "eval": {"prompts": 6}
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn full_cycle_with_idempotent_repeats() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let run = tmp.path().join("run");
    let run = run.to_str().unwrap();

    let init = json_ok(&["init", run, "--config", &cfg, "--auto-accept", "--seed", "4"]);
    assert_eq!(init["config"]["model"]["hidden"], 32);
    assert_eq!(init["config"]["seed"], 4);
    assert_eq!(
        json_ok(&["init", run, "--config", &cfg, "--auto-accept", "--seed", "4"])["already_done"],
        true
    );

    let base = json_ok(&["train-base", run]);
    assert!(base["report"]["final_val_loss"].as_f64().unwrap() < base["report"]["initial_val_loss"].as_f64().unwrap());
    assert_eq!(json_ok(&["train-base", run])["already_done"], true);

    let inter = json_ok(&[
        "interact",
        run,
        "--prompt",
        "a dim disk on a dark background",
        "--seed",
        "3",
    ]);
    assert!(Path::new(inter["before"].as_str().unwrap()).exists());
    assert!(Path::new(inter["after"].as_str().unwrap()).exists());
    assert_eq!(inter["model_iteration"], 0);
    let again = json_ok(&[
        "interact",
        run,
        "--prompt",
        "a dim disk on a dark background",
        "--seed",
        "3",
    ]);
    assert_eq!(again["already_done"], true);
    assert_eq!(again["scores"], inter["scores"]);

    let it = json_ok(&["run-iteration", run]);
    assert_eq!(it["stats"]["generated"], 8);
    assert_eq!(json_ok(&["run-iteration", run])["already_done"], true);
    assert_eq!(json_ok(&["loop", run])["already_done"], true);

    let stats = json_ok(&["stats", run]);
    assert_eq!(stats["iterations"].as_array().unwrap().len(), 1);
    assert_eq!(stats["stop"], "max_iters");

    if it["stats"]["j"].as_u64().unwrap() > 0 {
        let exported = json_ok(&["export-lora", run]);
        assert_eq!(exported["iterations"], json!([1]));
        assert_eq!(json_ok(&["export-lora", run])["already_done"], true);
        let e = json_ok(&["evaluate", "--run", run, "--a", "current", "--b", "merged-fused"]);
        assert_eq!(e["report"]["prompts"], 6);
    }

    let same = json_ok(&[
        "evaluate",
        "--run",
        run,
        "--a",
        "base",
        "--b",
        "iter0",
        "--prompts",
        "4",
    ]);
    assert_eq!(same["report"]["win_rate"], 0.5);
    assert_eq!(same["report"]["ties"], 4);
}

#[test]
fn exit_codes() {
    assert_eq!(artaug(&["--help"]).status.code(), Some(0));
    assert_eq!(artaug(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(artaug(&["init"]).status.code(), Some(1));

    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let out = artaug(&["--json", "train-base", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["error"].as_str().unwrap().contains("nope"));

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"alpha": 0.5, "colour": "red"}"#).unwrap();
    let run = tmp.path().join("run");
    let out = artaug(&["init", run.to_str().unwrap(), "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!run.join("config.json").exists());
}

#[test]
fn evaluate_inside_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let run = tmp.path().join("run");
    json_ok(&["init", run.to_str().unwrap(), "--config", &cfg, "--auto-accept"]);
    json_ok(&["train-base", run.to_str().unwrap()]);
    let out = Command::new(env!("CARGO_BIN_EXE_artaug"))
        .args(["--json", "evaluate", "--a", "base.atw", "--b", "base"])
        .current_dir(&run)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["report"]["win_rate"], 0.5);
    assert_eq!(v["report"]["prompts"], 6);
}
