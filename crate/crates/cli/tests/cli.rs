use std::path::Path;
use std::process::{Command, Output};

use bunker_core::collision_data::PairRolloutConfig;
use bunker_core::collision_model::CmTrainConfig;
use bunker_core::experiment::ExperimentConfig;
use bunker_core::ppo::PpoConfig;

fn bunker(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bunker"))
        .args(args)
        .env_remove("BUNKER_OUT")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let cfg = ExperimentConfig {
        containers: 3,
        seeds: vec![0, 1],
        total_steps: 256 * 8,
        ppo: PpoConfig {
            rollout_steps: 256,
            n_envs: 2,
            minibatch_size: 64,
            epochs_per_update: 1,
            hidden: vec![8],
            ..Default::default()
        },
        pair_data: PairRolloutConfig {
            repetitions: 400,
            ..Default::default()
        },
        cm: CmTrainConfig {
            n_trees: 5,
            ..Default::default()
        },
        theta_grid: vec![0.2, 0.5, 0.8],
        n_rollouts: 2,
        sweep_rollouts: 1,
        ..Default::default()
    };
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = bunker(&["--out", d.to_str().unwrap(), "--containers", "4", "simulate", "--seed", "5"]);
        ok(&out);
    }
    let ta = std::fs::read(a.join("trajectory_5.jsonl")).unwrap();
    assert_eq!(ta, std::fs::read(b.join("trajectory_5.jsonl")).unwrap());
    let text = String::from_utf8(ta).unwrap();
    // header plus one line per step of a full episode
    assert_eq!(text.lines().count(), 601);
    let recs = bunker_core::env::read_trajectory_jsonl(text.as_bytes()).unwrap();
    assert_eq!(recs.len(), 600);
}

#[test]
fn usage_and_input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(bunker(&["--config", "/no/such/file.toml", "simulate"]).status.code(), Some(2));
    assert_eq!(bunker(&["--out", d, "train-cm"]).status.code(), Some(2));
    assert_eq!(bunker(&["--out", d, "evaluate", "--seeds", "3"]).status.code(), Some(2));
    assert_eq!(bunker(&["--out", d, "simulate", "--policy", "/no/weights.json"]).status.code(), Some(2));
    assert_eq!(bunker(&["--out", d, "simulate", "--phase", "7"]).status.code(), Some(2));
    assert_eq!(bunker(&["frobnicate"]).status.code(), Some(2));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seeds = \"zero\"").unwrap();
    assert_eq!(bunker(&["--config", bad.to_str().unwrap(), "simulate"]).status.code(), Some(2));
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_bunker"))
        .args(["--containers", "2", "simulate", "--policy", "noop"])
        .env("BUNKER_OUT", dir.path())
        .output()
        .unwrap();
    ok(&out);
    assert!(dir.path().join("trajectory_0.jsonl").exists());
    assert!(dir.path().join("manifest_simulate.json").exists());
}

#[test]
fn full_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = out.to_str().unwrap();
    let base = ["--config", cfg.as_str(), "--out", o, "--jobs", "2"];
    let run = |extra: &[&str]| {
        let mut args: Vec<&str> = base.to_vec();
        args.extend_from_slice(extra);
        bunker(&args)
    };

    ok(&run(&["train", "--mode", "curriculum"]));
    ok(&run(&["train", "--mode", "naive"]));
    let log = std::fs::read_to_string(out.join("train_log_cl_0.csv")).unwrap();
    assert!(log.starts_with("# bunker "));
    assert_eq!(log.matches("phase_start").count(), 3);
    let log = std::fs::read_to_string(out.join("train_log_naive_1.csv")).unwrap();
    assert_eq!(log.matches("phase_start").count(), 1);

    ok(&run(&["gen-data"]));
    assert!(out.join("pairs.jsonl.summary.json").exists());
    ok(&run(&["train-cm"]));
    let model = std::fs::read_to_string(out.join("collision_model.json")).unwrap();
    assert!(model.contains("\"manifest\""));

    ok(&run(&["sweep"]));
    let sweep = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = sweep.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("0.2,"));

    ok(&run(&["evaluate", "--theta", "0.5"]));
    let first: Vec<Vec<u8>> = ["eval_naive.csv", "eval_cl.csv", "eval_cl_cm.csv"]
        .iter()
        .map(|f| std::fs::read(out.join(f)).unwrap())
        .collect();
    let csv = String::from_utf8(first[2].clone()).unwrap();
    assert_eq!(csv.lines().count(), 2 + 2 * 2);
    ok(&run(&["evaluate", "--theta", "0.5"]));
    for (k, f) in ["eval_naive.csv", "eval_cl.csv", "eval_cl_cm.csv"].iter().enumerate() {
        assert_eq!(std::fs::read(out.join(f)).unwrap(), first[k], "{f} differs between runs");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["rows"].as_array().unwrap().len(), 6);
}
