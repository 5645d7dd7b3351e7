use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn marl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_marl")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn quick_train(dir: &Path, learner: &str) -> Output {
    marl(&[
        "train",
        "--learner",
        learner,
        "--env",
        "micro-2ag",
        "--total-steps",
        "600",
        "--eval-interval",
        "300",
        "--eval-episodes",
        "3",
        "--desk-scale",
        "true",
        "--batch-size",
        "4",
        "--seed",
        "5",
        "--out",
        dir.to_str().unwrap(),
    ])
}

#[test]
fn train_then_evaluate_reproduces_final_row() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = quick_train(&run, "qmix");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let last = metrics.lines().last().unwrap();
    let logged: Vec<&str> = last.split(',').collect();
    let o = marl(&["evaluate", "--checkpoint", run.to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mean = text.lines().find_map(|l| l.strip_prefix("mean_return ")).unwrap();
    let std = text.lines().find_map(|l| l.strip_prefix("std_return ")).unwrap();
    assert_eq!(mean.parse::<f64>().unwrap(), logged[4].parse::<f64>().unwrap());
    assert_eq!(std.parse::<f64>().unwrap(), logged[5].parse::<f64>().unwrap());
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# desk run\nprofile = default\nlearner = vdn\nenv = micro-2ag\ntotal_steps = 400\n").unwrap();
    let run = dir.path().join("out");
    let o = marl(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--total-steps",
        "200",
        "--eval-episodes",
        "2",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let resolved = fs::read_to_string(run.join("config.resolved")).unwrap();
    assert!(resolved.contains("learner = vdn\n"));
    assert!(resolved.contains("total_steps = 200\n"));
    assert!(resolved.contains("batch_size = 32\n"));
    assert!(resolved.contains("epsilon_anneal_steps = 50000\n"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let out = out.to_str().unwrap();
    assert_eq!(marl(&["train", "--batch-size", "0", "--out", out]).status.code(), Some(1));
    assert_eq!(marl(&["train", "--learner", "dqn", "--out", out]).status.code(), Some(1));
    assert_eq!(marl(&["train", "--bogus-flag", "1"]).status.code(), Some(1));
    assert_eq!(marl(&["train", "--env", "nowhere", "--out", out]).status.code(), Some(1));
    let missing = dir.path().join("none.bin");
    assert_eq!(
        marl(&["evaluate", "--checkpoint", missing.to_str().unwrap()]).status.code(),
        Some(2)
    );
    let o = marl(&[
        "train", "--env", "micro-2ag", "--desk-scale", "true", "--batch-size", "4",
        "--learning-rate", "1e300", "--grad-clip", "1e300", "--total-steps", "2000", "--out", out,
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
    assert_eq!(marl(&["--help"]).status.code(), Some(0));
}

#[test]
fn render_plays_an_episode() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(quick_train(&run, "ippo").status.success());
    let o = marl(&["render", "--checkpoint", run.join("checkpoint.bin").to_str().unwrap(), "--seed", "2"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.matches("step ").count(), 51);
    assert!(text.contains("step 50 actions"));
}

#[test]
fn benchmark_writes_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let o = marl(&[
        "benchmark",
        "--learners",
        "random,vdn",
        "--env",
        "micro-2ag",
        "--seeds",
        "0,1",
        "--total-steps",
        "300",
        "--eval-episodes",
        "2",
        "--desk-scale",
        "true",
        "--batch-size",
        "4",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("random,micro-2ag,2,"));
    assert!(stdout(&o).contains("test return"));
    assert!(dir.path().join("vdn_micro-2ag_seed1/checkpoint.bin").exists());
}

#[test]
fn selftest_subcommand_runs() {
    let o = marl(&["selftest", "--help"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("--seed"));
}
