use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn mdpolicy(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdpolicy"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mdpolicy(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(mdpolicy(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mdpolicy(&["gen-data", "--set", "train.nope=1"]).status.code(), Some(1));
    assert_eq!(mdpolicy(&["gen-data", "--profile", "huge"]).status.code(), Some(1));
    assert_eq!(mdpolicy(&["eval", "--profile", "micro", "--suite", "xyz"]).status.code(), Some(1));
    assert_eq!(mdpolicy(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let out = mdpolicy(&["train", "--profile", "micro", "--data", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.jsonl"));
    let bogus = dir.path().join("bogus.ckpt");
    std::fs::write(&bogus, b"not a checkpoint").unwrap();
    assert_eq!(mdpolicy(&["decode-trace", "--ckpt", s(&bogus)]).status.code(), Some(2));
}

#[test]
fn gen_data_is_reproducible_and_verifiable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let start = Instant::now();
    ok(&["gen-data", "--out", s(&a), "--n", "10"]);
    assert!(start.elapsed().as_secs_f64() < 5.0);
    ok(&["gen-data", "--out", s(&b), "--n", "10"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(std::fs::read_to_string(&a).unwrap().lines().count(), 10);

    let side = json(&dir.path().join("a.jsonl.summary.json"));
    assert_eq!(side["episodes"], 10);
    assert_eq!(side["config_hash"].as_str().unwrap().len(), 64);
    ok(&["verify", "--data", s(&a)]);

    let mut text = std::fs::read_to_string(&a).unwrap();
    text.push('\n');
    std::fs::write(&a, text).unwrap();
    assert_eq!(mdpolicy(&["verify", "--data", s(&a)]).status.code(), Some(2));
    assert_eq!(mdpolicy(&["verify", "--data", s(&b), "--set", "seed=5"]).status.code(), Some(2));
}

#[test]
fn micro_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.jsonl");
    let ckpt = dir.path().join("model.ckpt");
    let reports = dir.path().join("reports");
    let micro = ["--profile", "micro"];

    ok(&[&["gen-data"][..], &micro, &["--out", s(&data)]].concat());
    let start = Instant::now();
    let out = ok(&[&["train"][..], &micro, &["--data", s(&data), "--out", s(&ckpt)]].concat());
    assert!(start.elapsed().as_secs_f64() < 60.0);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["steps"].as_u64().unwrap() > 0);
    let curve = std::fs::read_to_string(dir.path().join("model.ckpt.curve.csv")).unwrap();
    assert!(curve.starts_with("step,epoch,loss,lr,grad_norm"));
    ok(&[&["verify"][..], &micro, &["--ckpt", s(&ckpt)]].concat());

    // Plain evaluation.
    ok(&[&["eval"][..], &micro, &["--ckpt", s(&ckpt), "--out-dir", s(&reports)]].concat());
    let csv = std::fs::read_to_string(reports.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    ok(&[&["verify"][..], &micro, &["--report", s(&reports.join("eval.json"))]].concat());

    // HAD suite reuses the given checkpoint and reports both decoders.
    ok(&[&["eval"][..], &micro, &["--ckpt", s(&ckpt), "--suite", "had", "--out-dir", s(&reports)]].concat());
    let had = json(&reports.join("had.json"));
    let arms: Vec<&str> = had["arms"].as_array().unwrap().iter().map(|a| a["arm"].as_str().unwrap()).collect();
    assert_eq!(arms, ["vanilla", "hierarchical"]);
    assert!(had["base_config_hash"].as_str().unwrap().len() == 64);
    assert!(!reports.join("checkpoints").exists());
    ok(&[&["verify"][..], &micro, &["--report", s(&reports.join("had.json"))]].concat());

    // Chunk suite trains one model per chunk size.
    ok(&[&["eval"][..], &micro, &["--suite", "chunk", "--data", s(&data), "--out-dir", s(&reports)]].concat());
    let chunk = std::fs::read_to_string(reports.join("chunk.csv")).unwrap();
    assert_eq!(chunk.lines().count(), 5);
    assert!(json(&reports.join("chunk.json"))["best_arm"].is_string());
}

#[test]
fn resume_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.jsonl");
    let full = dir.path().join("full.ckpt");
    let resumed = dir.path().join("resumed.ckpt");
    let args = ["--profile", "micro", "--set", "train.epochs=2", "--set", "train.checkpoint_every=20"];
    ok(&[&["gen-data"][..], &args, &["--out", s(&data)]].concat());
    ok(&[&["train"][..], &args, &["--data", s(&data), "--out", s(&full)]].concat());
    let mid = dir.path().join("full.ckpt.step-20");
    assert!(mid.exists());
    ok(&[&["train"][..], &args, &["--data", s(&data), "--out", s(&resumed), "--resume", s(&mid)]].concat());
    assert_eq!(std::fs::read(&full).unwrap(), std::fs::read(&resumed).unwrap());

    let other = mdpolicy(&[&["train"][..], &args, &["--set", "seed=3", "--data", s(&data), "--out", s(&resumed), "--resume", s(&mid)]].concat());
    assert_eq!(other.status.code(), Some(2));
}

#[test]
fn decode_traces_follow_the_step_budget() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.jsonl");
    let ckpt = dir.path().join("model.ckpt");
    ok(&["gen-data", "--profile", "micro", "--out", s(&data)]);
    ok(&["train", "--profile", "micro", "--data", s(&data), "--out", s(&ckpt)]);

    let lines = |strategy: &str| -> Vec<serde_json::Value> {
        let out = ok(&["decode-trace", "--ckpt", s(&ckpt), "--seed", "4", "--strategy", strategy]);
        String::from_utf8(out.stdout)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    };
    let had = lines("hierarchical");
    assert_eq!(had.len(), 5 * 2);
    let vanilla = lines("vanilla");
    assert_eq!(vanilla.len(), 10);
    let counts: Vec<u64> = vanilla.iter().map(|v| v["masked_count"].as_u64().unwrap()).collect();
    assert!(counts.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(*counts.last().unwrap(), 0);
    assert!(had.iter().all(|v| v["config_hash"].as_str().unwrap().len() == 64 && v["seed"] == 4));
    assert_eq!(lines("hierarchical"), had);

    let file = dir.path().join("trace.jsonl");
    ok(&["decode-trace", "--ckpt", s(&ckpt), "--seed", "4", "--out", s(&file)]);
    assert_eq!(std::fs::read_to_string(&file).unwrap().lines().count(), 10);
    assert_eq!(mdpolicy(&["decode-trace", "--ckpt", s(&ckpt), "--strategy", "greedy"]).status.code(), Some(1));
}
