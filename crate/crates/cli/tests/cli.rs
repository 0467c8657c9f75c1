use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_celldefect")).args(args).output().expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn stats_and_check_on_the_reference() {
    let out = cli(&["arch", "stats", "reference"]);
    assert!(out.status.success());
    let v = json(&out);
    assert_eq!(v["params"], 385_434);
    assert_eq!(v["macs"], 108_839_392);

    let out = cli(&["arch", "stats", "reference", "--input", "1x1x150x150"]);
    assert!(v["macs"].as_u64().unwrap() > 3 * json(&out)["macs"].as_u64().unwrap());

    assert_eq!(cli(&["arch", "check", "reference"]).status.code(), Some(0));
    let out = cli(&["arch", "check", "reference", "--flops-center", "300e6", "--flops-tol", "0.1"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&out)["violations"][0]["id"], "flops-budget");
    assert_eq!(cli(&["arch", "validate", "no/such/spec.json"]).status.code(), Some(1));
}

#[test]
fn report_from_rows_file() {
    let dir = tempfile::tempdir().unwrap();
    let rows = dir.path().join("rows.json");
    std::fs::write(
        &rows,
        r#"[{"name":"big","params":140000000,"macs":34570000000,"runtime_s":10.893},
            {"name":"small","params":410000,"macs":115000000,"runtime_s":0.347}]"#,
    )
    .unwrap();
    let out = cli(&["report", "--rows", path(&rows), "--baseline", "0"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("341.46×") && text.contains("~300×") && text.contains("31.39× faster"), "{text}");
}

#[test]
fn synth_train_eval_predict_bench() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = cli(&["synth-data", "--count", "8", "--seed", "3", "--out", path(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = data.join("manifest.csv");
    let weights = dir.path().join("w.bin");
    let log = dir.path().join("log.jsonl");
    let out = cli(&[
        "train", "reference", "--manifest", path(&manifest), "--ratio", "0.5", "--phase1-epochs", "2",
        "--phase2-epochs", "0", "--out", path(&weights), "--log", path(&log),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["train"]["samples"], 4);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 2);

    let out = cli(&["eval", "reference", path(&weights), "--manifest", path(&manifest), "--split", "test", "--ratio", "0.5"]);
    assert!(out.status.success());
    assert_eq!(json(&out)["samples"], 4);

    let out = cli(&["predict", "reference", path(&weights), path(&data.join("cell_00000.png"))]);
    let class = json(&out)["class"].as_str().unwrap().to_owned();
    assert_eq!(out.status.code(), Some(if class == "defective" { 2 } else { 0 }), "{class}");

    let out = cli(&["bench", "reference", path(&weights), "--runs", "3", "--warmup", "1"]);
    assert!(out.status.success());
    assert_eq!(json(&out)["latencies_ms"].as_array().unwrap().len(), 3);
    assert_eq!(cli(&["bench", "reference", "--runs", "1"]).status.code(), Some(1));
}

#[test]
fn explore_writes_best_spec_and_history() {
    let dir = tempfile::tempdir().unwrap();
    let best = dir.path().join("best.json");
    let history = dir.path().join("history.jsonl");
    let out = cli(&[
        "explore", "--generations", "2", "--population", "2", "--proxy-samples", "8", "--proxy-epochs", "1",
        "--seed", "4", "--out", path(&best), "--history", path(&history),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(&history).unwrap().lines().count(), 3);
    let check = cli(&["arch", "check", path(&best)]);
    assert_eq!(check.status.code(), Some(0), "{}", String::from_utf8_lossy(&check.stdout));
}
