use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn kgtn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kgtn"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

const TINY_RUN: &str = r#"{
  "label": "tiny",
  "dataset": { "synthetic": { "k_base": 4, "k_novel": 3, "dim": 6, "train_per_base": 10,
                              "train_per_novel": 3, "test_per_class": 4, "cluster_std": 0.8,
                              "mean_scale": 1.0, "seed": 2 } },
  "graphs": [ { "source": "oracle" }, { "source": "noisy_oracle", "noise": 0.5 } ],
  "experiment": { "k_shots": [1, 2], "top_k": [1, 3], "repeats": 2, "ensemble": "max",
                  "train": { "epochs": 3, "batch_size": 8, "lr0": 0.02, "proto_reg": 0.01 } }
}"#;

#[test]
fn build_graph_from_embeddings_and_taxonomy() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("e.tsv"), "0\t0\n1\t0\n0\t3\n5\t5\n").unwrap();
    let out = kgtn(&["build-graph", "--embeddings", "e.tsv", "--decay", "0.4", "--out", "g"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["max"], 2.0);
    assert_eq!(v["n"], 4);
    assert_eq!(v["decay"], 0.4);
    assert_eq!(v["threads"], 1);
    assert!(d.join("g/graph.kgem").exists());

    let out = kgtn(&["build-graph", "--embeddings", "e.tsv", "--no-symmetrize", "--out", "g", "--name", "raw"], d);
    assert_eq!(code(&out), 0);
    assert_eq!(json(&out)["max"], 1.0);

    fs::write(d.join("t.txt"), "root\tROOT\na\troot\nb\troot\na1\ta\na2\ta\nb1\tb\n").unwrap();
    let out = kgtn(&["build-graph", "--taxonomy", "t.txt", "--decay", "0.5", "--out", "h"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["n"], 3);
    assert_eq!(v["max"], 2.0);
}

#[test]
fn build_graph_error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("e.tsv"), "0\t0\n1\t0\n0\t3\n").unwrap();
    assert_eq!(code(&kgtn(&["build-graph", "--embeddings", "e.tsv", "--decay", "1.5"], d)), 3);
    assert_eq!(code(&kgtn(&["build-graph", "--embeddings", "missing.tsv"], d)), 2);
    assert_eq!(code(&kgtn(&["build-graph"], d)), 2);
    fs::write(d.join("t.txt"), "a\tROOT\nb\tROOT\n").unwrap();
    assert_eq!(code(&kgtn(&["build-graph", "--embeddings", "e.tsv", "--taxonomy", "t.txt"], d)), 2);
    assert_eq!(code(&kgtn(&["build-graph", "--taxonomy", "t.txt"], d)), 2);
}

#[test]
fn mantel_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let n = 9;
    let rows: Vec<String> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if i == j { 0 } else { 1 + (i * j + i + j) % 7 }.to_string())
                .collect::<Vec<_>>()
                .join("\t")
        })
        .collect();
    fs::write(d.join("m.tsv"), rows.join("\n")).unwrap();
    let first = kgtn(&["mantel", "m.tsv", "m.tsv", "--seed", "3"], d);
    assert_eq!(code(&first), 0);
    let v = json(&first);
    assert_eq!(v["r"], 1.0);
    assert_eq!(v["p"], 0.001);
    assert_eq!(v["n_permutations"], 999);
    let again = kgtn(&["mantel", "m.tsv", "m.tsv", "--seed", "3"], d);
    assert_eq!(first.stdout, again.stdout);

    let out = kgtn(&["stats", "m.tsv"], d);
    assert_eq!(code(&out), 0);
    let v = json(&out);
    assert_eq!(v["min"], 1.0);
    assert_eq!(v["max"], 7.0);
    assert_eq!(v["rows"], 9);
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = kgtn(&["gradcheck", "--preset", "kgtm"], dir.path());
    assert_eq!(code(&ok), 0);
    let v = json(&ok);
    assert_eq!(v["passed"], true);
    let tensors = v["reports"][0]["tensors"].as_array().unwrap();
    assert_eq!(tensors.len(), 9);
    assert!(tensors.iter().all(|t| t["max_rel_error"].as_f64().unwrap() <= 1e-5));

    let bad = kgtn(&["gradcheck", "--preset", "kgtm", "--tamper"], dir.path());
    assert_eq!(code(&bad), 5);
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("tensor wz") && err.contains("index"), "{err}");
}

#[test]
fn run_is_deterministic_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.json"), TINY_RUN).unwrap();
    let a = kgtn(&["run", "--config", "run.json", "--out", "a"], d);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    let b = kgtn(&["run", "--config", "run.json", "--out", "b"], d);
    assert_eq!(code(&b), 0);
    let ra = fs::read(d.join("a/eval_report.json")).unwrap();
    assert_eq!(ra, fs::read(d.join("b/eval_report.json")).unwrap());
    for f in ["eval_report.tsv", "train_log.jsonl", "run_config.json", "checkpoints/r1_k2/model.json"] {
        assert!(d.join("a").join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(d.join("a/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2 * 2 * 3);
    let report = json(&a);
    assert_eq!(report["repeats"], 2);
    assert_eq!(report["seeds"], serde_json::json!([0, 1]));
    assert_eq!(report["entries"].as_array().unwrap().len(), 2 * 2 * 2);

    let c = kgtn(&["run", "--config", "run.json", "--out", "c", "--seed", "7"], d);
    assert_eq!(json(&c)["seeds"], serde_json::json!([7, 8]));
}

#[test]
fn run_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.json"), TINY_RUN).unwrap();
    assert_eq!(code(&kgtn(&["run", "--config", "run.json", "--ensemble", "none"], d)), 3);
    assert_eq!(code(&kgtn(&["run", "--config", "run.json", "--epochs", "1", "--batch-size", "3"], d)), 3);
    fs::write(d.join("broken.json"), "{ \"graphs\": 3 }").unwrap();
    assert_eq!(code(&kgtn(&["run", "--config", "broken.json"], d)), 3);
    assert_eq!(code(&kgtn(&["run", "--config", "nowhere.json"], d)), 2);
    assert_eq!(code(&kgtn(&["run", "--config", "run.json", "--threads", "0"], d)), 3);
}

#[test]
fn synth_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let synth = kgtn(
        &["synth", "--k-base", "4", "--k-novel", "3", "--dim", "6", "--train-per-base", "8", "--out", "data"],
        d,
    );
    assert_eq!(code(&synth), 0, "{}", String::from_utf8_lossy(&synth.stderr));
    let v = json(&synth);
    assert_eq!(v["spec"]["k_base"], 4);
    let graph = "data/dataset.oracle_graph.kgem";

    let common = ["--dataset", "data/dataset.json", "--epochs", "2", "--batch-size", "8", "--lr", "0.02"];
    let mut args = vec!["train", "--graphs", graph, "--ensemble", "none", "--out", "single"];
    args.extend(common);
    let out = kgtn(&args, d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["epochs"], 2);

    let two = format!("{graph},{graph}");
    let mut args = vec!["train", "--graphs", &two, "--ensemble", "max", "--out", "pair"];
    args.extend(common);
    let out = kgtn(&args, d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: Value = serde_json::from_slice(&fs::read(d.join("pair/model/model.json")).unwrap()).unwrap();
    assert_eq!(manifest["modules"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["ensemble"], "max");

    let mut args = vec!["train", "--graphs", &two, "--ensemble", "none"];
    args.extend(common);
    assert_eq!(code(&kgtn(&args, d)), 3);

    let out = kgtn(&["eval", "--model", "single/model", "--dataset", "data/dataset.json", "--out", "single"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    let acc = v["entries"][0]["mean"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&acc));
    assert!(d.join("single/eval_report.tsv").exists());

    let mut args = vec!["train", "--graphs", graph, "--stage1", "--out", "s1"];
    args.extend(common);
    let out = kgtn(&args, d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("s1/stage1_head/weight.kgem").exists());
}
