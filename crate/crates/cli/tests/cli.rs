use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use evfilter_client::{LabelingClient, SubmittedLabel};
use evfilter_core::community::Partition;
use evfilter_core::dataset::{load_embeddings, load_manifest, LabelValue};
use evfilter_core::graph::SimilarityGraph;
use evfilter_core::neural::load_model;
use evfilter_core::pipeline::read_predictions;
use evfilter_core::selection::read_selection;
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_evfilter");
const FAST: [&str; 6] = ["--epochs", "60", "--hidden", "64", "--lr", "1e-3"];

fn evfilter(data: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("EVFILTER_DATA_DIR", data)
        .env_remove("EVFILTER_SERVICE_URL")
        .output()
        .expect("binary runs")
}

/// Runs a subcommand that must succeed and returns its summary line.
fn ok(data: &Path, args: &[&str]) -> Value {
    let out = evfilter(data, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 1, "one summary line, got {stdout:?}");
    serde_json::from_str(lines[0]).unwrap()
}

fn synth(n: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap().to_string();
    let v = ok(dir.path(), &["synth", "--n", &n.to_string(), "--dim", "16", "--seed", "7", "--out", &d]);
    assert_eq!(v["command"], "synth");
    dir
}

#[test]
fn synth_writes_loadable_inputs() {
    let dir = synth(200);
    let records = load_manifest(dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(records.len(), 200);
    assert_eq!(records.iter().filter(|r| r.label_tweet == LabelValue::Relevant).count(), 52);
    for f in ["text.evb", "image.evb"] {
        let m = load_embeddings(dir.path().join(f)).unwrap();
        assert_eq!((m.len(), m.dim()), (200, 16));
    }
}

#[test]
fn usage_and_data_errors() {
    let dir = synth(100);
    let out = evfilter(dir.path(), &["select", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let out = evfilter(dir.path(), &["select", "--method", "closeness"]);
    assert_eq!(out.status.code(), Some(1));
    let out = evfilter(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(evfilter(dir.path(), &["--help"]).status.code(), Some(0));

    ok(dir.path(), &["fuse"]);
    ok(dir.path(), &["graph"]);
    let out = evfilter(dir.path(), &["select", "--method", "betweenness", "--budget", "60"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("partition.txt") && err.contains("evfilter cluster"), "{err}");
    assert!(out.stdout.is_empty());

    let out = evfilter(dir.path(), &["predict", "--model", "mlpc"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.evm"));
}

#[test]
fn staged_artifacts_reload() {
    let dir = synth(240);
    let d = dir.path();
    ok(d, &["fuse", "--fusion", "add"]);
    let g = ok(d, &["graph", "--epsilon", "0.85"]);
    let graph = SimilarityGraph::read(d.join("selection_graph.txt")).unwrap();
    assert_eq!(graph.n() as u64, g["nodes"].as_u64().unwrap());
    ok(d, &["graph", "--kind", "knn", "--k", "8"]);
    assert_eq!(SimilarityGraph::read(d.join("knn_graph.txt")).unwrap().n(), 240);
    let c = ok(d, &["cluster", "--seed", "3"]);
    let p = Partition::read(d.join("partition.txt")).unwrap();
    assert_eq!(p.n_communities() as u64, c["communities"].as_u64().unwrap());
    ok(d, &["rank", "--method", "pagerank"]);
    let s = ok(d, &["select", "--method", "mci", "--budget", "24", "--seed", "3"]);
    assert_eq!(s["selected"], 24);
    assert_eq!(read_selection(d.join("selection.csv")).unwrap().len(), 24);
    let mut train = vec!["train", "--model", "nsage_lin", "--seed", "3"];
    train.extend(FAST);
    let t = ok(d, &train);
    let model = load_model(d.join("model.evm")).unwrap();
    assert_eq!(model.best_epoch as u64, t["best_epoch"].as_u64().unwrap());
    let p = ok(d, &["predict", "--model", "nsage_lin"]);
    let preds = read_predictions(&d.join("predictions.csv")).unwrap();
    assert_eq!(preds.len(), 240);
    let relevant = preds.iter().filter(|(_, l)| *l == LabelValue::Relevant).count();
    assert_eq!(relevant as u64, p["predicted_relevant"].as_u64().unwrap());
    let e = ok(d, &["evaluate"]);
    assert_eq!(e["balanced_accuracy"], p["balanced_accuracy"]);
    let out = evfilter(d, &["predict", "--model", "mlpc"]);
    assert_eq!(out.status.code(), Some(2), "model kind mismatch is a data error");
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn pipeline_is_reproducible() {
    let dir = synth(300);
    let d = dir.path();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = d.join(name);
        let args = [
            "pipeline", "--budget", "30", "--model", "mlpc", "--seed", "5", "--epochs", "100", "--hidden", "32",
            "--lr", "1e-2", "--out", out.to_str().unwrap(),
        ];
        let v = ok(d, &args);
        assert!(v["balanced_accuracy"].as_f64().unwrap() > 0.5, "{v}");
        runs.push((v, read_all(&out)));
    }
    assert_eq!(runs[0], runs[1]);
    let names: Vec<&str> = runs[0].1.iter().map(|(n, _)| n.as_str()).collect();
    for expected in ["fused.evb", "metrics.json", "partition.txt", "predictions.csv", "relevant_ids.txt", "selection.csv", "selection_graph.txt"] {
        assert!(names.contains(&expected), "{expected} missing from {names:?}");
    }
}

#[test]
fn experiment_writes_configured_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(
        &cfg,
        r#"
fusions = ["text_only"]
models = ["mlpc", "lgc"]
selections = ["random", "betweenness"]
budgets = [20]
repeats = 2
include_full_reference = false
report = "out/report.csv"
aggregate = "out/aggregate.csv"

[data.synthetic]
n = 150
dim = 8

[pipeline.train]
epochs = 40
mlpc_hidden = [16]
"#,
    )
    .unwrap();
    std::fs::create_dir(dir.path().join("out")).unwrap();
    let v = ok(dir.path(), &["experiment", "--config", cfg.to_str().unwrap()]);
    assert_eq!(v["cells"], 8);
    let report = std::fs::read_to_string(dir.path().join("out/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 9);
    let aggregate = std::fs::read_to_string(dir.path().join("out/aggregate.csv")).unwrap();
    assert_eq!(aggregate.lines().count(), 5);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "budgets = [60, 30]\n").unwrap();
    assert_eq!(evfilter(dir.path(), &["experiment", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

struct Killed(Child);

impl Drop for Killed {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

/// Waits for the service to answer.
async fn connect(url: &str) -> LabelingClient {
    let client = LabelingClient::new(url).unwrap();
    let start = Instant::now();
    while client.status().await.is_err() {
        assert!(start.elapsed() < Duration::from_secs(60), "service did not come up");
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    client
}

fn truth(data: &Path) -> std::collections::HashMap<String, LabelValue> {
    load_manifest(data.join("manifest.jsonl"))
        .unwrap()
        .into_iter()
        .map(|r| (r.id, r.label_tweet))
        .collect()
}

fn as_submitted(l: LabelValue) -> SubmittedLabel {
    if l == LabelValue::Relevant {
        SubmittedLabel::Relevant
    } else {
        SubmittedLabel::Irrelevant
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn interactive_pipeline_waits_for_labels() {
    let dir = synth(200);
    let d = dir.path().to_path_buf();
    let port = free_port();
    let addr = format!("127.0.0.1:{port}");
    let mut args = vec!["pipeline", "--labels", "interactive", "--budget", "12", "--model", "mlpc", "--addr", &addr];
    args.extend(FAST);
    let child = Command::new(BIN)
        .args(&args)
        .env("EVFILTER_DATA_DIR", &d)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut child = Killed(child);
    let client = connect(&format!("http://{addr}/")).await;
    let truth = truth(&d);
    let tasks = client.queue(100).await.unwrap();
    assert_eq!(tasks.len(), 12);
    for t in &tasks {
        client.submit(&t.id, as_submitted(truth[&t.id])).await.unwrap();
    }
    let stdout = child.0.stdout.take().unwrap();
    let line = tokio::task::spawn_blocking(move || {
        let mut line = String::new();
        BufReader::new(stdout).read_line(&mut line).unwrap();
        line
    })
    .await
    .unwrap();
    let v: Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["command"], "pipeline");
    assert_eq!(
        v["predicted_relevant"].as_u64().unwrap() + v["predicted_irrelevant"].as_u64().unwrap(),
        200
    );
    assert!(v["balanced_accuracy"].is_number());
    assert!(child.0.wait().unwrap().success());
    assert!(d.join("labels.json").exists());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn remote_subcommands_drive_a_served_selection() {
    let dir = synth(200);
    let d = dir.path().to_path_buf();
    ok(&d, &["fuse"]);
    ok(&d, &["graph"]);
    ok(&d, &["cluster"]);
    ok(&d, &["select", "--budget", "6"]);
    let port = free_port();
    let addr = format!("127.0.0.1:{port}");
    let url = format!("http://{addr}/");
    let child = Command::new(BIN)
        .args(["serve", "--addr", &addr, "--model", "lgc"])
        .env("EVFILTER_DATA_DIR", &d)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let _child = Killed(child);
    connect(&url).await;

    let run = |args: Vec<String>| {
        let d = d.clone();
        let url = url.clone();
        tokio::task::spawn_blocking(move || {
            let mut full = args;
            full.extend(["--url".to_string(), url]);
            let refs: Vec<&str> = full.iter().map(String::as_str).collect();
            evfilter(&d, &refs)
        })
    };
    let out = run(vec!["queue".into(), "--limit".into(), "10".into()]).await.unwrap();
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let tasks = v["tasks"].as_array().unwrap().clone();
    assert_eq!(tasks.len(), 6);
    let truth = truth(&d);
    for t in &tasks {
        let id = t["id"].as_str().unwrap().to_string();
        let label = as_submitted(truth[&id]).as_str().to_string();
        let out = run(vec!["label".into(), "--id".into(), id, "--label".into(), label]).await.unwrap();
        assert!(out.status.success());
    }
    let out = run(vec!["label".into(), "--id".into(), "nope".into(), "--label".into(), "relevant".into()])
        .await
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = run(vec!["status".into()]).await.unwrap();
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!((v["remaining"].as_u64(), v["labeled"].as_u64()), (Some(0), Some(6)));
    let out = run(vec!["propagate".into()]).await.unwrap();
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(
        v["predicted_relevant"].as_u64().unwrap() + v["predicted_irrelevant"].as_u64().unwrap(),
        200
    );
    assert!(d.join("predictions.csv").exists());
}
