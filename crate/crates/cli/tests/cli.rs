use std::path::Path;
use std::process::{Command, Output};

use streamner::stream::StreamEvent;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_streamner"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

const TINY: &str = r#"
workdir = "work"

[experiment]
split_seed = 1

[experiment.model]
n_layers = 2
n_heads = 2
d_model = 16
d_ff = 32
max_context = 128

[experiment.lm]
steps = 4
batch_size = 4
seq_len = 32

[experiment.synth]
n_docs = 60

[experiment.typing]
n_neurons = 8
lr = 0.001
batch_size = 64
epochs = 3
warmup_epochs = 1
weight_decay = 0.01
seed = 0

[experiment.span]
n_neurons = 8
lr = 0.001
batch_size = 64
epochs = 2
warmup_epochs = 1
weight_decay = 0.01
seed = 0

[experiment.adjacency]
n_neurons = 8
lr = 0.001
batch_size = 64
epochs = 2
warmup_epochs = 1
weight_decay = 0.01
seed = 0

[experiment.pipeline]
layer = 1

[grid]
neurons = [8]
lrs = [0.001, 0.0005]
batches = [32]

[bench]
lengths = [8, 16]
reps = 2
warmups = 1
steps = 2
"#;

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = run(dir.path(), &["stream", "--prompt", "x", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(dir.path(), &["nonsense"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("serve"));
}

#[test]
fn runtime_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["stream", "--prompt", "Paris"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(dir.path(), &["--config", "missing.toml", "sweep"]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(dir.path().join("bad.toml"), "unknown_key = 1\n").unwrap();
    let out = run(dir.path(), &["--config", "bad.toml", "sweep"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(dir.path(), &["serve", "--model-dir", "nowhere"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_stream_eval_and_bench_from_one_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    let cfg = ["--config", "tiny.toml"];
    let with = |rest: &[&str]| -> Output {
        let mut a = cfg.to_vec();
        a.extend_from_slice(rest);
        run(d, &a)
    };

    let out = with(&["datagen"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "manifest.json"] {
        assert!(d.join("work/data").join(f).exists(), "{f}");
    }

    let out = with(&["train", "--task", "typing", "--layer", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("work/probes/typing_l2.bin").exists());
    let metrics = std::fs::read_to_string(d.join("work/reports/typing_l2_metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "epoch,train_loss,dev_metric");
    assert_eq!(metrics.lines().count(), 1 + 3);
    assert!(d.join("work/model/model.bin").exists());

    let out = with(&["train", "--task", "typing", "--layer", "9"]);
    assert_eq!(out.status.code(), Some(2));

    let out = with(&["train", "--task", "span", "--grid"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let grid = std::fs::read_to_string(d.join("work/reports/span_grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 2);

    let out = with(&["train"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("work/probes/probes.json").exists());

    let out = with(&["stream", "--prompt", "Paul Atreides is", "--max-new", "8"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let events: Vec<StreamEvent> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).expect("one JSON event per line"))
        .collect();
    assert_eq!(events.len(), 3 + 8);
    assert_eq!(events[0].token.text, "Paul");
    assert!(events.iter().enumerate().all(|(k, e)| e.step == k));

    let out = with(&["stream", "--prompt", "Paris", "--strategy", "tokenwise", "--span-threshold", "2"]);
    assert_eq!(out.status.code(), Some(2));

    let out = with(&["eval"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("spanwise_propagation"));
    assert!(d.join("work/reports/eval.json").exists());

    let out = with(&["sweep"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let sweep = std::fs::read_to_string(d.join("work/reports/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 3);

    let out = with(&["bench", "--lengths", "8,16"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(d.join("work/reports/bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    let out = with(&["bench", "--lengths", "16,8"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn json_config_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.json"),
        r#"{"workdir": "w", "experiment": {"synth": {"n_docs": 30}}}"#,
    )
    .unwrap();
    let out = run(dir.path(), &["--config", "c.json", "datagen", "--n-docs", "40"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("w/data/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["synth"]["n_docs"], 40);
}
