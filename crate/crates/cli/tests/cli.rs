use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn slotfill(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slotfill"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

/// Toy corpus plus a short training config in a fresh directory.
fn toy_workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let out = slotfill(dir.path(), &["synth", "--preset", "toy", "--out", "toy"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    fs::write(
        dir.path().join("exp.toml"),
        r#"
[paths]
dataset = "toy/data.jsonl"
schemas = "toy/schemas.json"
embeddings = "toy/embeddings.txt"
output_dir = "run"

[train]
total_steps = 12
batch_size = 4
checkpoint_every = 6
log_every = 3
"#,
    )
    .unwrap();
    dir
}

#[test]
fn malformed_input_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.jsonl"),
        "{\"intent\":\"a\",\"tokens\":[\"x\"],\"slots\":[]}\n{\"intent\": oops\n",
    )
    .unwrap();
    let out = slotfill(
        dir.path(),
        &["convert", "--input", "bad.jsonl", "--output", "o.jsonl"],
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.jsonl:2"), "{err}");
}

#[test]
fn span_past_end_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.jsonl"),
        "{\"intent\":\"a\",\"tokens\":[\"x\"],\"slots\":[{\"name\":\"s\",\"start\":0,\"end\":3}]}\n",
    )
    .unwrap();
    let out = slotfill(
        dir.path(),
        &["convert", "--input", "bad.jsonl", "--output", "o.jsonl"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn convert_round_trips_native() {
    let dir = toy_workspace();
    let out = slotfill(
        dir.path(),
        &[
            "convert",
            "--input",
            "toy/data.jsonl",
            "--output",
            "copy.jsonl",
            "--schemas-out",
            "s.json",
        ],
    );
    assert!(out.status.success());
    assert_eq!(
        fs::read_to_string(dir.path().join("toy/data.jsonl")).unwrap(),
        fs::read_to_string(dir.path().join("copy.jsonl")).unwrap()
    );
    assert!(dir.path().join("s.json").exists());
}

#[test]
fn unknown_config_key_is_an_input_error() {
    let dir = toy_workspace();
    let out = slotfill(
        dir.path(),
        &["train", "--config", "exp.toml", "--train.totl_steps=3"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("totl_steps"));
}

#[test]
fn train_resume_eval_predict() {
    let dir = toy_workspace();
    let d = dir.path();
    let summary = stdout_json(&slotfill(d, &["train", "--config", "exp.toml"]));
    assert!(summary["final_loss"].as_f64().unwrap().is_finite());
    for f in [
        "model.ckpt",
        "optimizer.ckpt",
        "metrics.jsonl",
        "config.json",
    ] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("run/config.json")).unwrap()).unwrap();
    assert_eq!(resolved["config"]["train"]["total_steps"], 12);
    assert!(resolved["version"].is_string());
    assert_eq!(
        fs::read_to_string(d.join("run/metrics.jsonl"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    stdout_json(&slotfill(
        d,
        &[
            "train",
            "--config",
            "exp.toml",
            "--resume",
            "--train.total_steps=18",
        ],
    ));
    let metrics = fs::read_to_string(d.join("run/metrics.jsonl")).unwrap();
    let steps: Vec<u64> = metrics
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["step"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(steps, [3, 6, 9, 12, 15, 18]);

    let report = stdout_json(&slotfill(
        d,
        &[
            "eval",
            "--checkpoint",
            "run/model.ckpt",
            "--dataset",
            "toy/data.jsonl",
            "--schemas",
            "toy/schemas.json",
            "-k",
            "2",
            "--output",
            "eval.json",
        ],
    ));
    let f1 = report["micro_f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    assert!(d.join("eval.json").exists());

    // Example-conditioned checkpoint with no examples.
    let out = slotfill(
        d,
        &[
            "eval",
            "--checkpoint",
            "run/model.ckpt",
            "--dataset",
            "toy/data.jsonl",
            "-k",
            "0",
        ],
    );
    assert!(!out.status.success());

    let pred = stdout_json(&slotfill(
        d,
        &[
            "predict",
            "--checkpoint",
            "run/model.ckpt",
            "--text",
            "book kati to mahe",
            "--slot",
            "to_city",
            "--description",
            "destination city",
            "--example",
            "lihiso",
            "--example",
            "nupo",
        ],
    ));
    assert_eq!(pred["tokens"].as_array().unwrap().len(), 4);
    for span in pred["spans"].as_array().unwrap() {
        assert_eq!(span["slot"], "to_city");
        assert!(span["start"].as_u64().unwrap() < span["end"].as_u64().unwrap());
    }

    let out = slotfill(
        d,
        &[
            "predict",
            "--checkpoint",
            "run/model.ckpt",
            "--text",
            "book kati",
            "--slot",
            "to_city",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn description_only_checkpoint_needs_no_examples() {
    let dir = toy_workspace();
    let d = dir.path();
    stdout_json(&slotfill(
        d,
        &[
            "train",
            "--config",
            "exp.toml",
            "--model.use_examples=false",
            "--train.total_steps=4",
        ],
    ));
    let report = stdout_json(&slotfill(
        d,
        &[
            "eval",
            "--checkpoint",
            "run/model.ckpt",
            "--dataset",
            "toy/data.jsonl",
            "-k",
            "0",
        ],
    ));
    assert_eq!(report["partial"], false);
}

#[test]
fn f1_command_scores_frames() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("gold.jsonl"),
        "{\"intent\":\"a\",\"tokens\":[\"x\",\"y\",\"z\"],\"slots\":[{\"name\":\"s\",\"start\":0,\"end\":1},{\"name\":\"t\",\"start\":2,\"end\":3}]}\n",
    )
    .unwrap();
    fs::write(
        d.join("pred.jsonl"),
        "{\"intent\":\"a\",\"tokens\":[\"x\",\"y\",\"z\"],\"slots\":[{\"name\":\"s\",\"start\":0,\"end\":1},{\"name\":\"t\",\"start\":1,\"end\":3}]}\n",
    )
    .unwrap();
    let report = stdout_json(&slotfill(
        d,
        &["f1", "--gold", "gold.jsonl", "--pred", "pred.jsonl"],
    ));
    assert_eq!(report["micro_f1"], 0.5);
    assert_eq!(report["tp"], 1);
    assert_eq!(report["fp"], 1);
    assert_eq!(report["fn"], 1);
}

#[test]
fn sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(slotfill(
        d,
        &[
            "synth",
            "--preset",
            "transfer",
            "--frames-per-intent",
            "20",
            "--out",
            "tr"
        ]
    )
    .status
    .success());
    fs::write(
        d.join("sweep.toml"),
        r#"
[paths]
dataset = "tr/data.jsonl"
schemas = "tr/schemas.json"
embeddings = "tr/embeddings.txt"
output_dir = "sw"

[train]
total_steps = 3
batch_size = 2

[protocol]
targets = ["find_route"]
k = [1, 2]
folds = 1
"#,
    )
    .unwrap();
    let out = slotfill(d, &["sweep", "--config", "sweep.toml", "--output", "k.csv"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(d.join("k.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "intent,n_target,k,f1,folds");
    assert_eq!(lines.len(), 4);
    for f in ["report.json", "table.txt", "config.json"] {
        assert!(d.join("sw").join(f).exists());
    }
}
