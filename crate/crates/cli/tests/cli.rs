use std::path::Path;
use std::process::{Command, Output};

fn gatelora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gatelora"))
        .args(args)
        .output()
        .expect("spawn gatelora")
}

fn ok(args: &[&str]) -> String {
    let out = gatelora(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(path: &Path, body: &str) {
    std::fs::write(path, body).unwrap();
}

#[test]
fn gen_data_is_reproducible_and_snapshots_config() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen-data", "--seed", "7", "--per-aspect", "30", "--out", s(d)]);
    }
    for f in ["train.jsonl", "test.jsonl", "manifest.json", "spec.json", "config.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let snap: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(snap["resolved"]["seed"], 7);
}

#[test]
fn truncate_flag_caps_counts() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--per-aspect", "20", "--truncate", "sent,keyword,multi:5", "--out", s(dir.path())]);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    let counts: Vec<u64> = m["train_counts"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(counts, vec![5, 20, 5, 20, 5, 20]);
}

#[test]
fn missing_config_exits_2_naming_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = gatelora(&["gen-data", "--config", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));
}

#[test]
fn bad_spec_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    let mut spec = gatelora::TaskSpec::default();
    spec.banned.push(spec.keywords[0].clone());
    let body = serde_json::json!({"seed": 1, "train_per_aspect": [5, 5, 5, 5, 5, 5], "test_fraction": 0.2, "spec": spec});
    write(&cfg, &body.to_string());
    let out = gatelora(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn echo_oracle_scores_100() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--per-aspect", "40", "--out", s(&data)]);
    let text = ok(&["eval", "--data", s(&data), "--oracle", "echo", "--out", s(&dir.path().join("eval"))]);
    let row = text.lines().nth(1).unwrap();
    let values: Vec<&str> = row.split_whitespace().skip(1).collect();
    assert_eq!(values, vec!["100.0"; 7]);
    assert!(dir.path().join("eval/records.jsonl").exists());
    assert!(dir.path().join("eval/config.json").exists());
}

#[test]
fn pretrain_train_eval_export_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    ok(&["gen-data", "--per-aspect", "12", "--seed", "3", "--out", s(&p("data"))]);
    write(
        &p("pre.json"),
        r#"{"model": {"vocab_size": 0, "d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "max_seq_len": 48},
            "epochs": 1, "toxic_samples": 5}"#,
    );
    ok(&["pretrain", "--data", s(&p("data")), "--config", s(&p("pre.json")), "--out", s(&p("base"))]);
    write(
        &p("train.json"),
        r#"{"mode": "gated", "n_loras": 3, "rank": 2, "alpha": 4.0, "epochs": 1, "batch_size": 16, "lr": 0.003}"#,
    );
    ok(&[
        "train",
        "--data",
        s(&p("data")),
        "--base",
        s(&p("base/base.ckpt")),
        "--config",
        s(&p("train.json")),
        "--out",
        s(&p("run")),
    ]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(p("run/report.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 1);
    write(&p("sampling.json"), r#"{"top_p": 0.7, "temperature": 0.95, "max_new_tokens": 6, "stop_token": 2}"#);
    ok(&[
        "eval",
        "--data",
        s(&p("data")),
        "--checkpoint",
        s(&p("run/model.ckpt")),
        "--sampling",
        s(&p("sampling.json")),
        "--out",
        s(&p("eval")),
    ]);

    ok(&["export", "--checkpoint", s(&p("run/model.ckpt")), "--what", "gate-table", "--out", s(&p("gate"))]);
    let csv = std::fs::read_to_string(p("gate/gate_table.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 6);
    for l in &lines {
        assert_eq!(l.split(',').count(), 1 + 3);
    }

    ok(&[
        "export",
        "--checkpoint",
        s(&p("run/model.ckpt")),
        "--what",
        "hidden-states",
        "--data",
        s(&p("data")),
        "--out",
        s(&p("hidden")),
    ]);
    let csv = std::fs::read_to_string(p("hidden/hidden_states.csv")).unwrap();
    assert!(csv.starts_with("aspect_id,attribute,h_0,"));
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 2 + 16);

    // base checkpoint has no gate
    let out = gatelora(&["export", "--checkpoint", s(&p("base/base.ckpt")), "--what", "gate-table", "--out", s(&p("g2"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupted_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    ok(&["gen-data", "--per-aspect", "6", "--out", s(&p("data"))]);
    write(
        &p("pre.json"),
        r#"{"model": {"vocab_size": 0, "d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 16, "max_seq_len": 48},
            "epochs": 1, "toxic_samples": 0}"#,
    );
    ok(&["pretrain", "--data", s(&p("data")), "--config", s(&p("pre.json")), "--out", s(&p("base"))]);
    let mut bytes = std::fs::read(p("base/base.ckpt")).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(p("bad.ckpt"), bytes).unwrap();
    let out = gatelora(&["eval", "--data", s(&p("data")), "--checkpoint", s(&p("bad.ckpt")), "--out", s(&p("e"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    ok(&["gen-data", "--per-aspect", "6", "--out", s(&p("data"))]);
    write(
        &p("pre.json"),
        r#"{"model": {"vocab_size": 0, "d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 16, "max_seq_len": 48},
            "epochs": 2, "lr": 1e300, "grad_clip": 1e300, "toxic_samples": 0}"#,
    );
    let out = gatelora(&["pretrain", "--data", s(&p("data")), "--config", s(&p("pre.json")), "--out", s(&p("base"))]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn loss_ablation_table_has_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("spec.json");
    write(
        &cfg,
        r#"{"name": "loss-ablation", "seeds": [1],
            "overrides": {"epochs": 1, "n_loras": 2, "rank": 2, "alpha": 4.0, "gate_dim": 8},
            "scale": {"train_per_aspect": 24, "test_fraction": 0.25, "truncate_count": 8,
                      "pretrain": {"model": {"vocab_size": 0, "d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "max_seq_len": 48},
                                   "epochs": 1, "toxic_samples": 5},
                      "sampling": {"top_p": 0.7, "temperature": 0.95, "max_new_tokens": 8, "stop_token": 2}}}"#,
    );
    let out_dir = dir.path().join("out");
    ok(&["experiment", "--name", "loss-ablation", "--config", s(&cfg), "--out", s(&out_dir)]);
    let report = std::fs::read_to_string(out_dir.join("loss-ablation/report.txt")).unwrap();
    let table: Vec<&str> = report
        .lines()
        .skip_while(|l| !l.starts_with("mean over seeds"))
        .skip(1)
        .take_while(|l| !l.is_empty())
        .collect();
    assert!(table[0].contains("Average") && table[0].contains("Detox."));
    assert_eq!(table.len(), 1 + 4);
    for (row, label) in table[1..].iter().zip(["w/o L_ada and L_awa", "w/o L_awa", "w/o L_ada", "Ours"]) {
        assert!(row.starts_with(label), "{row}");
    }
    assert!(out_dir.join("loss-ablation/result.json").exists());
    assert!(out_dir.join("loss-ablation/config.json").exists());
}

#[test]
fn unknown_experiment_is_rejected() {
    let out = gatelora(&["experiment", "--name", "table-9", "--out", "/tmp/unused"]);
    assert_eq!(out.status.code(), Some(2));
}
