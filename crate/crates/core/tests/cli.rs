use std::path::Path;
use std::process::Command;

use coolant::training::{load_checkpoint, EpochRecord};

const TINY: &str = "batch_size = 16\nmax_epochs = 3\nhidden = 8\nembed = 8\nshared_hidden = 8\naligned = 6\nlatent = 3\nclassifier_hidden = 8\n";

fn coolant(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_coolant")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_corpus(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data.jsonl");
    let out = coolant(&["generate-data", "--out", p(&data), "--n", "120", "--din", "8", "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn generate_data_line_counts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for path in [&a, &b] {
        let out = coolant(&["generate-data", "--out", p(path), "--n", "100", "--din", "6", "--seed", "9"]);
        assert_eq!(out.status.code(), Some(0));
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 100);
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());

    let empty = dir.path().join("empty.jsonl");
    let out = coolant(&["generate-data", "--out", p(&empty), "--n", "0"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read(&empty).unwrap().len(), 0);
}

#[test]
fn usage_and_data_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(coolant(&[]).status.code(), Some(1));
    assert_eq!(coolant(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(coolant(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(coolant(&["--help"]).status.code(), Some(0));

    let bad_fraction = dir.path().join("x.jsonl");
    let out = coolant(&["generate-data", "--out", p(&bad_fraction), "--fake-mismatched", "0.9", "--fake-corrupted", "0.5"]);
    assert_eq!(out.status.code(), Some(1));

    let unwritable = coolant(&["generate-data", "--out", "/nonexistent/dir/x.jsonl", "--n", "4"]);
    assert_eq!(unwritable.status.code(), Some(2));

    let data = tiny_corpus(dir.path());
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "learning_rate = 0.01\nlerning_rate = 0.1\n").unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let out = coolant(&["train", "--data", p(&data), "--config", p(&cfg), "--out-checkpoint", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bad.cfg:2"), "{stderr}");
    assert!(!ckpt.exists());

    let missing = coolant(&["eval", "--data", p(&data), "--checkpoint", p(&dir.path().join("none.ckpt"))]);
    assert_eq!(missing.status.code(), Some(2));

    let garbage = dir.path().join("garbage.jsonl");
    std::fs::write(&garbage, "{\"id\":\"a\",\"label\":0,\"img\":[1.0],\"txt\":[1.0]}\n{\"id\":\"b\",\"label\":7").unwrap();
    let out = coolant(&["train", "--data", p(&garbage), "--out-checkpoint", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2:"));
}

#[test]
fn train_eval_embed_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_corpus(dir.path());
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let log = dir.path().join("log.jsonl");
    let out = coolant(&[
        "train",
        "--data",
        p(&data),
        "--config",
        p(&cfg),
        "--out-checkpoint",
        p(&ckpt),
        "--log",
        p(&log),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("Accuracy"));
    let epochs: Vec<EpochRecord> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!epochs.is_empty() && epochs.len() <= 3);
    let saved = load_checkpoint(&ckpt).unwrap();
    assert_eq!(saved.config.arch.d_in, 8);

    // The validation split reproduces the best logged accuracy.
    let report = dir.path().join("val.jsonl");
    let out = coolant(&[
        "eval",
        "--data",
        p(&data),
        "--checkpoint",
        p(&ckpt),
        "--split",
        "val",
        "--report",
        p(&report),
        "--emit-attention",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    let mut lines = text.lines();
    let metrics: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(metrics["accuracy"].as_f64().unwrap(), saved.best_val_acc);
    let best = epochs.iter().find(|e| e.epoch == saved.epoch).unwrap();
    assert_eq!(best.val_accuracy, saved.best_val_acc);
    let attention: Vec<serde_json::Value> = lines.map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(attention.len(), 20);
    for a in &attention {
        let w: Vec<f64> = a["attention"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let g = a["ambiguity"].as_f64().unwrap();
        assert!((0.5..1.0).contains(&g) || g == 1.0);
    }

    let emb = dir.path().join("emb.jsonl");
    let out = coolant(&["embed", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&emb)]);
    assert!(out.status.success());
    let first = std::fs::read_to_string(&emb).unwrap();
    assert_eq!(first.lines().count(), 120);
    for l in first.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["features"].as_array().unwrap().len(), 18);
    }
    coolant(&["embed", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&emb)]);
    assert_eq!(std::fs::read_to_string(&emb).unwrap(), first);

    let wide = dir.path().join("wide.jsonl");
    coolant(&["generate-data", "--out", p(&wide), "--n", "10", "--din", "9"]);
    let out = coolant(&["eval", "--data", p(&wide), "--checkpoint", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_prints_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_corpus(dir.path());
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY.replace("max_epochs = 3", "max_epochs = 1")).unwrap();
    let json = dir.path().join("ablate.json");
    let out = coolant(&["ablate", "--data", p(&data), "--config", p(&cfg), "--seeds", "2", "--out", p(&json)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let rows: Vec<&str> = stdout.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    for (row, name) in rows.iter().zip(["COOLANT", "w/o ITM", "w/o ITC", "w/o CMF", "w/o ATT", "w/o AGU"]) {
        assert!(row.starts_with(name), "{row}");
    }
    let parsed: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(parsed.as_array().unwrap().len(), 6);
    assert_eq!(parsed[0]["runs"].as_array().unwrap().len(), 2);
}
