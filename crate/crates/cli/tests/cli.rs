use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn hier(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_hier"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn hier");
    assert!(
        out.status.success(),
        "hier {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json_lines(text: &[u8]) -> Vec<Value> {
    std::str::from_utf8(text)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn generate(dir: &Path) {
    let common = ["--classes", "3", "--d", "8", "--tokens", "6"];
    let mut a = vec!["generate", "--out", "train.hse", "--per-class", "4"];
    a.extend(common);
    hier(dir, &a);
    let mut a = vec!["generate", "--out", "test.hse", "--split", "test", "--per-class", "2"];
    a.extend(common);
    hier(dir, &a);
}

#[test]
fn cluster_then_relations() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d);
    hier(d, &["cluster", "--input", "train.hse", "--k", "4", "--out", "c.jsonl"]);
    let concepts = json_lines(&std::fs::read(d.join("c.jsonl")).unwrap());
    assert_eq!(concepts.len(), 12);
    let first = &concepts[0];
    assert_eq!(first["centroids"].as_array().unwrap().len(), 4);
    let mass: f64 = first["soft_mass"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((mass - 6.0).abs() < 1e-9, "{mass}");

    hier(
        d,
        &["relations", "--concepts", "c.jsonl", "--ratio", "0.5", "--mode", "paper-verbatim", "--out", "r.jsonl"],
    );
    let rels = json_lines(&std::fs::read(d.join("r.jsonl")).unwrap());
    assert_eq!(rels.len(), 12);
    // 4 concepts give 6 pairs, half retained
    assert_eq!(rels[0]["relations"].as_array().unwrap().len(), 3);
}

#[test]
fn train_eval_reason() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d);
    std::fs::write(
        d.join("cfg.toml"),
        "d = 8\nk = 3\nl = 2\nepochs = 2\n[data]\nsource = \"hse\"\ntrain_path = \"train.hse\"\ntest_path = \"test.hse\"\n",
    )
    .unwrap();
    let out = hier(d, &["train", "--config", "cfg.toml", "--out", "m.hck", "--history", "h.jsonl"]);
    let lines = json_lines(&out.stdout);
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["epoch"], 1);
    assert_eq!(json_lines(&std::fs::read(d.join("h.jsonl")).unwrap()).len(), 2);

    let eval = hier(d, &["eval", "--checkpoint", "m.hck", "--input", "test.hse"]);
    let m = &json_lines(&eval.stdout)[0];
    assert_eq!(m["metrics"]["acc"], lines[2]["test"]["acc"]);

    for ablate in ["none", "concept", "relation", "cot", "evolution"] {
        let r = hier(d, &["reason", "--model", "m.hck", "--input", "test.hse", "--ablate", ablate]);
        let preds = json_lines(&r.stdout);
        assert_eq!(preds.len(), 6);
        let p = &preds[0];
        assert!(p["predicted"].as_u64().unwrap() < 3);
        if ablate == "evolution" {
            assert!(p["concept_scores"].as_array().unwrap().iter().all(|s| s == 1.0));
        }
    }
}

#[test]
fn rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.hse"), b"not an hse file").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_hier"))
        .current_dir(dir.path())
        .args(["cluster", "--input", "bad.hse", "--k", "2", "--out", "c.jsonl"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
