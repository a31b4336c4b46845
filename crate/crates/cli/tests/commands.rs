use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use omake_core::corpus::SyntheticCorpusConfig;
use omake_core::harness::{CorpusSource, RunConfig};

fn omake(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_omake"));
    cmd.args(args).env_remove("OMAKE_SEED");
    if let Some(s) = seed {
        cmd.env("OMAKE_SEED", s);
    }
    cmd.output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let synth = SyntheticCorpusConfig { samples_per_leaf: 10, seed: 3, ..Default::default() };
    let cfg = RunConfig { corpus: CorpusSource::Synthetic(synth), epochs: 1, seed: 3, retrieval_ks: vec![1, 5], ..RunConfig::default() };
    let path = dir.join("run.json");
    cfg.save(&path).unwrap();
    path
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&omake(&[], None)), 1);
    assert_eq!(code(&omake(&["train"], None)), 1);
    assert_eq!(code(&omake(&["frobnicate"], None)), 1);
    assert_eq!(code(&omake(&["--help"], None)), 0);
}

#[test]
fn invalid_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"epochs": 1, "surprise": true}"#).unwrap();
    assert_eq!(code(&omake(&["train", "--config", p(&bad), "--out", p(&dir.path().join("r"))], None)), 1);
    let zero_batch = dir.path().join("zero.json");
    fs::write(&zero_batch, r#"{"batch_size": 0}"#).unwrap();
    assert_eq!(code(&omake(&["train", "--config", p(&zero_batch), "--out", p(&dir.path().join("r"))], None)), 1);
    let out = omake(&["train", "--config", p(&small_config(dir.path())), "--out", p(&dir.path().join("r"))], Some("abc"));
    assert_eq!(code(&out), 1);
}

#[test]
fn missing_run_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&omake(&["eval", "--run", p(&dir.path().join("nope"))], None)), 2);
}

#[test]
fn gradcheck_passes() {
    let out = omake(&["gradcheck"], None);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
}

#[test]
fn synth_honours_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert_eq!(code(&omake(&["synth", "--out-dir", p(&a), "--samples-per-leaf", "2"], Some("5"))), 0);
    assert_eq!(code(&omake(&["synth", "--out-dir", p(&b), "--samples-per-leaf", "2", "--seed", "5"], None)), 0);
    assert_eq!(code(&omake(&["synth", "--out-dir", p(&c), "--samples-per-leaf", "2"], None)), 0);
    let read = |d: &Path| fs::read_to_string(d.join("corpus.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    assert!(a.join("ontology.tsv").exists());
    let first: serde_json::Value = serde_json::from_str(read(&a).lines().next().unwrap()).unwrap();
    for key in ["id", "image", "raw_caption", "ontology_caption", "concept_caption", "disease_label"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn train_eval_retrieve_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let run = dir.path().join("run");
    let out = omake(&["train", "--config", p(&config), "--out", p(&run)], None);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["checkpoint.omke", "checkpoint.config.json", "metrics.jsonl"] {
        assert!(run.join(file).exists(), "missing {file}");
    }
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let line: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    let keys: Vec<&str> = line.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys.len(), 5);
    for key in ["step", "mkia_i2t", "mkia_t2i", "fga", "total"] {
        assert!(keys.contains(&key), "missing {key}");
    }
    assert_eq!(&fs::read(run.join("checkpoint.omke")).unwrap()[..4], b"OMKE");

    let eval = omake(&["eval", "--run", p(&run)], None);
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    let acc = report["zero_shot"]["overall_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let retrieve = omake(&["retrieve", "--run", p(&run), "--k", "1,3"], None);
    assert_eq!(code(&retrieve), 0);
    let r: serde_json::Value = serde_json::from_slice(&retrieve.stdout).unwrap();
    assert!(r["i2t"]["1"].as_f64().unwrap() <= r["i2t"]["3"].as_f64().unwrap());
    assert_eq!(code(&omake(&["retrieve", "--run", p(&run), "--k", "0"], None)), 1);

    let emb = dir.path().join("emb.jsonl");
    assert_eq!(code(&omake(&["export", "--run", p(&run), "--out", p(&emb)], None)), 0);
    let text = fs::read_to_string(&emb).unwrap();
    assert_eq!(text.lines().count(), 120);
    let row: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(row["visual"].as_array().unwrap().len(), 64);
    assert!(row["id"].is_string() && row["label"].is_string());
}

#[test]
fn augment_with_mock_backend() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let run = dir.path().join("run");
    assert_eq!(code(&omake(&["train", "--config", p(&config), "--out", p(&run), "--epochs", "0"], None)), 0);
    let corpus = dir.path().join("corpus");
    assert_eq!(code(&omake(&["synth", "--out-dir", p(&corpus), "--samples-per-leaf", "1", "--seed", "3"], None)), 0);

    let tree = fs::read_to_string(corpus.join("ontology.tsv")).unwrap();
    let profiles: String = tree
        .lines()
        .filter_map(|l| l.split('\t').next())
        .map(|d| format!("{{\"disease\":\"{d}\",\"profile\":\"{d} shows scaly red plaques on the trunk.\"}}\n"))
        .collect();
    let prof = dir.path().join("profiles.jsonl");
    fs::write(&prof, profiles).unwrap();
    let kb = dir.path().join("kb");
    let built = omake(&["kb-build", "--profiles", p(&prof), "--kb", p(&kb)], None);
    assert_eq!(code(&built), 0, "{}", String::from_utf8_lossy(&built.stderr));
    assert!(fs::read_dir(&kb).unwrap().count() >= 5);

    let input = corpus.join("corpus.jsonl");
    let out = dir.path().join("augmented.jsonl");
    let records = dir.path().join("records.jsonl");
    let args = [
        "augment", "--in", p(&input), "--out", p(&out), "--kb", p(&kb), "--run", p(&run),
        "--threshold", "1.01", "--records", p(&records),
    ];
    let res = omake(&args, None);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let lines = fs::read_to_string(&out).unwrap();
    assert_eq!(lines.lines().count(), 12);
    let recs = fs::read_to_string(&records).unwrap();
    assert!(recs.lines().all(|l| l.contains("\"routed\":true")));

    let bad = omake(&["augment", "--in", p(&input), "--out", p(&out), "--kb", p(&kb), "--run", p(&run), "--backend", "smoke"], None);
    assert_eq!(code(&bad), 1);
}
