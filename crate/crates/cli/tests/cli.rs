// SPDX-License-Identifier: MIT OR Apache-2.0

//! Runs the `recall-lens` binary end to end on the toy model.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_recall-lens"))
}

fn mini() -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures/mini.jsonl")
        .to_string_lossy()
        .into_owned()
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn recall-lens");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file under `dir` except the manifest, as (relative path, bytes).
fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else if path.file_name().unwrap() != "manifest.json" {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

fn manifest_id(dir: &Path) -> String {
    let v: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    v["manifest_id"].as_str().unwrap().to_string()
}

/// Six-language records for one relation; enough triples per relation that
/// the validation split is not empty.
fn synthetic_data(dir: &Path, n: usize) -> String {
    let langs = ["en", "zh", "ja", "ko", "fr", "es"];
    let mut lines = Vec::new();
    for i in 0..n {
        let field = |f: &dyn Fn(&str) -> String| {
            serde_json::Value::Object(langs.iter().map(|l| (l.to_string(), f(l).into())).collect())
        };
        let subject = field(&|l| format!("Land{i}{l}"));
        let prompt = field(&|l| format!("The currency of Land{i}{l} is"));
        let answer = field(&|l| format!("coin{}{l}", i % 3));
        let rel = serde_json::Value::Object(
            langs.iter().map(|l| (l.to_string(), serde_json::json!(["currency"]))).collect(),
        );
        lines.push(
            serde_json::json!({
                "relation_id": "country_currency",
                "subject": subject,
                "prompt": prompt,
                "answer": answer,
                "relation_tokens": rel,
            })
            .to_string(),
        );
    }
    let path = dir.join("synthetic.jsonl");
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    p(&path).to_string()
}

#[test]
fn analyze_rerun_is_byte_identical_and_verifies() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let data = mini();
    for (dir, jobs) in [(&a, "1"), (&b, "3")] {
        let out = run(&[
            "analyze", "--model", "toy:7", "--data", &data, "--metrics", "ranks,agnostic",
            "--jobs", jobs, "--out", p(dir),
        ]);
        assert!(out.status.success());
    }
    let (xa, xb) = (artifacts(&a), artifacts(&b));
    assert!(xa.iter().any(|(n, _)| n == "diagnostics.csv"));
    assert!(xa.iter().any(|(n, _)| n == "agnostic_table.csv"));
    assert_eq!(xa, xb);
    assert_eq!(manifest_id(&a), manifest_id(&b));
    let head = format!("# manifest={}\n", manifest_id(&a));
    assert!(xa.iter().filter(|(n, _)| n.ends_with(".csv")).all(|(_, c)| c.starts_with(head.as_bytes())));

    assert!(run(&["verify", p(&a)]).status.success());
    std::fs::write(a.join("summary.csv"), "tampered").unwrap();
    assert_eq!(run(&["verify", p(&a)]).status.code(), Some(1));
}

#[test]
fn missing_data_is_a_usage_error_without_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("x");
    let out = run(&["analyze", "--model", "toy:7", "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--data"));
    assert!(!out_dir.exists());

    let out = run(&["eval", "--model", "toy:7", "--data", &mini(), "--split", "across", "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
}

#[test]
fn vectors_refuse_other_models() {
    let tmp = tempfile::tempdir().unwrap();
    let data = mini();
    let vdir = tmp.path().join("vec");
    let out = run(&["extract", "translation", "--model", "toy:7", "--data", &data, "--layer", "2", "--out", p(&vdir)]);
    assert!(out.status.success());
    let vector = vdir.join("translation_L2.rltc");
    assert!(vector.exists() && vdir.join("translation_L2.json").exists());
    assert!(run(&["verify", p(&vdir)]).status.success());

    let args = |model: &'static str, out: &Path| -> Vec<String> {
        [
            "eval", "--model", model, "--data", &data, "--languages", "en,fr", "--conditions",
            "translation", "--translation-vector", p(&vector), "--out", p(out),
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    };
    let refused = tmp.path().join("refused");
    let out = bin().args(args("toy:8", &refused)).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint mismatch"));
    assert!(!refused.exists());

    let forced = tmp.path().join("forced");
    let mut a = args("toy:8", &forced);
    a.push("--force".into());
    assert!(bin().args(&a).output().unwrap().status.success());
    let accepted = tmp.path().join("accepted");
    assert!(bin().args(args("toy:7", &accepted)).output().unwrap().status.success());
}

#[test]
fn empty_train_split_fails_extraction() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("x");
    let out = run(&[
        "extract", "translation", "--model", "toy:7", "--data", &mini(), "--split", "across",
        "--held-out", "country_religion,country_currency,country_language,animal_classification,object_color",
        "--out", p(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out_dir.exists());
}

#[test]
fn recall_grid_names_best_point() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synthetic_data(tmp.path(), 10);
    let out_dir = tmp.path().join("grid");
    let out = run(&[
        "extract", "recall", "--model", "toy:7", "--data", &data, "--languages", "en,fr",
        "--layers", "1-2", "--scales", "1-2", "--grid", "--metric", "final_acc", "--shots", "2",
        "--out", p(&out_dir),
    ]);
    assert!(out.status.success());
    let grid: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("grid_search.json")).unwrap()).unwrap();
    assert_eq!(grid["candidates"].as_array().unwrap().len(), 4);
    assert_eq!(grid["manifest_id"], manifest_id(&out_dir).as_str());
    let layer = grid["best"]["layers"][0].as_u64().unwrap();
    assert!(out_dir.join(format!("recall_L{layer}.rltc")).exists());
}

#[test]
fn eval_writes_one_report_per_seed_and_condition() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("eval");
    let out = run(&[
        "eval", "--model", "toy:7", "--data", &mini(), "--languages", "en,fr",
        "--conditions", "original,translation,recall,combined", "--seeds", "0,1",
        "--baseline", "trt", "--out", p(&out_dir),
    ]);
    assert!(out.status.success());
    for seed in ["seed0", "seed1"] {
        for c in ["original", "translation", "recall", "combined"] {
            assert!(out_dir.join(seed).join(format!("{c}.json")).exists(), "{seed}/{c}");
        }
        assert!(out_dir.join(seed).join("comparison.csv").exists());
        assert!(out_dir.join(seed).join("trt_fr.json").exists());
    }
    assert!(run(&["verify", p(&out_dir)]).status.success());

    let report = tmp.path().join("report");
    assert!(run(&["report", p(&out_dir), "--out", p(&report)]).status.success());
    let table = std::fs::read_to_string(report.join("final_accuracy.csv")).unwrap();
    assert!(table.lines().any(|l| l.starts_with("combined,fr,2,")), "{table}");
}

#[test]
fn config_file_supplies_flags_and_command_line_wins() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    std::fs::write(
        &cfg,
        serde_json::json!({ "model": "toy:7", "data": mini(), "languages": ["en", "zh"], "metrics": ["ranks"] })
            .to_string(),
    )
    .unwrap();
    let out_dir = tmp.path().join("a");
    let out = run(&["analyze", "--config", p(&cfg), "--languages", "fr", "--out", p(&out_dir)]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(out_dir.join("diagnostics.csv")).unwrap();
    let langs: std::collections::BTreeSet<&str> =
        csv.lines().skip(2).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(langs.into_iter().collect::<Vec<_>>(), ["fr"]);

    std::fs::write(&cfg, r#"{"no_such_flag": 1}"#).unwrap();
    let out = run(&["analyze", "--config", p(&cfg), "--model", "toy:7", "--data", &mini()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn causal_commands_produce_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = mini();
    for (cmd, extra, file) in [
        ("patch", vec!["--heads", "--layers", "0-1"], "aie.csv"),
        ("knockout", vec!["--k", "2"], "knockout.csv"),
        ("ablate", vec!["--heads", "1:0,3:1", "--mode", "mean"], "ablation.csv"),
        ("similarity", vec!["--languages", "en,ja"], "similarity.csv"),
    ] {
        let out_dir = tmp.path().join(cmd);
        let mut args = vec![cmd, "--model", "toy:7", "--data", &data, "--out", p(&out_dir)];
        args.extend(extra);
        assert!(run(&args).status.success(), "{cmd}");
        let body = std::fs::read_to_string(out_dir.join(file)).unwrap();
        assert!(body.lines().count() > 2, "{cmd}: {body}");
        assert!(run(&["verify", p(&out_dir)]).status.success(), "{cmd}");
    }
}
