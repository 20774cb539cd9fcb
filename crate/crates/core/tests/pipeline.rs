// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end plumbing over the fixture: position resolution, counterfactual
//! prompts, vector persistence and artifact verification.

mod common;

use common::*;
use recall_lens::causal::{corrupt_counterpart, resolve_positions};
use recall_lens::dataset::Language;
use recall_lens::manifest::{verify_dir, ArtifactSet, RunManifest};
use recall_lens::model::{toy_model_fixture, ToyDims};
use recall_lens::steering::{
    fact_prompts, recall_task_vector, sidecar_path, ExtractionSite, SteeringVector,
};
use recall_lens::Error;

#[test]
fn positions_point_at_subject_and_relation_tokens() {
    let m = toy();
    let set = mini();
    let tok = m.tokenizer();
    let mut resolved = 0;
    for t in set.triples() {
        for lang in t.languages() {
            let Ok(pos) = resolve_positions(&m, t, lang) else {
                continue;
            };
            resolved += 1;
            let subj = tok.encode(t.subject_in(lang).unwrap());
            let span: Vec<_> = pos.subject.iter().map(|&p| pos.tokens[p]).collect();
            assert_eq!(span, subj, "{} {lang}", t.key());
            assert_eq!(pos.last, pos.tokens.len() - 1);
            assert!(pos.relation.iter().all(|p| !pos.subject.contains(p)));
            assert!(pos.relation.iter().all(|&p| p < pos.tokens.len()));
        }
    }
    assert!(resolved > set.len(), "only {resolved} prompts resolved");
}

#[test]
fn counterparts_keep_length_and_relation() {
    let m = toy();
    let set = mini();
    let en = Language::en();
    let mut found = 0;
    for t in set.triples() {
        match corrupt_counterpart(&m, t, &set, &en, 3) {
            Ok(c) => {
                found += 1;
                let clean = m.tokenizer().encode_with_bos(&t.prompt[&en]);
                assert_eq!(c.tokens.len(), clean.len());
                assert_ne!(c.subject_en, t.subject_english());
                assert!(set
                    .of_relation(&t.relation_id)
                    .any(|o| o.subject_english() == c.subject_en));
                let again = corrupt_counterpart(&m, t, &set, &en, 3).unwrap();
                assert_eq!(again, c);
            }
            Err(Error::NoCounterpart(_)) => {}
            Err(e) => panic!("{e}"),
        }
    }
    assert!(found > 0);
}

fn manifest(command: &str) -> RunManifest {
    RunManifest {
        command: command.into(),
        config_hash: "c".into(),
        model_fingerprint: toy().fingerprint().into(),
        dataset_hash: mini().content_hash(),
        split: None,
        seed: 0,
        intervention_fingerprints: vec![],
        tool_version: "test".into(),
        started_at: "2026-01-01T00:00:00Z".into(),
        finished_at: "2026-01-01T00:00:01Z".into(),
    }
}

#[test]
fn vector_round_trip_and_fingerprint_refusal() {
    let m = toy();
    let prompts = fact_prompts(&mini(), &[Language::en()]).unwrap();
    let v = recall_task_vector(&m, &prompts, 2, ExtractionSite::LayerOutput, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("recall.rltc");
    v.save(&path, "abc").unwrap();
    assert!(sidecar_path(&path).exists());
    let back = SteeringVector::load(&path).unwrap();
    assert_eq!(back, v);
    back.check_model(&m, false).unwrap();

    let other = toy_model_fixture(8, ToyDims::default()).unwrap();
    assert!(matches!(
        back.check_model(&other, false),
        Err(Error::FingerprintMismatch { .. })
    ));
    back.check_model(&other, true).unwrap();
}

#[test]
fn artifact_set_verifies_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let man = manifest("analyze");
    let id = man.id();
    let mut set = ArtifactSet::new();
    set.add_csv("diag.csv", &id, b"a,b\n1,2\n");
    set.add_json("agg.json", &id, &serde_json::json!({"x": 1})).unwrap();
    set.write(&out, &man).unwrap();

    let report = verify_dir(&out).unwrap();
    assert!(report.ok(), "{:?}", report.problems);
    assert_eq!(report.checked, 2);
    assert_eq!(report.manifest_id, id);
    // Nothing but the artifacts and the manifest is left behind.
    let mut names: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["run"]);

    std::fs::write(out.join("diag.csv"), b"# manifest=other\na,b\n1,2\n").unwrap();
    let report = verify_dir(&out).unwrap();
    assert!(!report.ok());
    assert!(report.problems.iter().all(|p| p.starts_with("diag.csv")), "{:?}", report.problems);
    assert!(report.problems.iter().any(|p| p.contains("hash mismatch")));
}

#[test]
fn manifest_id_ignores_timestamps() {
    let a = manifest("eval");
    let mut b = a.clone();
    b.started_at = "2027-05-05T00:00:00Z".into();
    b.finished_at = "2027-05-05T00:00:09Z".into();
    assert_eq!(a.id(), b.id());
    b.seed = 1;
    assert_ne!(a.id(), b.id());
}
