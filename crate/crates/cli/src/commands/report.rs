// SPDX-License-Identifier: MIT OR Apache-2.0

//! `verify` and `report`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use recall_lens::eval::{seed_spread, EvalReport};
use recall_lens::manifest::{
    now_rfc3339, sha256_hex, verify_dir, ArtifactSet, ManifestFile, RunManifest, MANIFEST_FILE,
};
use serde::Serialize;

use crate::context::finish;

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Run directory holding manifest.json.
    pub dir: PathBuf,
    /// Accepted for config-file symmetry.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn verify(args: VerifyArgs) -> Result<()> {
    let report = verify_dir(&args.dir)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if !report.ok() {
        bail!("{} problem(s) in {}", report.problems.len(), args.dir.display());
    }
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct ReportArgs {
    /// Verified run directories (typically `eval` outputs).
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "report")]
    #[serde(skip)]
    pub out: PathBuf,
    /// JSON file with default values for any flag.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

fn json_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            json_files(&p, out)?;
        } else if p.extension().is_some_and(|x| x == "json") && e.file_name() != MANIFEST_FILE {
            out.push(p);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct ConditionRow<'a> {
    run: &'a str,
    condition: &'a str,
    seed: Option<u64>,
    language: String,
    n: usize,
    final_accuracy: f64,
    agnostic_rate: f64,
    conversion_correctness: Option<f64>,
}

pub fn report(args: ReportArgs) -> Result<()> {
    let started_at = now_rfc3339();
    let mut manifests = Vec::new();
    let mut reports: Vec<(String, EvalReport)> = Vec::new();
    for dir in &args.runs {
        let check = verify_dir(dir)?;
        if !check.ok() {
            bail!("{} failed verification: {}", dir.display(), check.problems.join("; "));
        }
        let bytes = std::fs::read(dir.join(MANIFEST_FILE))?;
        let file: ManifestFile = serde_json::from_slice(&bytes)?;
        let mut files = Vec::new();
        json_files(dir, &mut files)?;
        for f in files {
            let value: serde_json::Value = serde_json::from_slice(&std::fs::read(&f)?)?;
            if value.get("per_language").is_none() {
                continue;
            }
            let r: EvalReport =
                serde_json::from_value(value).with_context(|| format!("parsing {}", f.display()))?;
            reports.push((file.manifest_id.clone(), r));
        }
        manifests.push(file);
    }
    if reports.is_empty() {
        bail!("no evaluation reports found in the given runs");
    }

    let ids: BTreeSet<&str> = manifests.iter().map(|m| m.manifest_id.as_str()).collect();
    let joined = |f: fn(&ManifestFile) -> &str| -> String {
        let set: BTreeSet<&str> = manifests.iter().map(f).collect();
        set.into_iter().collect::<Vec<_>>().join("+")
    };
    let manifest = RunManifest {
        command: "report".into(),
        config_hash: sha256_hex(ids.iter().copied().collect::<Vec<_>>().join(",").as_bytes()),
        model_fingerprint: joined(|m| &m.manifest.model_fingerprint),
        dataset_hash: joined(|m| &m.manifest.dataset_hash),
        split: None,
        seed: 0,
        intervention_fingerprints: vec![],
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        started_at,
        finished_at: String::new(),
    };
    let id = manifest.id();

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut by_condition: BTreeMap<&str, Vec<&EvalReport>> = BTreeMap::new();
    for (run, r) in &reports {
        by_condition.entry(&r.config.condition).or_default().push(r);
        let mut rows: Vec<(String, _)> =
            r.per_language.iter().map(|(l, s)| (l.to_string(), s)).collect();
        if let Some(s) = &r.non_english {
            rows.push((recall_lens::eval::NON_ENGLISH.to_string(), s));
        }
        for (language, s) in rows {
            w.serialize(ConditionRow {
                run,
                condition: &r.config.condition,
                seed: r.config.seed,
                language,
                n: s.n,
                final_accuracy: s.final_accuracy,
                agnostic_rate: s.agnostic_rate,
                conversion_correctness: s.conversion_correctness,
            })?;
        }
    }
    let mut artifacts = ArtifactSet::new();
    artifacts.add_csv("conditions.csv", &id, &w.into_inner()?);

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["condition", "language", "n_seeds", "mean_final_accuracy", "std_final_accuracy"])?;
    for (cond, rs) in &by_condition {
        for s in seed_spread(rs) {
            w.write_record([
                cond.to_string(),
                s.language,
                s.n_seeds.to_string(),
                s.mean_final_accuracy.to_string(),
                s.std_final_accuracy.to_string(),
            ])?;
        }
    }
    artifacts.add_csv("final_accuracy.csv", &id, &w.into_inner()?);
    artifacts.add_json("sources.json", &id, &serde_json::json!({ "runs": ids }))?;
    finish(&args.out, &artifacts, RunManifest { finished_at: now_rfc3339(), ..manifest })?;
    Ok(())
}
