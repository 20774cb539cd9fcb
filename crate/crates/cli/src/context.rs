// SPDX-License-Identifier: MIT OR Apache-2.0

//! Flags shared by the experiment subcommands and the per-run bookkeeping
//! that ties artifacts to one manifest.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use recall_lens::dataset::{core_languages, split, FactSet, Language, Split, SplitSpec};
use recall_lens::eval::{Judge, JudgeConfig, JudgeMode, JUDGE_ENDPOINT_ENV};
use recall_lens::manifest::{now_rfc3339, sha256_hex, ArtifactSet, RunManifest};
use recall_lens::model::{load_model, ModelHandle};
use serde::Serialize;

use crate::UsageError;

#[derive(Args, Debug, Clone, Serialize)]
pub struct Common {
    /// Model locator: `toy:<seed>`, `toy:<seed>:<L>x<H>x<D>x<V>` or a container file.
    #[arg(long)]
    pub model: String,
    /// Fact dataset (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Master seed; every random choice derives a labeled sub-seed from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Languages to use (default: every core language in the dataset).
    #[arg(long, value_delimiter = ',')]
    pub languages: Vec<String>,
    /// Worker threads (default: one per core).
    #[arg(long)]
    #[serde(skip)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    #[serde(skip)]
    pub out: PathBuf,
    /// JSON file with default values for any flag.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Within,
    Across,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    All,
    Train,
    Val,
    Test,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SplitArgs {
    /// Split strategy.
    #[arg(long = "split", value_enum, default_value = "within")]
    pub split_kind: SplitKind,
    /// Relations held out for testing (across-relation splits).
    #[arg(long, value_delimiter = ',')]
    pub held_out: Vec<String>,
}

impl SplitArgs {
    pub fn spec(&self, seed: u64) -> Result<SplitSpec> {
        match self.split_kind {
            SplitKind::Within if !self.held_out.is_empty() => {
                Err(UsageError("--held-out needs --split across".into()).into())
            }
            SplitKind::Within => Ok(SplitSpec::within_relation(seed)),
            SplitKind::Across if self.held_out.is_empty() => {
                Err(UsageError("--split across needs --held-out".into()).into())
            }
            SplitKind::Across => Ok(SplitSpec::across_relation(seed, self.held_out.clone())),
        }
    }

    /// The split for `seed` together with its manifest record.
    pub fn make(&self, set: &FactSet, seed: u64) -> Result<(Split, serde_json::Value)> {
        let spec = self.spec(seed)?;
        let s = split(set, &spec)?;
        let record = serde_json::to_value(s.manifest(&spec))?;
        Ok((s, record))
    }
}

pub fn select(s: &Split, part: Part, all: &FactSet) -> FactSet {
    match part {
        Part::All => all.clone(),
        Part::Train => s.train.clone(),
        Part::Val => s.val.clone(),
        Part::Test => s.test.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeArg {
    ExactSubstring,
    LemmaSynonym,
    ExternalLlm,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct JudgeArgs {
    /// Answer-equivalence judge for relation tokens. The external judge's
    /// endpoint is read from the RECALL_LENS_JUDGE_URL environment variable.
    #[arg(long, value_enum)]
    pub judge: Option<JudgeArg>,
    /// Acceptance threshold on the judge score.
    #[arg(long, default_value_t = 0.8)]
    pub judge_threshold: f64,
    /// JSONL cache of judge verdicts; reused across runs.
    #[arg(long)]
    pub judge_cache: Option<PathBuf>,
    /// Answer only from the judge cache.
    #[arg(long)]
    pub judge_replay: bool,
}

impl JudgeArgs {
    pub fn build(&self) -> Result<Option<Judge>> {
        let Some(mode) = self.judge else {
            return Ok(None);
        };
        let mode = match mode {
            JudgeArg::ExactSubstring => JudgeMode::ExactSubstring,
            JudgeArg::LemmaSynonym => JudgeMode::LemmaSynonym,
            JudgeArg::ExternalLlm => JudgeMode::ExternalLlm,
        };
        let config = JudgeConfig {
            threshold: self.judge_threshold,
            endpoint: std::env::var(JUDGE_ENDPOINT_ENV).ok().filter(|s| !s.is_empty()),
            cache_path: self.judge_cache.clone(),
            replay_only: self.judge_replay,
            ..JudgeConfig::with_mode(mode)
        };
        Ok(Some(Judge::new(config)?))
    }
}

// ---------------------------------------------------------------------------
// Run context
// ---------------------------------------------------------------------------

/// Model, data and manifest fields of one invocation.
pub struct Run {
    pub model: ModelHandle,
    pub data: FactSet,
    pub languages: Vec<Language>,
    pub out: PathBuf,
    command: String,
    config_hash: String,
    seed: u64,
    started_at: String,
    pub split: Option<serde_json::Value>,
    pub interventions: Vec<String>,
}

impl Run {
    /// Load model and data. `args` is the full flag set of the command and
    /// feeds the config hash (output path, job count and config path are
    /// excluded so reruns elsewhere keep the same manifest id).
    pub fn open(command: &str, common: &Common, args: &impl Serialize) -> Result<Self> {
        let started_at = now_rfc3339();
        let model = load_model(&common.model)?;
        let data = FactSet::load(&common.data)?;
        let present = data.per_language_counts();
        let languages = if common.languages.is_empty() {
            core_languages().into_iter().filter(|l| present.contains_key(l)).collect()
        } else {
            let mut ls = Vec::new();
            for code in &common.languages {
                let l = Language::new(code);
                if !present.contains_key(&l) {
                    return Err(UsageError(format!("language `{code}` not present in the dataset")).into());
                }
                if !ls.contains(&l) {
                    ls.push(l);
                }
            }
            ls
        };
        let config = serde_json::json!({ "command": command, "args": args });
        Ok(Run {
            model,
            data,
            languages,
            out: common.out.clone(),
            command: command.to_string(),
            config_hash: sha256_hex(config.to_string().as_bytes()),
            seed: common.seed,
            started_at,
            split: None,
            interventions: Vec::new(),
        })
    }

    pub fn non_english(&self) -> Vec<Language> {
        self.languages.iter().filter(|l| !l.is_english()).cloned().collect()
    }

    fn manifest(&self) -> RunManifest {
        RunManifest {
            command: self.command.clone(),
            config_hash: self.config_hash.clone(),
            model_fingerprint: self.model.fingerprint().to_string(),
            dataset_hash: self.data.content_hash(),
            split: self.split.clone(),
            seed: self.seed,
            intervention_fingerprints: self.interventions.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: self.started_at.clone(),
            finished_at: String::new(),
        }
    }

    /// Manifest id; fixed once the split and interventions are recorded.
    pub fn id(&self) -> String {
        self.manifest().id()
    }

    pub fn finish(&self, artifacts: &ArtifactSet) -> Result<String> {
        finish(&self.out, artifacts, RunManifest { finished_at: now_rfc3339(), ..self.manifest() })
    }
}

/// Write `artifacts` and report where they went.
pub fn finish(out: &Path, artifacts: &ArtifactSet, manifest: RunManifest) -> Result<String> {
    let file = artifacts
        .write(out, &manifest)
        .with_context(|| format!("writing artifacts to {}", out.display()))?;
    println!(
        "manifest {} ({} artifacts) in {}",
        file.manifest_id,
        file.artifacts.len(),
        out.display()
    );
    Ok(file.manifest_id)
}

/// `relation/subject` key used in long-format outputs.
pub fn example_id(relation: &str, subject_en: &str) -> String {
    format!("{relation}/{subject_en}")
}

/// Default depth-dependent layers: the 28-layer defaults when the model is
/// deep enough, otherwise `fallback(n_layers)`.
pub fn depth_default(n_layers: usize, deep: usize, fallback: impl Fn(usize) -> usize) -> usize {
    if n_layers >= 28 {
        deep
    } else {
        fallback(n_layers)
    }
}
