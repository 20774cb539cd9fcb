// SPDX-License-Identifier: MIT OR Apache-2.0

//! `eval`: reports per (seed, condition), a comparison across conditions and
//! the translate-recall-translate baseline.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use recall_lens::dataset::IclOptions;
use recall_lens::eval::{
    baseline_translate_recall_translate, compare_conditions, evaluate, seed_spread, EvalOptions,
    EvalReport, TrtTemplates,
};
use recall_lens::manifest::{derive_seed, ArtifactSet};
use recall_lens::model::{intervention_fingerprint, Intervention};
use recall_lens::steering::{to_intervention, SteeringVector};
use serde::Serialize;

use crate::commands::extract::Prompts;
use crate::context::{depth_default, select, Common, JudgeArgs, Part, Run, SplitArgs};
use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionArg {
    Original,
    Translation,
    Recall,
    Combined,
}

impl ConditionArg {
    fn name(self) -> &'static str {
        match self {
            ConditionArg::Original => "original",
            ConditionArg::Translation => "translation",
            ConditionArg::Recall => "recall",
            ConditionArg::Combined => "combined",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineArg {
    /// Translate to English, recall, translate back.
    Trt,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub judge: JudgeArgs,
    /// Conditions to evaluate.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [ConditionArg::Original])]
    pub conditions: Vec<ConditionArg>,
    /// Split seeds (default: --seed).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Also run a prompting baseline.
    #[arg(long, value_enum)]
    pub baseline: Option<BaselineArg>,
    /// Saved translation vector; extracted from each seed's train split when absent.
    #[arg(long)]
    pub translation_vector: Option<PathBuf>,
    /// Saved recall vector; extracted from each seed's train split when absent.
    #[arg(long)]
    pub recall_vector: Option<PathBuf>,
    /// Layer for on-the-fly translation vectors.
    #[arg(long)]
    pub translation_layer: Option<usize>,
    /// Layer for on-the-fly recall vectors.
    #[arg(long)]
    pub recall_layer: Option<usize>,
    /// Override the translation vector's scale.
    #[arg(long)]
    pub translation_scale: Option<f32>,
    /// Override the recall vector's scale.
    #[arg(long)]
    pub recall_scale: Option<f32>,
    /// Demonstrations per recall bundle for on-the-fly recall vectors.
    #[arg(long, default_value_t = 5)]
    pub shots: usize,
    /// Apply vectors extracted from a different model.
    #[arg(long)]
    pub force: bool,
    /// Part of the split to evaluate.
    #[arg(long, value_enum, default_value = "test")]
    pub part: Part,
    /// Generated tokens judged for final correctness.
    #[arg(long, default_value_t = 5)]
    pub max_new_tokens: usize,
    /// Judge only the first generated token.
    #[arg(long)]
    pub strict_single_token: bool,
    /// Reference layer for conversion accounting.
    #[arg(long)]
    pub reference_layer: Option<usize>,
}

fn load_vector(path: &PathBuf, run: &Run, force: bool) -> Result<SteeringVector> {
    let v = SteeringVector::load(path).with_context(|| format!("loading {}", path.display()))?;
    v.check_model(&run.model, force)
        .with_context(|| format!("refusing to apply {} (pass --force to override)", path.display()))?;
    Ok(v)
}

struct SeedPlan {
    seed: u64,
    eval_set: recall_lens::dataset::FactSet,
    conditions: Vec<(&'static str, Vec<Intervention>)>,
}

pub fn run(args: EvalArgs) -> Result<()> {
    let mut conditions = args.conditions.clone();
    conditions.sort();
    conditions.dedup();
    let seeds = if args.seeds.is_empty() { vec![args.common.seed] } else { args.seeds.clone() };
    for s in [args.translation_scale, args.recall_scale].into_iter().flatten() {
        if !(s > 0.0 && s.is_finite()) {
            return Err(UsageError(format!("steering scale must be > 0, got {s}")).into());
        }
    }
    let mut run = Run::open("eval", &args.common, &args)?;
    let n_layers = run.model.n_layers();
    for l in [args.translation_layer, args.recall_layer].into_iter().flatten() {
        if l >= n_layers {
            return Err(UsageError(format!("layer {l} outside [0, {n_layers})")).into());
        }
    }
    let needs = |c: ConditionArg| conditions.iter().any(|&x| x == c || x == ConditionArg::Combined);
    let saved_t = match (&args.translation_vector, needs(ConditionArg::Translation)) {
        (Some(p), true) => Some(load_vector(p, &run, args.force)?),
        _ => None,
    };
    let saved_r = match (&args.recall_vector, needs(ConditionArg::Recall)) {
        (Some(p), true) => Some(load_vector(p, &run, args.force)?),
        _ => None,
    };
    let langs = run.languages.clone();
    let non_en = run.non_english();

    // Interventions are fixed before anything is evaluated so the manifest
    // id can be embedded in every report.
    let mut plans = Vec::new();
    let mut splits = BTreeMap::new();
    for &seed in &seeds {
        let (split, record) = args.split.make(&run.data, seed)?;
        splits.insert(seed.to_string(), record);
        let vector = |saved: &Option<SteeringVector>, kind: ConditionArg| -> Result<SteeringVector> {
            if let Some(v) = saved {
                return Ok(v.clone());
            }
            if non_en.is_empty() {
                return Err(UsageError("steering conditions need a non-English language".into()).into());
            }
            let vseed = derive_seed(seed, kind.name());
            Ok(match kind {
                ConditionArg::Translation => {
                    let layer = args
                        .translation_layer
                        .unwrap_or_else(|| depth_default(n_layers, 21, |n| (3 * n) / 4));
                    Prompts::translation(&split.train, &non_en)?.extract(&run.model, layer, None, vseed)?
                }
                _ => {
                    let icl = IclOptions { k: args.shots, seed: derive_seed(seed, "icl"), ..Default::default() };
                    let layer = args.recall_layer.unwrap_or(3.min(n_layers - 1));
                    Prompts::recall(&split.train, &non_en, &icl)?.extract(&run.model, layer, None, vseed)?
                }
            })
        };
        let t_iv = if needs(ConditionArg::Translation) {
            Some(to_intervention(&vector(&saved_t, ConditionArg::Translation)?, args.translation_scale)?)
        } else {
            None
        };
        let r_iv = if needs(ConditionArg::Recall) {
            Some(to_intervention(&vector(&saved_r, ConditionArg::Recall)?, args.recall_scale)?)
        } else {
            None
        };
        let mut conds = Vec::new();
        for &c in &conditions {
            let ivs: Vec<Intervention> = match c {
                ConditionArg::Original => vec![],
                ConditionArg::Translation => t_iv.clone().into_iter().collect(),
                ConditionArg::Recall => r_iv.clone().into_iter().collect(),
                ConditionArg::Combined => t_iv.clone().into_iter().chain(r_iv.clone()).collect(),
            };
            run.interventions.push(intervention_fingerprint(&ivs));
            conds.push((c.name(), ivs));
        }
        plans.push(SeedPlan { seed, eval_set: select(&split, args.part, &run.data), conditions: conds });
    }
    run.split = Some(serde_json::json!({ "part": args.part, "by_seed": splits }));
    let judge = args.judge.build()?;
    let id = run.id();

    let mut artifacts = ArtifactSet::new();
    let mut by_condition: BTreeMap<&str, Vec<EvalReport>> = BTreeMap::new();
    for plan in &plans {
        let mut reports = BTreeMap::new();
        for (name, ivs) in &plan.conditions {
            let mut opts = EvalOptions::for_depth(n_layers);
            opts.condition = name.to_string();
            opts.seed = Some(plan.seed);
            opts.max_new_tokens = args.max_new_tokens;
            opts.strict_single_token = args.strict_single_token;
            opts.force = args.force;
            if let Some(l) = args.reference_layer {
                opts.reference_layer = l;
            }
            let report = evaluate(&run.model, &plan.eval_set, &langs, ivs, judge.as_ref(), &opts)?;
            let dir = format!("seed{}", plan.seed);
            artifacts.add_json(format!("{dir}/{name}.json"), &id, &report)?;
            artifacts.add_csv(format!("{dir}/{name}_summary.csv"), &id, &report.summary_csv()?);
            artifacts.add_csv(format!("{dir}/{name}_breakdown.csv"), &id, &report.breakdown_csv()?);
            by_condition.entry(name).or_default().push(report.clone());
            reports.insert(name.to_string(), report);
        }
        let comparison = compare_conditions(&reports, "original")?;
        artifacts.add_csv(format!("seed{}/comparison.csv", plan.seed), &id, &comparison.to_csv()?);

        if args.baseline == Some(BaselineArg::Trt) {
            let mut failures: BTreeMap<(String, String), usize> = BTreeMap::new();
            for lang in &non_en {
                let r = baseline_translate_recall_translate(
                    &run.model,
                    &plan.eval_set,
                    lang,
                    args.max_new_tokens,
                    &TrtTemplates::default(),
                )?;
                for (step, n) in r.step_failures.clone().unwrap_or_default() {
                    failures.insert((lang.to_string(), step), n);
                }
                artifacts.add_json(format!("seed{}/trt_{lang}.json", plan.seed), &id, &r)?;
            }
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["language", "step", "count"])?;
            for ((lang, step), n) in &failures {
                w.write_record([lang.as_str(), step.as_str(), &n.to_string()])?;
            }
            artifacts.add_csv(format!("seed{}/trt_step_failures.csv", plan.seed), &id, &w.into_inner()?);
        }
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["condition", "language", "n_seeds", "mean_final_accuracy", "std_final_accuracy"])?;
    for (name, reports) in &by_condition {
        let refs: Vec<&EvalReport> = reports.iter().collect();
        for s in seed_spread(&refs) {
            w.write_record([
                name.to_string(),
                s.language,
                s.n_seeds.to_string(),
                s.mean_final_accuracy.to_string(),
                s.std_final_accuracy.to_string(),
            ])?;
        }
    }
    artifacts.add_csv("seed_spread.csv", &id, &w.into_inner()?);
    run.finish(&artifacts)?;
    Ok(())
}
