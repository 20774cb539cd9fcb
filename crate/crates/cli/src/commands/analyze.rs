// SPDX-License-Identifier: MIT OR Apache-2.0

//! `analyze`: logit-lens diagnostics over a dataset with no interventions.

use std::collections::BTreeMap;

use anyhow::Result;
use clap::{Args, ValueEnum};
use rayon::prelude::*;
use recall_lens::dataset::{FactTriple, Language};
use recall_lens::eval::{evaluate, EvalOptions};
use recall_lens::lens::{
    agnostic_correct, aggregate_json, diagnostics_csv, extraction_profile, first_extraction_event,
    rank_trajectory, relation_propagates, DiagnosticRow, Equivalence, EventKind, ExactMatch,
};
use recall_lens::linalg::argmax;
use recall_lens::manifest::ArtifactSet;
use recall_lens::model::{forward_with_cache, CaptureFilter, ForwardTrace, TokenId};
use serde::Serialize;

use crate::config::LayerList;
use crate::context::{example_id, select, Common, JudgeArgs, Part, Run, SplitArgs};
use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalyzeMetric {
    /// Per-layer rank of the English and target-language answers.
    Ranks,
    /// Intermediate English correctness and the four-way tables.
    Agnostic,
    /// Relation tokens as top-1 intermediate decode.
    Propagation,
    /// First attention/MLP output decoding to the final prediction.
    Extraction,
}

#[derive(Args, Debug, Serialize)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub judge: JudgeArgs,
    /// Diagnostics to compute.
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_values_t = [AnalyzeMetric::Ranks, AnalyzeMetric::Agnostic, AnalyzeMetric::Propagation, AnalyzeMetric::Extraction]
    )]
    pub metrics: Vec<AnalyzeMetric>,
    /// Residual streams to report (default: 20-27 on 28+ layer models,
    /// every stream otherwise).
    #[arg(long)]
    pub layers: Option<LayerList>,
    /// Reference layer for conversion accounting.
    #[arg(long)]
    pub reference_layer: Option<usize>,
    /// Part of the split to analyze.
    #[arg(long, value_enum, default_value = "all")]
    pub part: Part,
    /// Generated tokens judged for final correctness.
    #[arg(long, default_value_t = 5)]
    pub max_new_tokens: usize,
}

struct Example<'a> {
    triple: &'a FactTriple,
    language: &'a Language,
    id: String,
}

struct ExampleOut {
    rows: Vec<DiagnosticRow>,
    trace: ForwardTrace,
    prediction: TokenId,
}

pub fn run(args: AnalyzeArgs) -> Result<()> {
    let mut metrics = args.metrics.clone();
    metrics.sort();
    metrics.dedup();
    let mut run = Run::open("analyze", &args.common, &args)?;
    let set = if args.part == Part::All {
        run.data.clone()
    } else {
        let (s, record) = args.split.make(&run.data, args.common.seed)?;
        run.split = Some(record);
        select(&s, args.part, &run.data)
    };
    let n_layers = run.model.n_layers();
    let mut opts = EvalOptions::for_depth(n_layers);
    opts.max_new_tokens = args.max_new_tokens;
    if let Some(l) = args.reference_layer {
        opts.reference_layer = l;
    }
    if let Some(LayerList(ls)) = &args.layers {
        opts.audit_layers = ls.clone();
    }
    if let Some(&l) = opts.audit_layers.iter().chain([&opts.reference_layer]).find(|&&l| l > n_layers) {
        return Err(UsageError(format!("layer {l} beyond model depth {n_layers}")).into());
    }
    let layers = opts.audit_layers.clone();
    let judge = args.judge.build()?;
    let equivalence: &dyn Equivalence = match &judge {
        Some(j) => j,
        None => &ExactMatch,
    };

    let examples: Vec<Example> = set
        .triples()
        .iter()
        .flat_map(|t| {
            run.languages.iter().map(move |l| Example {
                triple: t,
                language: l,
                id: example_id(&t.relation_id, t.subject_english()),
            })
        })
        .collect();
    let model = &run.model;
    let outs = examples
        .par_iter()
        .map(|ex| -> Result<ExampleOut> {
            let prompt = recall_lens::dataset::render_prompt(ex.triple, ex.language)?;
            let ids = model.tokenizer().encode_with_bos(prompt);
            let trace = forward_with_cache(model, &ids, &CaptureFilter::last_position())?;
            let prediction = argmax(trace.last_logits()) as TokenId;
            let row = |layer: usize, metric: &str, value: f64| DiagnosticRow {
                example_id: ex.id.clone(),
                language: ex.language.to_string(),
                relation_id: ex.triple.relation_id.clone(),
                layer,
                metric: metric.to_string(),
                value,
            };
            let mut rows = Vec::new();
            for m in &metrics {
                match m {
                    AnalyzeMetric::Ranks => {
                        let en = ex.triple.answer_english();
                        let target = ex.triple.answer_in(ex.language)?;
                        let trajs = rank_trajectory(model, &trace, &[en, target])?;
                        for &l in &layers {
                            rows.push(row(l, "rank_en", trajs[0].per_layer_rank[&l] as f64));
                            if !ex.language.is_english() {
                                rows.push(row(l, "rank_target", trajs[1].per_layer_rank[&l] as f64));
                            }
                        }
                    }
                    AnalyzeMetric::Agnostic => {
                        for &l in &layers {
                            let ok = agnostic_correct(model, &trace, l, ex.triple.answer_english())?;
                            rows.push(row(l, "agnostic", ok as u8 as f64));
                        }
                    }
                    AnalyzeMetric::Propagation => {
                        let rel = ex.triple.relation_tokens_in(ex.language)?;
                        for &l in &layers {
                            let ok = relation_propagates(model, &trace, rel, l, equivalence)?;
                            rows.push(row(l, "relation_top1", ok as u8 as f64));
                        }
                    }
                    AnalyzeMetric::Extraction => {
                        if let Some((l, kind)) = first_extraction_event(model, &trace, prediction)? {
                            let metric = match kind {
                                EventKind::Attn => "extraction_attn",
                                EventKind::Mlp => "extraction_mlp",
                            };
                            rows.push(row(l, metric, 1.0));
                        }
                    }
                }
            }
            Ok(ExampleOut { rows, trace, prediction })
        })
        .collect::<Result<Vec<_>>>()?;

    let id = run.id();
    let mut artifacts = ArtifactSet::new();
    let rows: Vec<DiagnosticRow> = outs.iter().flat_map(|o| o.rows.iter().cloned()).collect();
    artifacts.add_csv("diagnostics.csv", &id, &diagnostics_csv(&rows)?);
    artifacts.add_json(
        "aggregate.json",
        &id,
        &serde_json::json!({ "mean_by_language_and_layer": aggregate_json(&rows) }),
    )?;

    if metrics.contains(&AnalyzeMetric::Agnostic) {
        let report = evaluate(model, &set, &run.languages, &[], None, &opts)?;
        artifacts.add_csv("agnostic_table.csv", &id, &report.breakdown_csv()?);
        artifacts.add_csv("summary.csv", &id, &report.summary_csv()?);
    }
    if metrics.contains(&AnalyzeMetric::Extraction) {
        let mut profiles = BTreeMap::new();
        for lang in &run.languages {
            let (ex, preds): (Vec<(&str, &ForwardTrace)>, Vec<TokenId>) = examples
                .iter()
                .zip(&outs)
                .filter(|(e, _)| e.language == lang)
                .map(|(e, o)| ((e.id.as_str(), &o.trace), o.prediction))
                .unzip();
            profiles.insert(lang.to_string(), extraction_profile(model, &ex, &preds)?);
        }
        artifacts.add_json("extraction_profile.json", &id, &profiles)?;
    }
    run.finish(&artifacts)?;
    Ok(())
}
