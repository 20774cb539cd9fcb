// SPDX-License-Identifier: MIT OR Apache-2.0

//! `patch`, `knockout` and `ablate`.

use std::collections::BTreeMap;

use anyhow::Result;
use clap::{Args, ValueEnum};
use rayon::prelude::*;
use recall_lens::causal::{
    ablate_heads, component_aie_sweep, corrupt_counterpart, head_means, knockout_sweep,
    rank_heads_by_aie, resolve_positions, sweep_csv, AblationEffect, AieRunner, HeadAblationMode,
    HeadRanking, KnockoutDelta, KnockoutPlan, PatchSetup, SourceSet, SweepRow, AIE_LAYERS,
};
use recall_lens::dataset::{render_prompt, FactTriple, Language};
use recall_lens::lens::first_token;
use recall_lens::linalg::argmax;
use recall_lens::manifest::ArtifactSet;
use recall_lens::model::{forward_with_cache, CaptureFilter, ModelHandle, Position, Positions, TokenId};
use recall_lens::{Error, Result as LensResult};
use serde::Serialize;

use crate::config::{HeadList, LayerList};
use crate::context::{example_id, Common, Run};
use crate::UsageError;

/// Examples skipped by a causal sweep, with the reason.
#[derive(Debug, Default, Serialize)]
struct Skipped {
    counts: BTreeMap<String, usize>,
    examples: Vec<(String, String, String)>,
}

impl Skipped {
    fn add(&mut self, id: &str, lang: &Language, reason: &str) {
        *self.counts.entry(reason.to_string()).or_default() += 1;
        self.examples.push((id.to_string(), lang.to_string(), reason.to_string()));
    }
}

/// Causal commands default to English prompts.
fn causal_languages(run: &Run, common: &Common) -> Vec<Language> {
    if common.languages.is_empty() {
        vec![Language::en()]
    } else {
        run.languages.clone()
    }
}

fn jobs<'a>(run: &'a Run, langs: &'a [Language]) -> Vec<(&'a FactTriple, &'a Language, String)> {
    run.data
        .triples()
        .iter()
        .flat_map(|t| langs.iter().map(move |l| (t, l, example_id(&t.relation_id, t.subject_english()))))
        .collect()
}

fn gold(model: &ModelHandle, t: &FactTriple, lang: &Language) -> LensResult<TokenId> {
    first_token(model, t.answer_in(lang)?)
}

/// Whether the unpatched model already predicts `target`.
fn predicts(model: &ModelHandle, ids: &[TokenId], target: TokenId) -> LensResult<bool> {
    let trace = forward_with_cache(model, ids, &CaptureFilter::last_position().with_layers([]))?;
    Ok(argmax(trace.last_logits()) == target as usize)
}

enum Prepared {
    Setup(PatchSetup),
    Skip(&'static str),
}

/// Clean/corrupted pair for one example, or why there is none.
fn prepare(
    run: &Run,
    t: &FactTriple,
    lang: &Language,
    seed: u64,
    correct_only: bool,
) -> LensResult<Prepared> {
    let model = &run.model;
    let target = gold(model, t, lang)?;
    let clean = model.tokenizer().encode_with_bos(render_prompt(t, lang)?);
    if correct_only && !predicts(model, &clean, target)? {
        return Ok(Prepared::Skip("incorrect"));
    }
    match corrupt_counterpart(model, t, &run.data, lang, seed) {
        Ok(c) => Ok(Prepared::Setup(PatchSetup::new(clean, c.tokens, target)?)),
        Err(Error::NoCounterpart(_)) => Ok(Prepared::Skip("no_counterpart")),
        Err(e) => Err(e),
    }
}

// ---------------------------------------------------------------------------
// patch
// ---------------------------------------------------------------------------

#[derive(Args, Debug, Serialize)]
pub struct PatchArgs {
    #[command(flatten)]
    pub common: Common,
    /// Layers to sweep (default: 21-27 on 28+ layer models, all otherwise).
    #[arg(long)]
    pub layers: Option<LayerList>,
    /// Also patch individual attention heads.
    #[arg(long)]
    pub heads: bool,
    /// Rank heads per relation by mean AIE (implies --heads).
    #[arg(long)]
    pub rank_heads: bool,
    /// Keep only examples the model answers correctly.
    #[arg(long)]
    pub correct_only: bool,
}

pub fn patch(args: PatchArgs) -> Result<()> {
    let run = Run::open("patch", &args.common, &args)?;
    let n_layers = run.model.n_layers();
    let layers = match &args.layers {
        Some(LayerList(ls)) => ls.clone(),
        None if n_layers >= 28 => AIE_LAYERS.collect(),
        None => (0..n_layers).collect(),
    };
    if let Some(&l) = layers.iter().find(|&&l| l >= n_layers) {
        return Err(UsageError(format!("layer {l} outside [0, {n_layers})")).into());
    }
    let heads = args.heads || args.rank_heads;
    let langs = causal_languages(&run, &args.common);
    let jobs = jobs(&run, &langs);
    let seed = args.common.seed;
    let results = jobs
        .par_iter()
        .map(|(t, lang, id)| -> LensResult<Result<(Vec<SweepRow>, PatchSetup), &'static str>> {
            let setup = match prepare(&run, t, lang, seed, args.correct_only)? {
                Prepared::Setup(s) => s,
                Prepared::Skip(why) => return Ok(Err(why)),
            };
            let runner = match AieRunner::new(&run.model, setup.clone()) {
                Ok(r) => r,
                Err(Error::DegenerateGap { .. }) => return Ok(Err("degenerate_gap")),
                Err(e) => return Err(e),
            };
            let id = format!("{id}@{lang}");
            Ok(Ok((component_aie_sweep(&runner, &id, &layers, heads)?, setup)))
        })
        .collect::<LensResult<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut skipped = Skipped::default();
    let mut by_relation: BTreeMap<&str, Vec<PatchSetup>> = BTreeMap::new();
    for ((t, lang, id), r) in jobs.iter().zip(results) {
        match r {
            Ok((rs, setup)) => {
                rows.extend(rs);
                by_relation.entry(&t.relation_id).or_default().push(setup);
            }
            Err(why) => skipped.add(id, lang, why),
        }
    }
    let id = run.id();
    let mut artifacts = ArtifactSet::new();
    artifacts.add_csv("aie.csv", &id, &sweep_csv(&rows)?);
    artifacts.add_json("skipped.json", &id, &skipped)?;
    if args.rank_heads {
        let last = Positions::Only(vec![Position::Last]);
        let mut rankings = BTreeMap::new();
        for (rel, setups) in &by_relation {
            rankings.insert(rel.to_string(), rank_heads_by_aie(&run.model, rel, setups, &last)?);
        }
        artifacts.add_json("head_rankings.json", &id, &rankings)?;
    }
    run.finish(&artifacts)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// knockout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceArg {
    Subject,
    Relation,
    Last,
}

#[derive(Args, Debug, Serialize)]
pub struct KnockoutArgs {
    #[command(flatten)]
    pub common: Common,
    /// Window size in layers.
    #[arg(long, default_value_t = 6)]
    pub k: usize,
    /// Window centers (default: every layer).
    #[arg(long)]
    pub centers: Option<LayerList>,
    /// Source positions whose edges from the last token are cut.
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_values_t = [SourceArg::Subject, SourceArg::Relation, SourceArg::Last]
    )]
    pub sources: Vec<SourceArg>,
    /// Relative probability drop flagged as significant.
    #[arg(long, default_value_t = 0.2)]
    pub threshold: f64,
}

#[derive(Serialize)]
struct KnockoutRow<'a> {
    example_id: &'a str,
    language: &'a str,
    relation_id: &'a str,
    source: SourceSet,
    center: usize,
    window_start: usize,
    window_end: usize,
    effective_size: usize,
    p_base: f64,
    p_knockout: f64,
    delta: f64,
    relative_drop: f64,
    significant: bool,
}

pub fn knockout(args: KnockoutArgs) -> Result<()> {
    if args.k == 0 {
        return Err(UsageError("--k must be >= 1".into()).into());
    }
    let run = Run::open("knockout", &args.common, &args)?;
    let n_layers = run.model.n_layers();
    let plan = KnockoutPlan {
        k: args.k,
        centers: args.centers.clone().map(|c| c.0).unwrap_or_else(|| (0..n_layers).collect()),
        threshold: args.threshold,
    };
    if let Some(&c) = plan.centers.iter().find(|&&c| c >= n_layers) {
        return Err(UsageError(format!("center {c} outside [0, {n_layers})")).into());
    }
    let sources: Vec<SourceSet> = args
        .sources
        .iter()
        .map(|s| match s {
            SourceArg::Subject => SourceSet::Subject,
            SourceArg::Relation => SourceSet::Relation,
            SourceArg::Last => SourceSet::Last,
        })
        .collect();
    let langs = causal_languages(&run, &args.common);
    let jobs = jobs(&run, &langs);
    let results = jobs
        .par_iter()
        .map(|(t, lang, _)| -> LensResult<Option<Vec<KnockoutDelta>>> {
            let pos = match resolve_positions(&run.model, t, lang) {
                Ok(p) => p,
                Err(Error::PositionResolution(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            let target = gold(&run.model, t, lang)?;
            let mut out = Vec::new();
            for &s in &sources {
                out.extend(knockout_sweep(&run.model, &pos, &plan, target, s)?);
            }
            Ok(Some(out))
        })
        .collect::<LensResult<Vec<_>>>()?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut skipped = Skipped::default();
    for ((t, lang, id), r) in jobs.iter().zip(&results) {
        let Some(deltas) = r else {
            skipped.add(id, lang, "position_resolution");
            continue;
        };
        for d in deltas {
            w.serialize(KnockoutRow {
                example_id: id,
                language: lang.code(),
                relation_id: &t.relation_id,
                source: d.source,
                center: d.center,
                window_start: d.window_start,
                window_end: d.window_end,
                effective_size: d.effective_size,
                p_base: d.p_base,
                p_knockout: d.p_knockout,
                delta: d.delta,
                relative_drop: d.relative_drop,
                significant: d.significant,
            })?;
        }
    }
    let id = run.id();
    let mut artifacts = ArtifactSet::new();
    artifacts.add_csv("knockout.csv", &id, &w.into_inner()?);
    artifacts.add_json("skipped.json", &id, &skipped)?;
    run.finish(&artifacts)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationArg {
    Zero,
    Mean,
}

#[derive(Args, Debug, Serialize)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Heads to ablate as `layer:head,...` (default: top-k by AIE per relation).
    #[arg(long)]
    pub heads: Option<HeadList>,
    /// Heads taken from each relation's ranking.
    #[arg(long, default_value_t = 3)]
    pub top_k: usize,
    /// Ablation value.
    #[arg(long, value_enum, default_value = "zero")]
    pub mode: AblationArg,
    /// Rank heads on every English example, not only correctly answered ones.
    #[arg(long)]
    pub all_examples: bool,
}

#[derive(Serialize)]
struct AblationRow<'a> {
    example_id: &'a str,
    language: &'a str,
    relation_id: &'a str,
    heads: String,
    top1_token: TokenId,
    top1_after: TokenId,
    top1_logit_base: f32,
    top1_logit_ablated: f32,
    delta_top1_logit: f32,
    gold_logit_base: f32,
    gold_logit_ablated: f32,
    delta_gold_logit: f32,
    gold_prob_base: f64,
    gold_prob_ablated: f64,
}

impl<'a> AblationRow<'a> {
    fn new(example_id: &'a str, language: &'a str, relation_id: &'a str, heads: String, e: &AblationEffect) -> Self {
        AblationRow {
            example_id,
            language,
            relation_id,
            heads,
            top1_token: e.top1_token,
            top1_after: e.top1_after,
            top1_logit_base: e.top1_logit_base,
            top1_logit_ablated: e.top1_logit_ablated,
            delta_top1_logit: e.delta_top1_logit,
            gold_logit_base: e.gold_logit_base,
            gold_logit_ablated: e.gold_logit_ablated,
            delta_gold_logit: e.delta_gold_logit,
            gold_prob_base: e.gold_prob_base,
            gold_prob_ablated: e.gold_prob_ablated,
        }
    }
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let run = Run::open("ablate", &args.common, &args)?;
    let model = &run.model;
    let (n_layers, n_heads) = (model.n_layers(), model.n_heads());
    if let Some(HeadList(hs)) = &args.heads {
        if let Some((l, h)) = hs.iter().find(|(l, h)| *l >= n_layers || *h >= n_heads) {
            return Err(UsageError(format!("head {l}:{h} outside {n_layers}x{n_heads} grid")).into());
        }
    }
    if args.heads.is_none() && args.top_k == 0 {
        return Err(UsageError("--top-k must be >= 1".into()).into());
    }

    // Heads per relation: fixed by flag, or ranked on English examples.
    let mut rankings: BTreeMap<String, HeadRanking> = BTreeMap::new();
    let mut unranked: BTreeMap<String, String> = BTreeMap::new();
    let mut heads: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    let relations: Vec<String> = run.data.relations().map(str::to_string).collect();
    let en = Language::en();
    for rel in &relations {
        if let Some(HeadList(hs)) = &args.heads {
            heads.insert(rel.clone(), hs.clone());
            continue;
        }
        let mut setups = Vec::new();
        for t in run.data.of_relation(rel) {
            if let Prepared::Setup(s) = prepare(&run, t, &en, args.common.seed, !args.all_examples)? {
                setups.push(s);
            }
        }
        if setups.is_empty() {
            unranked.insert(rel.clone(), "no usable English example".into());
            continue;
        }
        match rank_heads_by_aie(model, rel, &setups, &Positions::Only(vec![Position::Last])) {
            Ok(r) => {
                heads.insert(rel.clone(), r.top(args.top_k));
                rankings.insert(rel.clone(), r);
            }
            Err(Error::InsufficientData(why)) => {
                unranked.insert(rel.clone(), why);
            }
            Err(e) => return Err(e.into()),
        }
    }

    let langs = causal_languages(&run, &args.common);
    let mode = match args.mode {
        AblationArg::Zero => HeadAblationMode::Zero,
        AblationArg::Mean => {
            let mut all: Vec<(usize, usize)> = heads.values().flatten().copied().collect();
            all.sort_unstable();
            all.dedup();
            let corpus = run
                .data
                .triples()
                .iter()
                .flat_map(|t| langs.iter().map(move |l| (t, l)))
                .map(|(t, l)| Ok(model.tokenizer().encode_with_bos(render_prompt(t, l)?)))
                .collect::<LensResult<Vec<_>>>()?;
            HeadAblationMode::Mean(head_means(model, &corpus, &all)?)
        }
    };
    let jobs: Vec<_> = jobs(&run, &langs)
        .into_iter()
        .filter(|(t, _, _)| heads.contains_key(&t.relation_id))
        .collect();
    let effects = jobs
        .par_iter()
        .map(|(t, lang, _)| {
            let ids = model.tokenizer().encode_with_bos(render_prompt(t, lang)?);
            ablate_heads(model, &ids, &heads[&t.relation_id], &mode, gold(model, t, lang)?)
        })
        .collect::<LensResult<Vec<_>>>()?;

    let mut w = csv::Writer::from_writer(Vec::new());
    for ((t, lang, id), effect) in jobs.iter().zip(&effects) {
        let hs = HeadList(heads[&t.relation_id].clone()).to_string();
        w.serialize(AblationRow::new(id, lang.code(), &t.relation_id, hs, effect))?;
    }
    let id = run.id();
    let mut artifacts = ArtifactSet::new();
    artifacts.add_csv("ablation.csv", &id, &w.into_inner()?);
    artifacts.add_json(
        "heads.json",
        &id,
        &serde_json::json!({ "mode": args.mode, "heads": heads, "rankings": rankings, "unranked": unranked }),
    )?;
    run.finish(&artifacts)?;
    Ok(())
}
