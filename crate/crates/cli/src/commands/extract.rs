// SPDX-License-Identifier: MIT OR Apache-2.0

//! `extract`: translation and recall steering vectors, optionally selected
//! by a grid search on the validation split.

use std::collections::BTreeMap;

use anyhow::Result;
use clap::{Args, Subcommand, ValueEnum};
use recall_lens::dataset::{build_icl_bundles, FactSet, IclOptions, Language};
use recall_lens::eval::{evaluate, EvalOptions, Metric};
use recall_lens::manifest::{derive_seed, ArtifactSet};
use recall_lens::model::ModelHandle;
use recall_lens::steering::{
    fact_prompts, grid, grid_search, icl_prompts, recall_task_vector, to_intervention,
    translation_difference_vector, translation_prompts, ExtractionSite, LabeledPrompt,
    SteeringVector, VectorKind,
};
use serde::Serialize;

use crate::config::{LayerList, ScaleList};
use crate::context::{depth_default, Common, Run, SplitArgs};
use crate::UsageError;

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtractKind {
    /// Difference of mean activations between translation and fact prompts.
    Translation(ExtractArgs),
    /// Mean activation over few-shot recall bundles.
    Recall(ExtractArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteArg {
    /// Residual stream entering the layer.
    Input,
    /// Residual stream leaving the layer.
    Output,
}

#[derive(Args, Debug, Serialize)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Injection layer of a single vector.
    #[arg(long, conflicts_with = "layers")]
    pub layer: Option<usize>,
    /// Several injection layers (`1-4`); one vector each, or the grid rows.
    #[arg(long)]
    pub layers: Option<LayerList>,
    /// Scale stored with the vector(s).
    #[arg(long, default_value_t = 1.0)]
    pub scale: f32,
    /// Scales searched with --grid (`1-4` or `0.5,1,2`).
    #[arg(long)]
    pub scales: Option<ScaleList>,
    /// Pick the best (layer, scale) on the validation split.
    #[arg(long)]
    pub grid: bool,
    /// Grid objective: final_acc, conversion or agnostic.
    #[arg(long, default_value = "final_acc")]
    pub metric: String,
    /// Extraction site (default: input for translation, output for recall).
    #[arg(long, value_enum)]
    pub site: Option<SiteArg>,
    /// Demonstrations per recall bundle.
    #[arg(long, default_value_t = 5)]
    pub shots: usize,
    /// Draw demonstrations from the query's relation only.
    #[arg(long)]
    pub same_relation_only: bool,
}

fn default_layer(kind: VectorKind, n_layers: usize) -> usize {
    match kind {
        VectorKind::TranslationDiff => depth_default(n_layers, 21, |n| (3 * n) / 4),
        VectorKind::RecallTask => 3.min(n_layers - 1),
    }
}

/// Prompt sets a vector is extracted from.
pub enum Prompts {
    Translation { fact: Vec<LabeledPrompt>, translation: Vec<LabeledPrompt> },
    Recall(Vec<LabeledPrompt>),
}

impl Prompts {
    pub fn translation(train: &FactSet, langs: &[Language]) -> Result<Self> {
        Ok(Prompts::Translation {
            fact: fact_prompts(train, langs)?,
            translation: translation_prompts(train, langs)?,
        })
    }

    pub fn recall(train: &FactSet, langs: &[Language], opts: &IclOptions) -> Result<Self> {
        let mut bundles = Vec::new();
        for l in langs {
            bundles.extend(build_icl_bundles(train, l, opts)?);
        }
        Ok(Prompts::Recall(icl_prompts(&bundles)))
    }

    pub fn kind(&self) -> VectorKind {
        match self {
            Prompts::Translation { .. } => VectorKind::TranslationDiff,
            Prompts::Recall(_) => VectorKind::RecallTask,
        }
    }

    pub fn extract(
        &self,
        model: &ModelHandle,
        layer: usize,
        site: Option<ExtractionSite>,
        seed: u64,
    ) -> Result<SteeringVector> {
        let site = site.unwrap_or(ExtractionSite::default_for(self.kind()));
        Ok(match self {
            Prompts::Translation { fact, translation } => {
                translation_difference_vector(model, fact, translation, layer, site, seed)?
            }
            Prompts::Recall(bundles) => recall_task_vector(model, bundles, layer, site, seed)?,
        })
    }
}

pub fn vector_file(kind: VectorKind, layer: usize) -> String {
    match kind {
        VectorKind::TranslationDiff => format!("translation_L{layer}.rltc"),
        VectorKind::RecallTask => format!("recall_L{layer}.rltc"),
    }
}

fn add_vector(artifacts: &mut ArtifactSet, v: &SteeringVector, id: &str) -> Result<()> {
    let name = vector_file(v.kind, v.layer);
    let (bin, json) = v.to_artifacts(id)?;
    artifacts.add(name.replace(".rltc", ".json"), json);
    artifacts.add(name, bin);
    Ok(())
}

pub fn run(kind: ExtractKind) -> Result<()> {
    let (label, args, is_recall) = match &kind {
        ExtractKind::Translation(a) => ("extract translation", a, false),
        ExtractKind::Recall(a) => ("extract recall", a, true),
    };
    if !(args.scale > 0.0 && args.scale.is_finite()) {
        return Err(UsageError(format!("--scale must be > 0, got {}", args.scale)).into());
    }
    let mut run = Run::open(label, &args.common, &kind)?;
    let seed = args.common.seed;
    let (split, record) = args.split.make(&run.data, seed)?;
    run.split = Some(record);
    let langs = run.non_english();
    if langs.is_empty() {
        return Err(UsageError("steering vectors need at least one non-English language".into()).into());
    }
    let prompts = if is_recall {
        let icl = IclOptions {
            k: args.shots,
            seed: derive_seed(seed, "icl"),
            same_relation_only: args.same_relation_only,
        };
        Prompts::recall(&split.train, &langs, &icl)?
    } else {
        Prompts::translation(&split.train, &langs)?
    };
    let model = &run.model;
    let n_layers = model.n_layers();
    let layers = match (&args.layer, &args.layers) {
        (Some(l), _) => vec![*l],
        (None, Some(LayerList(ls))) => ls.clone(),
        (None, None) => vec![default_layer(prompts.kind(), n_layers)],
    };
    if let Some(&l) = layers.iter().find(|&&l| l >= n_layers) {
        return Err(UsageError(format!("layer {l} outside [0, {n_layers})")).into());
    }
    let site = args.site.map(|s| match s {
        SiteArg::Input => ExtractionSite::LayerInput,
        SiteArg::Output => ExtractionSite::LayerOutput,
    });
    let vseed = derive_seed(seed, label);
    let id = run.id();
    let mut artifacts = ArtifactSet::new();

    if args.grid {
        let metric: Metric = args.metric.parse()?;
        let scales = args.scales.clone().map(|s| s.0).unwrap_or_else(|| vec![args.scale]);
        let mut vectors = BTreeMap::new();
        for &l in &layers {
            vectors.insert(l, prompts.extract(model, l, site, vseed)?);
        }
        let opts = EvalOptions::for_depth(n_layers);
        let result = grid_search(grid(&layers, &scales), &args.metric, |p| {
            let iv = to_intervention(&vectors[&p.layers[0]], Some(p.scale))?;
            let report = evaluate(model, &split.val, &langs, &[iv], None, &opts)?;
            report
                .metric(metric)
                .ok_or_else(|| recall_lens::Error::Domain(format!("metric `{}` undefined", args.metric)))
        });
        let Some(best) = &result.best else {
            let why = result.candidates.iter().find_map(|c| c.error.clone()).unwrap_or_default();
            anyhow::bail!("grid search produced no usable candidate: {why}");
        };
        let mut v = vectors.remove(&best.layers[0]).expect("grid layer was extracted");
        v.scale = best.scale;
        add_vector(&mut artifacts, &v, &id)?;
        artifacts.add_json("grid_search.json", &id, &result)?;
    } else {
        if args.scales.is_some() {
            return Err(UsageError("--scales needs --grid; use --scale for a single vector".into()).into());
        }
        for &l in &layers {
            let mut v = prompts.extract(model, l, site, vseed)?;
            v.scale = args.scale;
            add_vector(&mut artifacts, &v, &id)?;
        }
    }
    run.finish(&artifacts)?;
    Ok(())
}
