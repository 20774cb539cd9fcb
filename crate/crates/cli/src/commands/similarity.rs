// SPDX-License-Identifier: MIT OR Apache-2.0

//! `similarity`: MLP activation similarity between each fact prompt and the
//! translation prompt of the same triple, optionally again with a
//! translation vector applied to the fact prompts.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use rayon::prelude::*;
use recall_lens::dataset::{derive_translation_prompt, render_prompt};
use recall_lens::eval::generation_matches;
use recall_lens::manifest::ArtifactSet;
use recall_lens::model::{generate, intervention_fingerprint};
use recall_lens::similarity::{mlp_activation_similarity, Condition, MlpActivation};
use recall_lens::steering::{to_intervention, SteeringVector};
use serde::Serialize;

use crate::config::LayerList;
use crate::context::{select, Common, Part, Run, SplitArgs};
use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationArg {
    /// MLP block output.
    Output,
    /// Hidden-width MLP activations.
    Hidden,
}

#[derive(Args, Debug, Serialize)]
pub struct SimilarityArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Layers to compare (default: 22-27 on 28+ layer models, all otherwise).
    #[arg(long)]
    pub layers: Option<LayerList>,
    /// Which MLP activation to compare.
    #[arg(long, value_enum, default_value = "output")]
    pub activation: ActivationArg,
    /// Translation vector applied to the fact prompts for a second profile.
    #[arg(long)]
    pub translation_vector: Option<PathBuf>,
    /// Override the vector's scale.
    #[arg(long)]
    pub scale: Option<f32>,
    /// Apply a vector extracted from a different model.
    #[arg(long)]
    pub force: bool,
    /// Keep only pairs whose fact prompt is answered correctly.
    #[arg(long)]
    pub correct_only: bool,
    /// Part of the split to use.
    #[arg(long, value_enum, default_value = "all")]
    pub part: Part,
}

pub fn run(args: SimilarityArgs) -> Result<()> {
    let mut run = Run::open("similarity", &args.common, &args)?;
    let set = if args.part == Part::All {
        run.data.clone()
    } else {
        let (s, record) = args.split.make(&run.data, args.common.seed)?;
        run.split = Some(record);
        select(&s, args.part, &run.data)
    };
    let model = &run.model;
    let n_layers = model.n_layers();
    let layers = match &args.layers {
        Some(LayerList(ls)) => ls.clone(),
        None if n_layers >= 28 => (22..=27).collect(),
        None => (0..n_layers).collect(),
    };
    if let Some(&l) = layers.iter().find(|&&l| l >= n_layers) {
        return Err(UsageError(format!("layer {l} outside [0, {n_layers})")).into());
    }
    let langs = run.non_english();
    if langs.is_empty() {
        return Err(UsageError("similarity pairs need a non-English language".into()).into());
    }
    let vector = match &args.translation_vector {
        Some(p) => {
            let v = SteeringVector::load(p).with_context(|| format!("loading {}", p.display()))?;
            v.check_model(model, args.force)
                .with_context(|| format!("refusing to apply {} (pass --force to override)", p.display()))?;
            Some(to_intervention(&v, args.scale)?)
        }
        None => None,
    };
    if let Some(iv) = &vector {
        run.interventions.push(intervention_fingerprint(std::slice::from_ref(iv)));
    }

    let mut pairs = Vec::new();
    for t in set.triples() {
        for l in &langs {
            pairs.push((t, l, render_prompt(t, l)?.to_string(), derive_translation_prompt(t, l)?));
        }
    }
    if args.correct_only {
        let keep = pairs
            .par_iter()
            .map(|(t, l, fact, _)| {
                let ids = model.tokenizer().encode_with_bos(fact);
                let generated = generate(model, &ids, &[], 5)?;
                generation_matches(model, &generated, t.answer_in(l)?)
            })
            .collect::<recall_lens::Result<Vec<bool>>>()?;
        let mut it = keep.into_iter();
        pairs.retain(|_| it.next().unwrap_or(false));
    }
    if pairs.is_empty() {
        anyhow::bail!("no prompt pairs to compare");
    }
    let (fact, translation): (Vec<String>, Vec<String>) =
        pairs.into_iter().map(|(_, _, a, b)| (a, b)).unzip();
    let kind = match args.activation {
        ActivationArg::Output => MlpActivation::Output,
        ActivationArg::Hidden => MlpActivation::Hidden,
    };
    let b = Condition { name: "translation", prompts: &translation, interventions: &[] };
    let original = mlp_activation_similarity(
        model,
        Condition { name: "recall", prompts: &fact, interventions: &[] },
        b,
        &layers,
        kind,
    )?;

    let id = run.id();
    let mut artifacts = ArtifactSet::new();
    artifacts.add_csv("similarity.csv", &id, &original.to_csv()?);
    let mut profiles = vec![original];
    if let Some(iv) = vector {
        let ivs = [iv];
        let steered = mlp_activation_similarity(
            model,
            Condition { name: "recall+translation_vector", prompts: &fact, interventions: &ivs },
            b,
            &layers,
            kind,
        )?;
        artifacts.add_csv("similarity_intervened.csv", &id, &steered.to_csv()?);
        profiles.push(steered);
    }
    artifacts.add_json("similarity.json", &id, &serde_json::json!({ "profiles": profiles }))?;
    run.finish(&artifacts)?;
    Ok(())
}
