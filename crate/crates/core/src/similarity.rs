// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer-wise cosine similarity of MLP activations between paired prompts.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cosine;
use crate::model::{run_with_interventions, CaptureFilter, ForwardTrace, Intervention, ModelHandle};

/// Which MLP quantity is compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpActivation {
    /// Block output in model space.
    #[default]
    Output,
    /// Hidden-width `silu(gate) * up` activations.
    Hidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityProfile {
    pub condition_pair: (String, String),
    pub activation: MlpActivation,
    pub pairing_rule: String,
    pub n_pairs: usize,
    /// Mean cosine per layer over pairs with two non-zero vectors. Layers
    /// where every pair was skipped are absent.
    pub per_layer_cos: BTreeMap<usize, f64>,
    pub per_layer_skipped: BTreeMap<usize, usize>,
}

impl SimilarityProfile {
    /// `layer,condition_pair,mean_cos,n_pairs`.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["layer", "condition_pair", "mean_cos", "n_pairs"])?;
        let pair = format!("{}|{}", self.condition_pair.0, self.condition_pair.1);
        for (l, c) in &self.per_layer_cos {
            let used = self.n_pairs - self.per_layer_skipped.get(l).copied().unwrap_or(0);
            w.write_record([l.to_string(), pair.clone(), c.to_string(), used.to_string()])?;
        }
        w.into_inner().map_err(|e| Error::Domain(format!("csv buffer: {e}")))
    }
}

/// One side of the comparison: prompts and the interventions they run under.
#[derive(Debug, Clone, Copy)]
pub struct Condition<'a> {
    pub name: &'a str,
    pub prompts: &'a [String],
    pub interventions: &'a [Intervention],
}

fn activation(t: &ForwardTrace, layer: usize, kind: MlpActivation) -> Result<&[f32]> {
    match kind {
        MlpActivation::Output => t.mlp_out(layer, t.last()),
        MlpActivation::Hidden => t.mlp_hidden(layer, t.last()),
    }
}

/// Cosine of last-position MLP activations between `a.prompts[i]` and
/// `b.prompts[i]`, averaged over `i` for each layer.
pub fn mlp_activation_similarity(
    model: &ModelHandle,
    a: Condition<'_>,
    b: Condition<'_>,
    layers: &[usize],
    kind: MlpActivation,
) -> Result<SimilarityProfile> {
    if a.prompts.len() != b.prompts.len() {
        return Err(Error::Dimension(format!(
            "pairing needs equal lists: {} vs {} prompts",
            a.prompts.len(),
            b.prompts.len()
        )));
    }
    if a.prompts.is_empty() {
        return Err(Error::Domain("similarity over zero pairs".into()));
    }
    if let Some(&l) = layers.iter().find(|&&l| l >= model.n_layers()) {
        return Err(Error::Index(format!("layer {l} outside [0, {})", model.n_layers())));
    }
    let capture = CaptureFilter::last_position()
        .with_layers(layers.iter().copied())
        .with_mlp_hidden(kind == MlpActivation::Hidden);
    let run = |text: &String, ivs: &[Intervention]| {
        let ids = model.tokenizer().encode_with_bos(text);
        run_with_interventions(model, &ids, ivs, &capture)
    };
    let per_pair: Vec<Vec<Option<f64>>> = a
        .prompts
        .par_iter()
        .zip(b.prompts.par_iter())
        .map(|(pa, pb)| {
            let (ta, tb) = (run(pa, a.interventions)?, run(pb, b.interventions)?);
            layers
                .iter()
                .map(|&l| Ok(cosine(activation(&ta, l, kind)?, activation(&tb, l, kind)?)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut per_layer_cos = BTreeMap::new();
    let mut per_layer_skipped = BTreeMap::new();
    for (j, &l) in layers.iter().enumerate() {
        let vals: Vec<f64> = per_pair.iter().filter_map(|p| p[j]).collect();
        per_layer_skipped.insert(l, per_pair.len() - vals.len());
        if !vals.is_empty() {
            per_layer_cos.insert(l, vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    Ok(SimilarityProfile {
        condition_pair: (a.name.to_string(), b.name.to_string()),
        activation: kind,
        pairing_rule: "index_aligned".into(),
        n_pairs: per_pair.len(),
        per_layer_cos,
        per_layer_skipped,
    })
}
