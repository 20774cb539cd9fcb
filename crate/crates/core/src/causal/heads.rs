// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-relation head rankings and targeted head ablation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AieRunner, PatchSetup, PatchSite};
use crate::error::{Error, Result};
use crate::linalg::{argmax, softmax};
use crate::model::{
    forward_with_cache, run_with_interventions, AblationMode, CaptureFilter, Component,
    Intervention, ModelHandle, Positions, TokenId,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRanking {
    pub relation_id: String,
    /// `(layer, head, mean AIE)`, descending by score.
    pub ranked_heads: Vec<(usize, usize, f64)>,
    pub n_examples: usize,
    pub n_degenerate: usize,
}

impl HeadRanking {
    pub fn top(&self, k: usize) -> Vec<(usize, usize)> {
        self.ranked_heads.iter().take(k).map(|&(l, h, _)| (l, h)).collect()
    }
}

/// Mean per-head AIE over `setups`, patching each head's output at
/// `positions`. Setups with a degenerate gap are skipped and counted.
pub fn rank_heads_by_aie(
    model: &ModelHandle,
    relation_id: &str,
    setups: &[PatchSetup],
    positions: &Positions,
) -> Result<HeadRanking> {
    let (n_layers, n_heads) = (model.n_layers(), model.n_heads());
    let per_example: Vec<Option<Vec<f64>>> = setups
        .par_iter()
        .map(|s| {
            let runner = match AieRunner::new(model, s.clone()) {
                Ok(r) => r,
                Err(Error::DegenerateGap { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            let mut scores = Vec::with_capacity(n_layers * n_heads);
            for l in 0..n_layers {
                for h in 0..n_heads {
                    scores.push(runner.aie(&[PatchSite {
                        layer: l,
                        component: Component::Head(h),
                        positions: positions.clone(),
                    }])?);
                }
            }
            Ok(Some(scores))
        })
        .collect::<Result<_>>()?;
    let used: Vec<&Vec<f64>> = per_example.iter().flatten().collect();
    if used.is_empty() {
        return Err(Error::InsufficientData(format!(
            "every example of `{relation_id}` has a degenerate AIE gap"
        )));
    }
    let mut ranked: Vec<(usize, usize, f64)> = (0..n_layers * n_heads)
        .map(|i| {
            let mean = used.iter().map(|s| s[i]).sum::<f64>() / used.len() as f64;
            (i / n_heads, i % n_heads, mean)
        })
        .collect();
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    Ok(HeadRanking {
        relation_id: relation_id.to_string(),
        ranked_heads: ranked,
        n_examples: used.len(),
        n_degenerate: setups.len() - used.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadAblationMode {
    Zero,
    /// Replacement output per `(layer, head)`.
    Mean(BTreeMap<(usize, usize), Vec<f32>>),
}

/// Mean last-position output of each head over a reference corpus.
pub fn head_means(
    model: &ModelHandle,
    reference: &[Vec<TokenId>],
    heads: &[(usize, usize)],
) -> Result<BTreeMap<(usize, usize), Vec<f32>>> {
    if reference.is_empty() {
        return Err(Error::Domain("mean ablation needs a reference corpus".into()));
    }
    let capture = CaptureFilter::last_position().with_heads(true);
    let traces = reference
        .par_iter()
        .map(|p| forward_with_cache(model, p, &capture))
        .collect::<Result<Vec<_>>>()?;
    let mut out = BTreeMap::new();
    for &(l, h) in heads {
        let mut acc = vec![0f64; model.d_model()];
        for t in &traces {
            for (a, &x) in acc.iter_mut().zip(t.head_out(l, h, t.last())?) {
                *a += x as f64;
            }
        }
        let n = traces.len() as f64;
        out.insert((l, h), acc.into_iter().map(|a| (a / n) as f32).collect());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEffect {
    /// Baseline top-1 prediction `t*`.
    pub top1_token: TokenId,
    pub top1_after: TokenId,
    pub top1_logit_base: f32,
    pub top1_logit_ablated: f32,
    pub gold_logit_base: f32,
    pub gold_logit_ablated: f32,
    pub gold_prob_base: f64,
    pub gold_prob_ablated: f64,
    /// Ablated minus baseline.
    pub delta_top1_logit: f32,
    pub delta_gold_logit: f32,
}

/// Ablate `heads` at every position and compare last-position logits.
pub fn ablate_heads(
    model: &ModelHandle,
    prompt: &[TokenId],
    heads: &[(usize, usize)],
    mode: &HeadAblationMode,
    gold: TokenId,
) -> Result<AblationEffect> {
    if gold as usize >= model.vocab_size() {
        return Err(Error::Index(format!("gold token {gold} outside vocabulary")));
    }
    let mut by_layer: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(l, h) in heads {
        if l >= model.n_layers() || h >= model.n_heads() {
            return Err(Error::Index(format!(
                "head ({l}, {h}) outside {}x{} grid",
                model.n_layers(),
                model.n_heads()
            )));
        }
        by_layer.entry(l).or_default().push(h);
    }
    let mut ivs = Vec::new();
    for (layer, hs) in by_layer {
        let mode = match mode {
            HeadAblationMode::Zero => AblationMode::Zero,
            HeadAblationMode::Mean(means) => AblationMode::Mean(
                hs.iter()
                    .map(|&h| {
                        means.get(&(layer, h)).cloned().ok_or_else(|| {
                            Error::Key(format!("no mean activation for head ({layer}, {h})"))
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        ivs.push(Intervention::HeadAblation {
            layer,
            heads: hs,
            positions: Positions::All,
            mode,
        });
    }
    let capture = CaptureFilter::last_position().with_layers([]);
    let base = forward_with_cache(model, prompt, &capture)?;
    let abl = run_with_interventions(model, prompt, &ivs, &capture)?;
    let (bl, al) = (base.last_logits(), abl.last_logits());
    let t = argmax(bl);
    let g = gold as usize;
    Ok(AblationEffect {
        top1_token: t as TokenId,
        top1_after: argmax(al) as TokenId,
        top1_logit_base: bl[t],
        top1_logit_ablated: al[t],
        gold_logit_base: bl[g],
        gold_logit_ablated: al[g],
        gold_prob_base: softmax(bl)[g],
        gold_prob_ablated: softmax(al)[g],
        delta_top1_logit: al[t] - bl[t],
        delta_gold_logit: al[g] - bl[g],
    })
}
