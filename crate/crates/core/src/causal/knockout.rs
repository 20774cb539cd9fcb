// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention knockout from the last position over sliding layer windows.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::target_prob;
use crate::dataset::{render_prompt, FactTriple, Language};
use crate::error::{Error, Result};
use crate::model::{
    forward_with_cache, run_with_interventions, CaptureFilter, Intervention, ModelHandle, Position,
    TokenId,
};

/// Subject, relation and last positions of a tokenized prompt (BOS at 0).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPositions {
    pub tokens: Vec<TokenId>,
    pub subject: Vec<usize>,
    pub relation: Vec<usize>,
    pub last: usize,
}

fn find_all(hay: &[TokenId], needle: &[TokenId]) -> Vec<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return Vec::new();
    }
    (0..=hay.len() - needle.len())
        .filter(|&i| hay[i..i + needle.len()] == *needle)
        .collect()
}

/// Locate the subject span and every relation-token occurrence outside it.
pub fn resolve_positions(
    model: &ModelHandle,
    triple: &FactTriple,
    language: &Language,
) -> Result<PromptPositions> {
    let tok = model.tokenizer();
    let prompt = render_prompt(triple, language)?;
    let tokens = tok.encode_with_bos(prompt);
    let subj_ids = tok.encode(triple.subject_in(language)?);
    let start = *find_all(&tokens, &subj_ids).first().ok_or_else(|| {
        Error::PositionResolution(format!(
            "subject of {} not found in `{language}` prompt",
            triple.key()
        ))
    })?;
    let subject: Vec<usize> = (start..start + subj_ids.len()).collect();
    let mut relation = Vec::new();
    for rel in triple.relation_tokens_in(language)? {
        let ids = tok.encode(rel);
        for i in find_all(&tokens, &ids) {
            relation.extend((i..i + ids.len()).filter(|p| !subject.contains(p)));
        }
    }
    relation.sort_unstable();
    relation.dedup();
    if relation.is_empty() {
        return Err(Error::PositionResolution(format!(
            "no relation token of {} found in `{language}` prompt",
            triple.key()
        )));
    }
    Ok(PromptPositions {
        last: tokens.len() - 1,
        tokens,
        subject,
        relation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceSet {
    Subject,
    Relation,
    Last,
    /// Subject, relation and last together.
    All,
}

impl SourceSet {
    pub fn keys(self, pos: &PromptPositions) -> Vec<usize> {
        let mut k = match self {
            SourceSet::Subject => pos.subject.clone(),
            SourceSet::Relation => pos.relation.clone(),
            SourceSet::Last => vec![pos.last],
            SourceSet::All => {
                let mut v = pos.subject.clone();
                v.extend(&pos.relation);
                v.push(pos.last);
                v
            }
        };
        k.sort_unstable();
        k.dedup();
        k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutPlan {
    pub k: usize,
    pub centers: Vec<usize>,
    /// Relative probability drop flagged as significant.
    pub threshold: f64,
}

impl KnockoutPlan {
    /// `k = 6` over every layer of an `n_layers` model.
    pub fn every_layer(n_layers: usize) -> Self {
        KnockoutPlan {
            k: 6,
            centers: (0..n_layers).collect(),
            threshold: 0.2,
        }
    }
}

/// `[center - k/2, center - k/2 + k)` clipped to `[0, n_layers)`.
pub fn knockout_window(center: usize, k: usize, n_layers: usize) -> Range<usize> {
    let start = center.saturating_sub(k / 2);
    let end = (center + k.div_ceil(2)).min(n_layers);
    start.min(end)..end
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutDelta {
    pub center: usize,
    pub window_start: usize,
    pub window_end: usize,
    pub effective_size: usize,
    pub source: SourceSet,
    pub p_base: f64,
    pub p_knockout: f64,
    /// `p_base - p_knockout`.
    pub delta: f64,
    pub relative_drop: f64,
    pub significant: bool,
}

/// Knock out edges from the last position to `source` keys over each
/// center's window and report the change in `P[target]`.
pub fn knockout_sweep(
    model: &ModelHandle,
    positions: &PromptPositions,
    plan: &KnockoutPlan,
    target: TokenId,
    source: SourceSet,
) -> Result<Vec<KnockoutDelta>> {
    if plan.k == 0 {
        return Err(Error::Domain("knockout window k must be >= 1".into()));
    }
    let n_layers = model.n_layers();
    if let Some(&c) = plan.centers.iter().find(|&&c| c >= n_layers) {
        return Err(Error::Index(format!("center layer {c} outside [0, {n_layers})")));
    }
    if target as usize >= model.vocab_size() {
        return Err(Error::Index(format!("target token {target} outside vocabulary")));
    }
    let capture = CaptureFilter::last_position().with_layers([]);
    let base = forward_with_cache(model, &positions.tokens, &capture)?;
    let p_base = target_prob(&base, target);
    let keys = source.keys(positions);
    let mut out = Vec::with_capacity(plan.centers.len());
    for &center in &plan.centers {
        let window = knockout_window(center, plan.k, n_layers);
        let p_knockout = if keys.is_empty() || window.is_empty() {
            p_base
        } else {
            let iv = Intervention::AttentionKnockout {
                layers: window.clone(),
                query: Position::At(positions.last),
                keys: keys.clone(),
            };
            let t = run_with_interventions(model, &positions.tokens, &[iv], &capture)?;
            target_prob(&t, target)
        };
        let delta = p_base - p_knockout;
        let relative_drop = if p_base > 0.0 { delta / p_base } else { 0.0 };
        out.push(KnockoutDelta {
            center,
            window_start: window.start,
            window_end: window.end,
            effective_size: window.len(),
            source,
            p_base,
            p_knockout,
            delta,
            relative_drop,
            significant: relative_drop >= plan.threshold,
        });
    }
    Ok(out)
}
