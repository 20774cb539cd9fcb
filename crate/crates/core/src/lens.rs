// SPDX-License-Identifier: MIT OR Apache-2.0

//! Intermediate-layer decoding and the layer-wise diagnostics built on it.
//!
//! Layer `l` refers to `residual_pre[l]`, the stream entering block `l`;
//! `l = n_layers` is the stream after the last block, whose decode is the
//! model's own output distribution.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{argmax, softmax};
use crate::model::{Component, ForwardTrace, ModelHandle, TokenId};

/// Default audit window for agnostic correctness.
pub const AUDIT_LAYERS: std::ops::RangeInclusive<usize> = 20..=27;

/// `softmax(E · final_norm(residual_pre[layer][position]))`.
pub fn decode_intermediate(
    model: &ModelHandle,
    trace: &ForwardTrace,
    layer: usize,
    position: usize,
) -> Result<Vec<f64>> {
    let h = trace.residual_pre(layer, position)?;
    Ok(softmax(&model.unembed_normed(h)))
}

/// Top-1 decoded token at `(layer, last position)`.
pub fn top1_at(model: &ModelHandle, trace: &ForwardTrace, layer: usize) -> Result<TokenId> {
    let h = trace.residual_pre(layer, trace.last())?;
    Ok(argmax(&model.unembed_normed(h)) as TokenId)
}

fn is_latin(s: &str) -> bool {
    !s.chars().any(crate::model::is_cjk_char)
}

/// Symmetric containment match between a decoded piece and an answer string.
/// Latin-script comparisons are case-folded; CJK comparisons are exact.
pub fn token_matches_answer(decoded_token: &str, answer: &str) -> bool {
    let (a, b) = (decoded_token.trim(), answer.trim());
    if a.is_empty() || b.is_empty() {
        return false;
    }
    if is_latin(a) && is_latin(b) {
        let (a, b) = (a.to_lowercase(), b.to_lowercase());
        b.contains(&a) || a.contains(&b)
    } else {
        b.contains(a) || a.contains(b)
    }
}

fn fold(s: &str) -> String {
    if is_latin(s) {
        s.to_lowercase()
    } else {
        s.to_string()
    }
}

/// `text` contains `answer` (case-folded for Latin scripts).
pub fn contains_answer(text: &str, answer: &str) -> bool {
    let (t, a) = (text.trim(), answer.trim());
    !a.is_empty() && fold(t).contains(&fold(a))
}

/// `piece` is a non-empty leading fragment of `answer`.
pub fn is_answer_prefix(piece: &str, answer: &str) -> bool {
    let (p, a) = (piece.trim(), answer.trim());
    !p.is_empty() && fold(a).starts_with(&fold(p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTrajectory {
    pub candidate: String,
    /// First token of the candidate; the one actually ranked.
    pub token: TokenId,
    /// 0 is the top rank.
    pub per_layer_rank: BTreeMap<usize, usize>,
    pub per_layer_prob: BTreeMap<usize, f64>,
}

/// Rank of `token` in `probs`: the number of tokens that sort ahead of it,
/// where higher probability wins and equal probabilities go to the lower id.
/// Rank 0 therefore coincides with [`argmax`].
pub fn rank_of(probs: &[f64], token: TokenId) -> usize {
    let t = token as usize;
    let p = probs[t];
    probs
        .iter()
        .enumerate()
        .filter(|&(i, &q)| q > p || (q == p && i < t))
        .count()
}

/// First token id of `candidate`, or a domain error if it tokenizes to nothing.
pub fn first_token(model: &ModelHandle, candidate: &str) -> Result<TokenId> {
    model
        .tokenizer()
        .encode(candidate)
        .first()
        .copied()
        .ok_or_else(|| Error::Domain(format!("candidate `{candidate}` has no tokens")))
}

/// Per-layer rank of each candidate's first token at the last position, over
/// every layer whose last-position stream is captured.
pub fn rank_trajectory(
    model: &ModelHandle,
    trace: &ForwardTrace,
    candidates: &[&str],
) -> Result<Vec<RankTrajectory>> {
    let tokens: Vec<TokenId> = candidates
        .iter()
        .map(|c| first_token(model, c))
        .collect::<Result<_>>()?;
    let mut out: Vec<RankTrajectory> = candidates
        .iter()
        .zip(&tokens)
        .map(|(c, &token)| RankTrajectory {
            candidate: c.to_string(),
            token,
            per_layer_rank: BTreeMap::new(),
            per_layer_prob: BTreeMap::new(),
        })
        .collect();
    let last = trace.last();
    for layer in 0..=trace.n_layers() {
        let Ok(probs) = decode_intermediate(model, trace, layer, last) else {
            continue;
        };
        for traj in &mut out {
            traj.per_layer_rank.insert(layer, rank_of(&probs, traj.token));
            traj.per_layer_prob.insert(layer, probs[traj.token as usize]);
        }
    }
    if out.iter().all(|t| t.per_layer_rank.is_empty()) && !out.is_empty() {
        return Err(Error::MissingCapture(
            "no last-position residual stream captured".into(),
        ));
    }
    Ok(out)
}

/// Whether the top-1 decode at `(layer, last)` matches the English answer.
pub fn agnostic_correct(
    model: &ModelHandle,
    trace: &ForwardTrace,
    layer: usize,
    english_answer: &str,
) -> Result<bool> {
    let top = top1_at(model, trace, layer)?;
    let piece = model.tokenizer().decode_token(top)?;
    Ok(token_matches_answer(&piece, english_answer))
}

/// Answer-equivalence oracle used for relation-token matching.
pub trait Equivalence: Sync {
    fn equivalent(&self, candidate: &str, reference: &str) -> Result<bool>;
}

/// Plain [`token_matches_answer`] as an equivalence.
pub struct ExactMatch;

impl Equivalence for ExactMatch {
    fn equivalent(&self, candidate: &str, reference: &str) -> Result<bool> {
        Ok(token_matches_answer(candidate, reference))
    }
}

/// Top-1 decoded piece at `(layer, last)` is a relation token, either
/// verbatim (case-folded) or accepted by `judge`.
pub fn relation_propagates(
    model: &ModelHandle,
    trace: &ForwardTrace,
    relation_tokens: &[String],
    layer: usize,
    judge: &dyn Equivalence,
) -> Result<bool> {
    let top = top1_at(model, trace, layer)?;
    let piece = model.tokenizer().decode_token(top)?;
    let piece = piece.trim();
    if piece.is_empty() {
        return Ok(false);
    }
    for rel in relation_tokens {
        if rel.trim().to_lowercase() == piece.to_lowercase() {
            return Ok(true);
        }
    }
    for rel in relation_tokens {
        if judge.equivalent(piece, rel)? {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Fraction of examples whose top-1 decode at `(layer, last)` is one of
/// their relation tokens or an accepted equivalent.
pub fn relation_propagation_rate(
    model: &ModelHandle,
    examples: &[(&ForwardTrace, &[String])],
    layer: usize,
    judge: &dyn Equivalence,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Domain("relation propagation over no examples".into()));
    }
    let mut hits = 0usize;
    for (trace, rel) in examples {
        if relation_propagates(model, trace, rel, layer, judge)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

// ---------------------------------------------------------------------------
// Extraction events
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Attn,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionProfile {
    pub n_examples: usize,
    pub per_layer_attn_rate: BTreeMap<usize, f64>,
    pub per_layer_mlp_rate: BTreeMap<usize, f64>,
    pub first_event_layer: BTreeMap<String, Option<usize>>,
    pub first_event_kind: BTreeMap<String, Option<EventKind>>,
}

/// `argmax(E · x)` of a raw component output, no final norm.
pub fn component_top1(model: &ModelHandle, x: &[f32]) -> TokenId {
    argmax(&model.unembed_raw(x)) as TokenId
}

/// The first (layer, component) whose last-position output decodes to
/// `target`. Attention precedes the MLP within a layer.
pub fn first_extraction_event(
    model: &ModelHandle,
    trace: &ForwardTrace,
    target: TokenId,
) -> Result<Option<(usize, EventKind)>> {
    let last = trace.last();
    for layer in 0..trace.n_layers() {
        for (kind, comp) in [(EventKind::Attn, Component::Attn), (EventKind::Mlp, Component::Mlp)] {
            let x = trace.component(layer, comp, last)?;
            if component_top1(model, x) == target {
                return Ok(Some((layer, kind)));
            }
        }
    }
    Ok(None)
}

/// Per-layer first-event rates. `final_predictions[i]` is the model's final
/// prediction `t*` for `examples[i]`.
pub fn extraction_profile(
    model: &ModelHandle,
    examples: &[(&str, &ForwardTrace)],
    final_predictions: &[TokenId],
) -> Result<ExtractionProfile> {
    if examples.len() != final_predictions.len() {
        return Err(Error::Dimension(format!(
            "{} traces but {} final predictions",
            examples.len(),
            final_predictions.len()
        )));
    }
    let n_layers = model.n_layers();
    let mut attn = vec![0usize; n_layers];
    let mut mlp = vec![0usize; n_layers];
    let mut first_event_layer = BTreeMap::new();
    let mut first_event_kind = BTreeMap::new();
    for ((id, trace), &t) in examples.iter().zip(final_predictions) {
        let ev = first_extraction_event(model, trace, t)?;
        match ev {
            Some((l, EventKind::Attn)) => attn[l] += 1,
            Some((l, EventKind::Mlp)) => mlp[l] += 1,
            None => {}
        }
        first_event_layer.insert(id.to_string(), ev.map(|e| e.0));
        first_event_kind.insert(id.to_string(), ev.map(|e| e.1));
    }
    let n = examples.len();
    let rate = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    Ok(ExtractionProfile {
        n_examples: n,
        per_layer_attn_rate: (0..n_layers).map(|l| (l, rate(attn[l]))).collect(),
        per_layer_mlp_rate: (0..n_layers).map(|l| (l, rate(mlp[l]))).collect(),
        first_event_layer,
        first_event_kind,
    })
}

// ---------------------------------------------------------------------------
// Aggregation and output
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankAggregate {
    #[default]
    Mean,
    Median,
}

/// Aggregate one value per example per layer into a single value per layer.
pub fn aggregate_by_layer(
    values: &[&BTreeMap<usize, usize>],
    how: RankAggregate,
) -> BTreeMap<usize, f64> {
    let mut per_layer: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for m in values {
        for (&l, &r) in m.iter() {
            per_layer.entry(l).or_default().push(r);
        }
    }
    per_layer
        .into_iter()
        .map(|(l, mut rs)| {
            let v = match how {
                RankAggregate::Mean => rs.iter().sum::<usize>() as f64 / rs.len() as f64,
                RankAggregate::Median => {
                    rs.sort_unstable();
                    let m = rs.len() / 2;
                    if rs.len() % 2 == 1 {
                        rs[m] as f64
                    } else {
                        (rs[m - 1] + rs[m]) as f64 / 2.0
                    }
                }
            };
            (l, v)
        })
        .collect()
}

/// One long-format diagnostic value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub example_id: String,
    pub language: String,
    pub relation_id: String,
    pub layer: usize,
    pub metric: String,
    pub value: f64,
}

pub fn diagnostics_csv(rows: &[DiagnosticRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::Domain(format!("csv buffer: {e}")))
}

/// Mean of each metric per `(language, layer)`, shaped
/// `{metric: {language: {layer: value}}}`.
pub fn aggregate_json(rows: &[DiagnosticRow]) -> serde_json::Value {
    let mut acc: BTreeMap<&str, BTreeMap<&str, BTreeMap<usize, (f64, usize)>>> = BTreeMap::new();
    for r in rows {
        let e = acc
            .entry(&r.metric)
            .or_default()
            .entry(&r.language)
            .or_default()
            .entry(r.layer)
            .or_insert((0.0, 0));
        e.0 += r.value;
        e.1 += 1;
    }
    let mut out = serde_json::Map::new();
    for (metric, langs) in acc {
        let mut lm = serde_json::Map::new();
        for (lang, layers) in langs {
            let mut m = serde_json::Map::new();
            for (l, (s, n)) in layers {
                m.insert(l.to_string(), serde_json::json!(s / n as f64));
            }
            lm.insert(lang.to_string(), m.into());
        }
        out.insert(metric.to_string(), lm.into());
    }
    out.into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answer_matching() {
        assert!(token_matches_answer("Budd", "Buddhism"));
        assert!(token_matches_answer("Buddhism", "Budd"));
        assert!(token_matches_answer(" budd", "Buddhism"));
        assert!(!token_matches_answer("WHAT", "mammals"));
        assert!(!token_matches_answer("  ", "mammals"));
        assert!(token_matches_answer("佛", "佛教"));
        assert!(!token_matches_answer("仏", "佛教"));
    }

    #[test]
    fn rank_ties_go_to_lower_id() {
        let p = [0.25, 0.25, 0.5];
        assert_eq!(rank_of(&p, 2), 0);
        assert_eq!(rank_of(&p, 0), 1);
        assert_eq!(rank_of(&p, 1), 2);
    }

    #[test]
    fn median_and_mean() {
        let a: BTreeMap<usize, usize> = [(0, 1), (1, 4)].into();
        let b: BTreeMap<usize, usize> = [(0, 3), (1, 4)].into();
        let c: BTreeMap<usize, usize> = [(0, 8)].into();
        let mean = aggregate_by_layer(&[&a, &b, &c], RankAggregate::Mean);
        assert_eq!(mean[&0], 4.0);
        let med = aggregate_by_layer(&[&a, &b, &c], RankAggregate::Median);
        assert_eq!(med[&0], 3.0);
        assert_eq!(med[&1], 4.0);
    }
}
