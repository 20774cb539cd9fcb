// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal attribution: activation patching with AIE, attention knockout and
//! head ablation.

mod heads;
mod knockout;

use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{render_prompt, FactSet, FactTriple, Language};
use crate::error::{Error, Result};
use crate::linalg::softmax;
use crate::manifest::derive_seed;
use crate::model::{
    forward_with_cache, run_with_interventions, CaptureFilter, Component, ForwardTrace,
    Intervention, ModelHandle, Positions, TokenId,
};

pub use heads::{ablate_heads, head_means, rank_heads_by_aie, AblationEffect, HeadAblationMode, HeadRanking};
pub use knockout::{
    knockout_sweep, knockout_window, resolve_positions, KnockoutDelta, KnockoutPlan,
    PromptPositions, SourceSet,
};

/// Default AIE layer sweep.
pub const AIE_LAYERS: std::ops::RangeInclusive<usize> = 21..=27;

/// Minimum clean/corrupted probability gap for a usable AIE denominator.
pub const MIN_GAP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSetup {
    pub clean: Vec<TokenId>,
    pub corrupted: Vec<TokenId>,
    pub target: TokenId,
}

impl PatchSetup {
    pub fn new(clean: Vec<TokenId>, corrupted: Vec<TokenId>, target: TokenId) -> Result<Self> {
        if clean.len() != corrupted.len() {
            return Err(Error::Dimension(format!(
                "clean prompt has {} tokens, corrupted has {}",
                clean.len(),
                corrupted.len()
            )));
        }
        Ok(PatchSetup {
            clean,
            corrupted,
            target,
        })
    }
}

/// One patched component: clean value written into the corrupted run.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchSite {
    pub layer: usize,
    pub component: Component,
    pub positions: Positions,
}

impl PatchSite {
    pub fn last(layer: usize, component: Component) -> Self {
        PatchSite {
            layer,
            component,
            positions: Positions::Only(vec![crate::model::Position::Last]),
        }
    }
}

/// Probability of `target` at the last position.
pub fn target_prob(trace: &ForwardTrace, target: TokenId) -> f64 {
    softmax(trace.last_logits())[target as usize]
}

/// Clean and corrupted runs of one setup, reused across many patches.
pub struct AieRunner<'m> {
    model: &'m ModelHandle,
    setup: PatchSetup,
    clean: Arc<ForwardTrace>,
    pub p_clean: f64,
    pub p_corrupted: f64,
}

impl<'m> AieRunner<'m> {
    pub fn new(model: &'m ModelHandle, setup: PatchSetup) -> Result<Self> {
        if setup.target as usize >= model.vocab_size() {
            return Err(Error::Index(format!(
                "target token {} outside vocabulary",
                setup.target
            )));
        }
        let capture = CaptureFilter::all()
            .with_attn_weights(false)
            .with_mlp_hidden(false);
        let clean = forward_with_cache(model, &setup.clean, &capture)?;
        let corrupted = forward_with_cache(model, &setup.corrupted, &CaptureFilter::last_position())?;
        let p_clean = target_prob(&clean, setup.target);
        let p_corrupted = target_prob(&corrupted, setup.target);
        let gap = p_clean - p_corrupted;
        if gap.abs() < MIN_GAP {
            return Err(Error::DegenerateGap { gap });
        }
        Ok(AieRunner {
            model,
            setup,
            clean: Arc::new(clean),
            p_clean,
            p_corrupted,
        })
    }

    pub fn clean_trace(&self) -> &ForwardTrace {
        &self.clean
    }

    /// Target probability of the corrupted run with every site in `sites`
    /// restored from the clean run.
    pub fn patched_prob(&self, sites: &[PatchSite]) -> Result<f64> {
        let ivs: Vec<Intervention> = sites
            .iter()
            .map(|s| Intervention::ActivationPatch {
                layer: s.layer,
                component: s.component,
                positions: s.positions.clone(),
                donor: Arc::clone(&self.clean),
            })
            .collect();
        let capture = CaptureFilter::last_position().with_layers([]);
        let t = run_with_interventions(self.model, &self.setup.corrupted, &ivs, &capture)?;
        Ok(target_prob(&t, self.setup.target))
    }

    /// `(P*_patched[o] - P*[o]) / (P[o] - P*[o])` for the joint patch.
    pub fn aie(&self, sites: &[PatchSite]) -> Result<f64> {
        if sites.is_empty() {
            return Ok(0.0);
        }
        let p = self.patched_prob(sites)?;
        Ok((p - self.p_corrupted) / (self.p_clean - self.p_corrupted))
    }
}

/// AIE of restoring a single component.
pub fn aie(model: &ModelHandle, setup: &PatchSetup, site: &PatchSite) -> Result<f64> {
    AieRunner::new(model, setup.clone())?.aie(std::slice::from_ref(site))
}

// ---------------------------------------------------------------------------
// Counterfactual corruption
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterpart {
    /// English subject of the donor triple.
    pub subject_en: String,
    pub prompt: String,
    pub tokens: Vec<TokenId>,
}

/// Swap the subject span of `triple`'s prompt for a same-relation subject of
/// equal token length. The choice is seeded per (language, triple).
pub fn corrupt_counterpart(
    model: &ModelHandle,
    triple: &FactTriple,
    pool: &FactSet,
    language: &Language,
    seed: u64,
) -> Result<Counterpart> {
    let tok = model.tokenizer();
    let prompt = render_prompt(triple, language)?;
    let subject = triple.subject_in(language)?;
    if !prompt.contains(subject) {
        return Err(Error::PositionResolution(format!(
            "subject `{subject}` not found in prompt `{prompt}`"
        )));
    }
    let clean_len = tok.encode_with_bos(prompt).len();
    let subj_len = tok.encode(subject).len();
    let mut options: Vec<(&FactTriple, String)> = Vec::new();
    for other in pool.of_relation(&triple.relation_id) {
        if other.key() == triple.key() {
            continue;
        }
        let Ok(alt) = other.subject_in(language) else {
            continue;
        };
        if alt == subject || tok.encode(alt).len() != subj_len {
            continue;
        }
        let swapped = prompt.replacen(subject, alt, 1);
        if tok.encode_with_bos(&swapped).len() == clean_len {
            options.push((other, swapped));
        }
    }
    options.sort_by(|a, b| a.0.key().cmp(&b.0.key()));
    let label = format!("corrupt/{language}/{}", triple.key());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &label));
    let (other, swapped) = options.choose(&mut rng).ok_or_else(|| {
        Error::NoCounterpart(format!(
            "no length-matched subject for {} in `{language}`",
            triple.key()
        ))
    })?;
    Ok(Counterpart {
        subject_en: other.subject_english().to_string(),
        tokens: tok.encode_with_bos(swapped),
        prompt: swapped.clone(),
    })
}

// ---------------------------------------------------------------------------
// Output rows
// ---------------------------------------------------------------------------

/// Long-format sweep value; `head` is empty for non-head components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub example_id: String,
    pub layer: usize,
    pub component: String,
    pub head: Option<usize>,
    pub metric: String,
    pub value: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::Domain(format!("csv buffer: {e}")))
}

/// AIE of every (layer, kind) site at the last position, for layers in
/// `layers` clipped to the model depth.
pub fn component_aie_sweep(
    runner: &AieRunner<'_>,
    example_id: &str,
    layers: &[usize],
    heads: bool,
) -> Result<Vec<SweepRow>> {
    let n_layers = runner.model.n_layers();
    let mut rows = Vec::new();
    for &l in layers.iter().filter(|&&l| l < n_layers) {
        let mut comps = vec![Component::Attn, Component::Mlp];
        if heads {
            comps.extend((0..runner.model.n_heads()).map(Component::Head));
        }
        for c in comps {
            let v = runner.aie(&[PatchSite::last(l, c)])?;
            let (component, head) = match c {
                Component::Head(h) => ("head".to_string(), Some(h)),
                other => (other.to_string(), None),
            };
            rows.push(SweepRow {
                example_id: example_id.to_string(),
                layer: l,
                component,
                head,
                metric: "aie".into(),
                value: v,
            });
        }
    }
    Ok(rows)
}
