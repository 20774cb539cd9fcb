// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward pass with activation capture and interventions.

use std::collections::{BTreeSet, HashSet};

use super::{
    AblationMode, CaptureFilter, Component, ForwardTrace, Intervention, ModelHandle, Position,
    Positions, TokenId,
};
use crate::error::{Error, Result};
use crate::linalg::{add_assign, dot, rms_norm, silu, softmax};

/// Plain forward pass that records the activations selected by `capture`.
pub fn forward_with_cache(
    model: &ModelHandle,
    prompt: &[TokenId],
    capture: &CaptureFilter,
) -> Result<ForwardTrace> {
    run_with_interventions(model, prompt, &[], capture)
}

/// Forward pass applying `interventions` in list order at each site.
pub fn run_with_interventions(
    model: &ModelHandle,
    prompt: &[TokenId],
    interventions: &[Intervention],
    capture: &CaptureFilter,
) -> Result<ForwardTrace> {
    let cfg = model.config();
    if prompt.is_empty() {
        return Err(Error::Domain("prompt must contain at least one token".into()));
    }
    if prompt.len() > cfg.max_context {
        return Err(Error::ContextLength {
            len: prompt.len(),
            max: cfg.max_context,
        });
    }
    if let Some(&bad) = prompt.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Index(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    for iv in interventions {
        iv.validate(cfg, prompt.len())?;
    }

    let t = prompt.len();
    let n_heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let w = model.weights();
    let mut trace = ForwardTrace {
        prompt: prompt.to_vec(),
        n_layers: cfg.n_layers,
        n_heads,
        d_model: cfg.d_model,
        ..Default::default()
    };
    let keep = |l: usize, p: usize| capture.layer(l) && capture.position(p, t);

    let mut resid: Vec<Vec<f32>> = prompt
        .iter()
        .map(|&tok| w.embed.row(tok as usize).to_vec())
        .collect();

    for (layer, lw) in w.layers.iter().enumerate() {
        apply_resid_site(layer, &mut resid, interventions);
        for (p, h) in resid.iter().enumerate() {
            if keep(layer, p) {
                trace.residual_pre.insert((layer, p), h.clone());
            }
        }

        // Attention.
        let x: Vec<Vec<f32>> = resid
            .iter()
            .map(|h| rms_norm(h, &lw.attn_norm, cfg.norm_eps))
            .collect();
        let mut q: Vec<Vec<f32>> = x.iter().map(|v| lw.w_q.matvec(v)).collect();
        let mut k: Vec<Vec<f32>> = x.iter().map(|v| lw.w_k.matvec(v)).collect();
        let v: Vec<Vec<f32>> = x.iter().map(|v| lw.w_v.matvec(v)).collect();
        for p in 0..t {
            for head in 0..n_heads {
                let r = head * dh..(head + 1) * dh;
                apply_rope(&mut q[p][r.clone()], p, cfg.rope_base);
                apply_rope(&mut k[p][r], p, cfg.rope_base);
            }
        }
        let masked = knockout_edges(layer, t, interventions);
        let inv_sqrt = 1.0 / (dh as f32).sqrt();

        let mut head_out = vec![vec![vec![0.0f32; cfg.d_model]; t]; n_heads];
        for (head, outs) in head_out.iter_mut().enumerate() {
            let r = head * dh..(head + 1) * dh;
            let mut pattern = Vec::with_capacity(t);
            for qp in 0..t {
                let scores: Vec<f32> = (0..t)
                    .map(|kp| {
                        if kp > qp || masked.contains(&(qp, kp)) {
                            f32::NEG_INFINITY
                        } else {
                            dot(&q[qp][r.clone()], &k[kp][r.clone()]) * inv_sqrt
                        }
                    })
                    .collect();
                let weights: Vec<f32> = softmax(&scores).into_iter().map(|p| p as f32).collect();
                let mut z = vec![0.0f32; dh];
                for (kp, &a) in weights.iter().enumerate().take(qp + 1) {
                    if a != 0.0 {
                        for (zi, vi) in z.iter_mut().zip(&v[kp][r.clone()]) {
                            *zi += a * vi;
                        }
                    }
                }
                outs[qp] = lw.w_o.matvec_cols(r.start, r.end, &z);
                pattern.push(weights);
            }
            if capture.attn_weights && capture.layer(layer) {
                trace.attn_weights.insert((layer, head), pattern);
            }
        }
        apply_head_edits(layer, t, &mut head_out, interventions);

        let mut attn_out = vec![vec![0.0f32; cfg.d_model]; t];
        for outs in &head_out {
            for (acc, o) in attn_out.iter_mut().zip(outs) {
                add_assign(acc, o);
            }
        }
        apply_patches(layer, Component::Attn, &mut attn_out, interventions);

        // MLP.
        let mut mid = resid;
        for (m, a) in mid.iter_mut().zip(&attn_out) {
            add_assign(m, a);
        }
        let mut hidden = Vec::with_capacity(t);
        let mut mlp_out: Vec<Vec<f32>> = Vec::with_capacity(t);
        for m in &mid {
            let y = rms_norm(m, &lw.mlp_norm, cfg.norm_eps);
            let gate = lw.w_gate.matvec(&y);
            let up = lw.w_up.matvec(&y);
            let act: Vec<f32> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
            mlp_out.push(lw.w_down.matvec(&act));
            hidden.push(act);
        }
        apply_patches(layer, Component::Mlp, &mut mlp_out, interventions);

        for p in 0..t {
            if keep(layer, p) {
                trace.attn_out.insert((layer, p), attn_out[p].clone());
                trace.mlp_out.insert((layer, p), mlp_out[p].clone());
                if capture.mlp_hidden {
                    trace.mlp_hidden.insert((layer, p), hidden[p].clone());
                }
                if capture.heads {
                    for (head, outs) in head_out.iter().enumerate() {
                        trace.head_out.insert((layer, head, p), outs[p].clone());
                    }
                }
            }
        }

        for (m, o) in mid.iter_mut().zip(&mlp_out) {
            add_assign(m, o);
        }
        resid = mid;
    }

    let n = cfg.n_layers;
    apply_resid_site(n, &mut resid, interventions);
    for (p, h) in resid.iter().enumerate() {
        if keep(n, p) {
            trace.residual_pre.insert((n, p), h.clone());
        }
    }
    trace.final_logits = resid.iter().map(|h| model.unembed_normed(h)).collect();
    Ok(trace)
}

fn apply_rope(x: &mut [f32], pos: usize, base: f32) {
    let dh = x.len();
    let half = dh / 2;
    for i in 0..half {
        let theta = pos as f32 * base.powf(-2.0 * i as f32 / dh as f32);
        let (s, c) = theta.sin_cos();
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        x[2 * i] = a * c - b * s;
        x[2 * i + 1] = a * s + b * c;
    }
}

fn apply_resid_site(layer: usize, resid: &mut [Vec<f32>], interventions: &[Intervention]) {
    let t = resid.len();
    for iv in interventions {
        match iv {
            Intervention::ResidualAdd {
                layer: l,
                position,
                vector,
                scale,
                ..
            } if *l == layer => {
                let p = position.resolve(t);
                for (h, v) in resid[p].iter_mut().zip(vector.iter()) {
                    *h += scale * v;
                }
            }
            Intervention::ActivationPatch {
                layer: l,
                component: Component::Resid,
                positions,
                donor,
            } if *l == layer => {
                for p in positions.resolve(t) {
                    // validated before the pass
                    resid[p] = donor.residual_pre(layer, p).expect("validated").to_vec();
                }
            }
            _ => {}
        }
    }
}

fn knockout_edges(
    layer: usize,
    t: usize,
    interventions: &[Intervention],
) -> HashSet<(usize, usize)> {
    let mut edges = HashSet::new();
    for iv in interventions {
        if let Intervention::AttentionKnockout {
            layers,
            query,
            keys,
        } = iv
        {
            if layers.contains(&layer) {
                let qp = query.resolve(t);
                edges.extend(keys.iter().map(|&k| (qp, k)));
            }
        }
    }
    edges
}

fn apply_head_edits(
    layer: usize,
    t: usize,
    head_out: &mut [Vec<Vec<f32>>],
    interventions: &[Intervention],
) {
    for iv in interventions {
        match iv {
            Intervention::HeadAblation {
                layer: l,
                heads,
                positions,
                mode,
            } if *l == layer => {
                for (i, &h) in heads.iter().enumerate() {
                    for p in positions.resolve(t) {
                        match mode {
                            AblationMode::Zero => head_out[h][p].iter_mut().for_each(|x| *x = 0.0),
                            AblationMode::Mean(means) => head_out[h][p].clone_from(&means[i]),
                        }
                    }
                }
            }
            Intervention::ActivationPatch {
                layer: l,
                component: Component::Head(h),
                positions,
                donor,
            } if *l == layer => {
                for p in positions.resolve(t) {
                    head_out[*h][p] = donor.head_out(layer, *h, p).expect("validated").to_vec();
                }
            }
            _ => {}
        }
    }
}

fn apply_patches(
    layer: usize,
    component: Component,
    out: &mut [Vec<f32>],
    interventions: &[Intervention],
) {
    let t = out.len();
    for iv in interventions {
        if let Intervention::ActivationPatch {
            layer: l,
            component: c,
            positions,
            donor,
        } = iv
        {
            if *l == layer && *c == component {
                for p in positions.resolve(t) {
                    out[p] = donor.component(layer, component, p).expect("validated").to_vec();
                }
            }
        }
    }
}

/// Rewrite interventions for a generation step: symbolic `Last` positions
/// cover the prompt's final token and every generated token, mirroring a
/// hooked decode loop with a key/value cache.
fn expand_for_step(interventions: &[Intervention], prompt_len: usize, seq_len: usize) -> Vec<Intervention> {
    let tail: Vec<usize> = (prompt_len - 1..seq_len).collect();
    let mut out = Vec::with_capacity(interventions.len());
    for iv in interventions {
        match iv {
            Intervention::ResidualAdd {
                layer,
                position: Position::Last,
                vector,
                scale,
                source,
            } => {
                for &p in &tail {
                    out.push(Intervention::ResidualAdd {
                        layer: *layer,
                        position: Position::At(p),
                        vector: vector.clone(),
                        scale: *scale,
                        source: source.clone(),
                    });
                }
            }
            Intervention::AttentionKnockout {
                layers,
                query: Position::Last,
                keys,
            } => {
                for &p in &tail {
                    out.push(Intervention::AttentionKnockout {
                        layers: layers.clone(),
                        query: Position::At(p),
                        keys: keys.clone(),
                    });
                }
            }
            Intervention::HeadAblation {
                layer,
                heads,
                positions: Positions::Only(ps),
                mode,
            } => {
                let mut expanded = BTreeSet::new();
                for p in ps {
                    match p {
                        Position::Last => expanded.extend(tail.iter().copied()),
                        Position::At(i) => {
                            expanded.insert(*i);
                        }
                    }
                }
                out.push(Intervention::HeadAblation {
                    layer: *layer,
                    heads: heads.clone(),
                    positions: Positions::Only(expanded.into_iter().map(Position::At).collect()),
                    mode: mode.clone(),
                });
            }
            other => out.push(other.clone()),
        }
    }
    out
}

/// Greedy decoding of up to `max_new_tokens` tokens.
pub fn generate(
    model: &ModelHandle,
    prompt: &[TokenId],
    interventions: &[Intervention],
    max_new_tokens: usize,
) -> Result<Vec<TokenId>> {
    let capture = CaptureFilter {
        layers: Some(BTreeSet::new()),
        positions: Some(Vec::new()),
        heads: false,
        attn_weights: false,
        mlp_hidden: false,
    };
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(max_new_tokens);
    for _ in 0..max_new_tokens {
        let step = expand_for_step(interventions, prompt.len(), seq.len());
        let trace = run_with_interventions(model, &seq, &step, &capture)?;
        let next = crate::linalg::argmax(trace.last_logits()) as TokenId;
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}
