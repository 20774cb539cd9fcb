// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared test helpers: a second, self-contained forward pass used as an
//! oracle, seeded prompt generators and hand-planted models.

#![allow(dead_code)]

use std::ops::Range;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recall_lens::dataset::{FactSet, CORE_LANGUAGES, RELATION_COUNTS};
use recall_lens::linalg::Matrix;
use recall_lens::model::{toy_model_fixture, ModelHandle, TokenId, ToyDims, Weights};

pub fn toy() -> ModelHandle {
    toy_model_fixture(7, ToyDims::default()).unwrap()
}

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn mini() -> FactSet {
    FactSet::load(&fixture_path("mini.jsonl")).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// BOS followed by `len - 1` uniformly drawn non-BOS ids.
pub fn random_prompt(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<TokenId> {
    let mut ids = vec![0];
    ids.extend((1..len).map(|_| rng.random_range(1..vocab as TokenId)));
    ids
}

pub fn random_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

// ---------------------------------------------------------------------------
// Reference forward pass
// ---------------------------------------------------------------------------

/// Edits understood by [`ref_forward`]; applied in list order like the
/// library's interventions.
#[derive(Debug, Clone)]
pub enum Edit {
    Add { layer: usize, pos: usize, vector: Vec<f32>, scale: f32 },
    SetResid { layer: usize, pos: usize, value: Vec<f32> },
    SetAttn { layer: usize, pos: usize, value: Vec<f32> },
    SetMlp { layer: usize, pos: usize, value: Vec<f32> },
    SetHead { layer: usize, head: usize, pos: usize, value: Vec<f32> },
    Knock { layers: Range<usize>, query: usize, keys: Vec<usize> },
}

#[derive(Debug, Clone)]
pub struct RefRun {
    /// `[layer 0..=n][pos]`
    pub resid: Vec<Vec<Vec<f32>>>,
    pub attn: Vec<Vec<Vec<f32>>>,
    pub mlp: Vec<Vec<Vec<f32>>>,
    /// `[layer][head][pos]`
    pub heads: Vec<Vec<Vec<Vec<f32>>>>,
    /// `[layer][head][query][key]`
    pub weights: Vec<Vec<Vec<Vec<f32>>>>,
    pub logits: Vec<Vec<f32>>,
}

impl RefRun {
    pub fn last_probs(&self) -> Vec<f64> {
        ref_softmax(self.logits.last().unwrap())
    }
}

fn rdot(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn rmatvec(m: &Matrix, x: &[f32]) -> Vec<f32> {
    (0..m.rows).map(|r| rdot(&m.data[r * m.cols..(r + 1) * m.cols], x)).collect()
}

fn rnorm(x: &[f32], g: &[f32], eps: f32) -> Vec<f32> {
    let mut ss = 0.0f32;
    for v in x {
        ss += v * v;
    }
    let inv = 1.0 / (ss / x.len() as f32 + eps).sqrt();
    x.iter().zip(g).map(|(v, g)| v * inv * g).collect()
}

pub fn ref_softmax(x: &[f32]) -> Vec<f64> {
    let mut m = f32::NEG_INFINITY;
    for &v in x {
        if v.is_finite() && v > m {
            m = v;
        }
    }
    if !m.is_finite() {
        return vec![0.0; x.len()];
    }
    let e: Vec<f64> = x
        .iter()
        .map(|&v| if v == f32::NEG_INFINITY { 0.0 } else { (v as f64 - m as f64).exp() })
        .collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn rotate(x: &mut [f32], pos: usize, base: f32) {
    let dh = x.len();
    for i in 0..dh / 2 {
        let theta = pos as f32 * base.powf(-2.0 * i as f32 / dh as f32);
        let (s, c) = theta.sin_cos();
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        x[2 * i] = a * c - b * s;
        x[2 * i + 1] = a * s + b * c;
    }
}

/// Plain nested-loop forward pass reading the weights directly.
pub fn ref_forward(model: &ModelHandle, tokens: &[TokenId], edits: &[Edit]) -> RefRun {
    let cfg = model.config();
    let w: &Weights = model.weights();
    let (t, nh, dh, d) = (tokens.len(), cfg.n_heads, cfg.head_dim(), cfg.d_model);
    let mut run = RefRun {
        resid: Vec::new(),
        attn: Vec::new(),
        mlp: Vec::new(),
        heads: Vec::new(),
        weights: Vec::new(),
        logits: Vec::new(),
    };
    let mut h: Vec<Vec<f32>> = tokens.iter().map(|&i| w.embed.row(i as usize).to_vec()).collect();
    let resid_edits = |layer: usize, h: &mut Vec<Vec<f32>>| {
        for e in edits {
            match e {
                Edit::Add { layer: l, pos, vector, scale } if *l == layer => {
                    for i in 0..d {
                        h[*pos][i] += scale * vector[i];
                    }
                }
                Edit::SetResid { layer: l, pos, value } if *l == layer => h[*pos] = value.clone(),
                _ => {}
            }
        }
    };
    for (layer, lw) in w.layers.iter().enumerate() {
        resid_edits(layer, &mut h);
        run.resid.push(h.clone());
        let x: Vec<Vec<f32>> = h.iter().map(|v| rnorm(v, &lw.attn_norm, cfg.norm_eps)).collect();
        let mut q: Vec<Vec<f32>> = x.iter().map(|v| rmatvec(&lw.w_q, v)).collect();
        let mut k: Vec<Vec<f32>> = x.iter().map(|v| rmatvec(&lw.w_k, v)).collect();
        let v: Vec<Vec<f32>> = x.iter().map(|v| rmatvec(&lw.w_v, v)).collect();
        for p in 0..t {
            for hd in 0..nh {
                rotate(&mut q[p][hd * dh..(hd + 1) * dh], p, cfg.rope_base);
                rotate(&mut k[p][hd * dh..(hd + 1) * dh], p, cfg.rope_base);
            }
        }
        let knocked = |qp: usize, kp: usize| {
            edits.iter().any(|e| match e {
                Edit::Knock { layers, query, keys } => {
                    layers.contains(&layer) && *query == qp && keys.contains(&kp)
                }
                _ => false,
            })
        };
        let scale = 1.0 / (dh as f32).sqrt();
        let mut heads = vec![vec![vec![0.0f32; d]; t]; nh];
        let mut pats = Vec::new();
        for hd in 0..nh {
            let cols = hd * dh..(hd + 1) * dh;
            let mut pat = Vec::new();
            for qp in 0..t {
                let mut s = vec![f32::NEG_INFINITY; t];
                for kp in 0..=qp {
                    if !knocked(qp, kp) {
                        s[kp] = rdot(&q[qp][cols.clone()], &k[kp][cols.clone()]) * scale;
                    }
                }
                let a: Vec<f32> = ref_softmax(&s).iter().map(|&p| p as f32).collect();
                let mut z = vec![0.0f32; dh];
                for kp in 0..=qp {
                    if a[kp] != 0.0 {
                        for j in 0..dh {
                            z[j] += a[kp] * v[kp][hd * dh + j];
                        }
                    }
                }
                for r in 0..d {
                    heads[hd][qp][r] = rdot(&lw.w_o.row(r)[cols.clone()], &z);
                }
                pat.push(a);
            }
            pats.push(pat);
        }
        for e in edits {
            if let Edit::SetHead { layer: l, head, pos, value } = e {
                if *l == layer {
                    heads[*head][*pos] = value.clone();
                }
            }
        }
        let mut attn = vec![vec![0.0f32; d]; t];
        for hd in 0..nh {
            for p in 0..t {
                for i in 0..d {
                    attn[p][i] += heads[hd][p][i];
                }
            }
        }
        for e in edits {
            if let Edit::SetAttn { layer: l, pos, value } = e {
                if *l == layer {
                    attn[*pos] = value.clone();
                }
            }
        }
        let mut mid = h.clone();
        for p in 0..t {
            for i in 0..d {
                mid[p][i] += attn[p][i];
            }
        }
        let mut mlp = Vec::new();
        for m in &mid {
            let y = rnorm(m, &lw.mlp_norm, cfg.norm_eps);
            let g = rmatvec(&lw.w_gate, &y);
            let u = rmatvec(&lw.w_up, &y);
            let act: Vec<f32> = g.iter().zip(&u).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            mlp.push(rmatvec(&lw.w_down, &act));
        }
        for e in edits {
            if let Edit::SetMlp { layer: l, pos, value } = e {
                if *l == layer {
                    mlp[*pos] = value.clone();
                }
            }
        }
        for p in 0..t {
            for i in 0..d {
                mid[p][i] += mlp[p][i];
            }
        }
        run.heads.push(heads);
        run.weights.push(pats);
        run.attn.push(attn);
        run.mlp.push(mlp);
        h = mid;
    }
    resid_edits(cfg.n_layers, &mut h);
    run.resid.push(h.clone());
    run.logits = h
        .iter()
        .map(|v| rmatvec(&w.unembed, &rnorm(v, &w.final_norm, cfg.norm_eps)))
        .collect();
    run
}

/// Index of the largest value, lowest index on ties, by a full sort.
pub fn sort_argmax(xs: &[f32]) -> usize {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[b].partial_cmp(&xs[a]).unwrap().then(a.cmp(&b)));
    idx[0]
}

// ---------------------------------------------------------------------------
// Planted models
// ---------------------------------------------------------------------------

fn rebuild(model: &ModelHandle, weights: Weights) -> ModelHandle {
    ModelHandle::from_parts(model.config().clone(), weights, model.tokenizer().clone(), "planted")
        .unwrap()
}

/// The seed-7 fixture with every attention head silenced (zero output
/// projection) except those in `keep`.
pub fn only_heads(keep: &[(usize, usize)]) -> ModelHandle {
    let base = toy();
    let mut w = base.weights().clone();
    let dh = base.config().head_dim();
    for (l, lw) in w.layers.iter_mut().enumerate() {
        for h in 0..base.n_heads() {
            if keep.contains(&(l, h)) {
                continue;
            }
            for r in 0..lw.w_o.rows {
                for c in h * dh..(h + 1) * dh {
                    lw.w_o.set(r, c, 0.0);
                }
            }
        }
    }
    rebuild(&base, w)
}

/// A one-layer model without attention whose MLP writes token `a` onto the
/// first residual axis and token `b` onto the second.
pub fn orthogonal_model(a: TokenId, b: TokenId) -> ModelHandle {
    let base = toy_model_fixture(7, ToyDims { n_layers: 1, ..ToyDims::default() }).unwrap();
    let cfg = base.config().clone();
    let (d, m, v) = (cfg.d_model, cfg.d_mlp, cfg.vocab_size);
    let mut w = base.weights().clone();
    w.embed = Matrix::zeros(v, d);
    w.embed.set(a as usize, 0, 1.0);
    w.embed.set(b as usize, 1, 1.0);
    let lw = &mut w.layers[0];
    lw.w_o = Matrix::zeros(d, d);
    lw.attn_norm = vec![1.0; d];
    lw.mlp_norm = vec![1.0; d];
    lw.w_gate = Matrix::zeros(m, d);
    lw.w_up = Matrix::zeros(m, d);
    lw.w_down = Matrix::zeros(d, m);
    for i in 0..2 {
        lw.w_gate.set(i, i, 1.0);
        lw.w_up.set(i, i, 1.0);
        lw.w_down.set(i, i, 1.0);
    }
    rebuild(&base, w)
}

// ---------------------------------------------------------------------------
// Synthetic datasets
// ---------------------------------------------------------------------------

/// A full-schema JSONL dataset with `n` triples per listed relation.
pub fn synthetic_jsonl(counts: &[(&str, usize)]) -> String {
    let mut out = String::new();
    for (rel, n) in counts {
        for i in 0..*n {
            let per = |f: &dyn Fn(&str) -> String| {
                serde_json::Value::Object(
                    CORE_LANGUAGES.iter().map(|l| (l.to_string(), f(l).into())).collect(),
                )
            };
            let subj = |l: &str| format!("{rel}-s{i}-{l}");
            let rec = serde_json::json!({
                "relation_id": rel,
                "subject": per(&subj),
                "prompt": per(&|l| format!("The {rel} of {} is", subj(l))),
                "answer": per(&|l| format!("a{i}-{l}")),
                "relation_tokens": serde_json::Value::Object(
                    CORE_LANGUAGES.iter().map(|l| (l.to_string(), serde_json::json!([rel]))).collect()
                ),
            });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
    }
    out
}

pub fn full_schema_set() -> FactSet {
    FactSet::parse_jsonl(&synthetic_jsonl(&RELATION_COUNTS)).unwrap()
}
