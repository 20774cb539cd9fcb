// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic fixture backend.
//!
//! Every tensor is drawn from its own ChaCha8 stream seeded with
//! `SHA-256(seed as u64 LE || tensor name)`. The i-th row-major element is
//! `scale * (2 * (next_u32() >> 8) / 2^24 - 1)`, i.e. uniform in
//! `[-scale, scale)`. Norm gains are `1 + 0.1 * u` with `u` drawn the same way.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{LayerWeights, ModelConfig, ModelHandle, Tokenizer, Weights, ARCHITECTURE};
use crate::error::Result;
use crate::linalg::Matrix;

/// Named pieces of the fixture vocabulary (after `<bos>`).
pub const TOY_WORDS: &[&str] = &[
    "The", "the", "of", "in", "is", "a", "was", "language", "official", "main", "religion",
    "practiced", "color", "has", "currency", "called", "birth", "country", "instrument",
    "played", "by", "primary", "college", "attended", "classified", "biologically", "as",
    "family", "belongs", "to", "written", "originally", "Please", "translate", "this", "word",
    "into", "Word", ":", ",", "Translation", "English", "Buddhism", "mammal", "red", "piano",
    "Spanish",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyDims {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
}

impl Default for ToyDims {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 2,
            d_model: 16,
            vocab_size: 64,
        }
    }
}

/// Regenerate the raw values of one fixture tensor.
pub fn toy_tensor_values(seed: u64, name: &str, len: usize, scale: f32) -> Vec<f32> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let mut key = [0u8; 32];
    key.copy_from_slice(&h.finalize());
    let mut rng = ChaCha8Rng::from_seed(key);
    (0..len)
        .map(|_| {
            let u = (rng.next_u32() >> 8) as f32 / 16_777_216.0;
            scale * (2.0 * u - 1.0)
        })
        .collect()
}

fn gain(seed: u64, name: &str, len: usize) -> Vec<f32> {
    toy_tensor_values(seed, name, len, 1.0)
        .into_iter()
        .map(|u| 1.0 + 0.1 * u)
        .collect()
}

/// Build the deterministic pre-norm fixture for `(seed, dims)`.
pub fn toy_model_fixture(seed: u64, dims: ToyDims) -> Result<ModelHandle> {
    let config = ModelConfig {
        architecture: ARCHITECTURE.into(),
        n_layers: dims.n_layers,
        n_heads: dims.n_heads,
        d_model: dims.d_model,
        d_mlp: 4 * dims.d_model,
        vocab_size: dims.vocab_size,
        max_context: 512,
        rope_base: 10_000.0,
        norm_eps: 1e-5,
    };
    config.validate()?;
    let d = config.d_model;
    let m = config.d_mlp;
    let v = config.vocab_size;
    let mat = |name: &str, rows: usize, cols: usize, scale: f32| {
        Matrix::from_vec(rows, cols, toy_tensor_values(seed, name, rows * cols, scale))
    };
    let attn_scale = 1.0 / (d as f32).sqrt();
    let layers = (0..config.n_layers)
        .map(|l| LayerWeights {
            attn_norm: gain(seed, &format!("layers.{l}.attn_norm"), d),
            w_q: mat(&format!("layers.{l}.wq"), d, d, attn_scale),
            w_k: mat(&format!("layers.{l}.wk"), d, d, attn_scale),
            w_v: mat(&format!("layers.{l}.wv"), d, d, attn_scale),
            w_o: mat(&format!("layers.{l}.wo"), d, d, attn_scale),
            mlp_norm: gain(seed, &format!("layers.{l}.mlp_norm"), d),
            w_gate: mat(&format!("layers.{l}.w_gate"), m, d, attn_scale),
            w_up: mat(&format!("layers.{l}.w_up"), m, d, attn_scale),
            w_down: mat(&format!("layers.{l}.w_down"), d, m, 1.0 / (m as f32).sqrt()),
        })
        .collect();
    let weights = Weights {
        embed: mat("embed", v, d, 1.0),
        layers,
        final_norm: gain(seed, "final_norm", d),
        unembed: mat("unembed", v, d, 1.0),
    };
    let tokenizer = Tokenizer::with_vocab_size(TOY_WORDS, v)?;
    ModelHandle::from_parts(config, weights, tokenizer, "toy")
}
