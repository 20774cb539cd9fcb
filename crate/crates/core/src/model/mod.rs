// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hooked access to a pre-norm decoder-only transformer.
//!
//! The built-in backend (`prenorm-decoder`) is a Llama-style stack: RMSNorm
//! before attention and MLP, rotary position embeddings, SwiGLU MLP and an
//! untied unembedding. [`toy_model_fixture`] generates one deterministically
//! from a seed; [`load_model`] resolves `toy:` locators and checkpoint files.

mod forward;
mod intervention;
mod tokenizer;
mod toy;
mod trace;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::linalg::{rms_norm, Matrix};

pub use forward::{forward_with_cache, generate, run_with_interventions};
pub use intervention::{fingerprint as intervention_fingerprint, AblationMode, Component, Intervention, Position, Positions};
pub use tokenizer::{is_cjk_char, segment, TokenId, Tokenizer, TokenizerSpec, BOS};
pub use toy::{toy_model_fixture, toy_tensor_values, ToyDims, TOY_WORDS};
pub use trace::{CaptureFilter, ForwardTrace};

pub const ARCHITECTURE: &str = "prenorm-decoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: String,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub rope_base: f32,
    pub norm_eps: f32,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.architecture != ARCHITECTURE {
            return Err(Error::Capability(format!(
                "architecture `{}` is not supported (expected `{ARCHITECTURE}`)",
                self.architecture
            )));
        }
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_mlp == 0 {
            return Err(Error::Dimension(
                "n_layers, n_heads, d_model and d_mlp must be positive".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Dimension(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 2 || self.max_context == 0 {
            return Err(Error::Dimension("vocab_size >= 2 and max_context >= 1 required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    /// `[d_model, d_model]`; rows `h*dh..(h+1)*dh` belong to head `h`.
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    /// `[d_model, d_model]`; columns `h*dh..(h+1)*dh` read head `h`.
    pub w_o: Matrix,
    pub mlp_norm: Vec<f32>,
    /// `[d_mlp, d_model]`
    pub w_gate: Matrix,
    /// `[d_mlp, d_model]`
    pub w_up: Matrix,
    /// `[d_model, d_mlp]`
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// `[vocab, d_model]`
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    /// `[vocab, d_model]`
    pub unembed: Matrix,
}

/// A loaded model: configuration, weights and tokenizer.
///
/// Forward passes borrow the handle immutably; independent passes may run
/// concurrently on the same handle.
#[derive(Debug, Clone)]
pub struct ModelHandle {
    config: ModelConfig,
    weights: Weights,
    tokenizer: Tokenizer,
    backend_id: String,
    fingerprint: String,
}

impl ModelHandle {
    pub fn from_parts(
        config: ModelConfig,
        weights: Weights,
        tokenizer: Tokenizer,
        backend_id: impl Into<String>,
    ) -> Result<Self> {
        config.validate()?;
        check_weights(&config, &weights)?;
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(Error::Dimension(format!(
                "tokenizer has {} ids, model vocab is {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        let mut handle = Self {
            config,
            weights,
            tokenizer,
            backend_id: backend_id.into(),
            fingerprint: String::new(),
        };
        handle.fingerprint = hex::encode(Sha256::digest(handle.to_container().to_bytes()));
        Ok(handle)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }
    pub fn n_heads(&self) -> usize {
        self.config.n_heads
    }
    pub fn d_model(&self) -> usize {
        self.config.d_model
    }
    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }
    pub fn weights(&self) -> &Weights {
        &self.weights
    }
    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }
    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }
    /// SHA-256 over the serialized checkpoint.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }
    pub fn unembedding(&self) -> &Matrix {
        &self.weights.unembed
    }

    /// Final RMS normalisation applied before unembedding.
    pub fn final_norm(&self, x: &[f32]) -> Vec<f32> {
        rms_norm(x, &self.weights.final_norm, self.config.norm_eps)
    }

    /// `E · final_norm(x)`.
    pub fn unembed_normed(&self, x: &[f32]) -> Vec<f32> {
        self.weights.unembed.matvec(&self.final_norm(x))
    }

    /// `E · x` without normalisation, used for component-output decoding.
    pub fn unembed_raw(&self, x: &[f32]) -> Vec<f32> {
        self.weights.unembed.matvec(x)
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "config": self.config,
            "tokenizer": self.tokenizer.spec(),
        });
        let mut c = Container::new(meta);
        let w = &self.weights;
        let push_m = |c: &mut Container, name: String, m: &Matrix| {
            c.push(name, vec![m.rows, m.cols], m.data.clone())
        };
        push_m(&mut c, "embed".into(), &w.embed);
        for (l, lw) in w.layers.iter().enumerate() {
            c.push(format!("layers.{l}.attn_norm"), vec![lw.attn_norm.len()], lw.attn_norm.clone());
            push_m(&mut c, format!("layers.{l}.wq"), &lw.w_q);
            push_m(&mut c, format!("layers.{l}.wk"), &lw.w_k);
            push_m(&mut c, format!("layers.{l}.wv"), &lw.w_v);
            push_m(&mut c, format!("layers.{l}.wo"), &lw.w_o);
            c.push(format!("layers.{l}.mlp_norm"), vec![lw.mlp_norm.len()], lw.mlp_norm.clone());
            push_m(&mut c, format!("layers.{l}.w_gate"), &lw.w_gate);
            push_m(&mut c, format!("layers.{l}.w_up"), &lw.w_up);
            push_m(&mut c, format!("layers.{l}.w_down"), &lw.w_down);
        }
        c.push("final_norm", vec![w.final_norm.len()], w.final_norm.clone());
        push_m(&mut c, "unembed".into(), &w.unembed);
        c
    }

    pub fn from_container(c: &Container, backend_id: &str) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(
            c.meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint metadata lacks `config`".into()))?,
        )?;
        config.validate()?;
        let spec: TokenizerSpec = serde_json::from_value(
            c.meta
                .get("tokenizer")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint metadata lacks `tokenizer`".into()))?,
        )?;
        let mat = |name: &str| -> Result<Matrix> {
            let t = c.require(name)?;
            if t.shape.len() != 2 {
                return Err(Error::Format(format!("`{name}` must be 2-D")));
            }
            Ok(Matrix::from_vec(t.shape[0], t.shape[1], t.data.clone()))
        };
        let vector = |name: &str| -> Result<Vec<f32>> { Ok(c.require(name)?.data.clone()) };
        let layers = (0..config.n_layers)
            .map(|l| {
                Ok(LayerWeights {
                    attn_norm: vector(&format!("layers.{l}.attn_norm"))?,
                    w_q: mat(&format!("layers.{l}.wq"))?,
                    w_k: mat(&format!("layers.{l}.wk"))?,
                    w_v: mat(&format!("layers.{l}.wv"))?,
                    w_o: mat(&format!("layers.{l}.wo"))?,
                    mlp_norm: vector(&format!("layers.{l}.mlp_norm"))?,
                    w_gate: mat(&format!("layers.{l}.w_gate"))?,
                    w_up: mat(&format!("layers.{l}.w_up"))?,
                    w_down: mat(&format!("layers.{l}.w_down"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let weights = Weights {
            embed: mat("embed")?,
            layers,
            final_norm: vector("final_norm")?,
            unembed: mat("unembed")?,
        };
        Self::from_parts(config, weights, Tokenizer::new(spec)?, backend_id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }
}

fn check_weights(cfg: &ModelConfig, w: &Weights) -> Result<()> {
    let d = cfg.d_model;
    let expect = |what: &str, m: &Matrix, rows: usize, cols: usize| -> Result<()> {
        if m.rows != rows || m.cols != cols {
            return Err(Error::Dimension(format!(
                "{what} is {}x{}, expected {rows}x{cols}",
                m.rows, m.cols
            )));
        }
        Ok(())
    };
    let expect_len = |what: &str, v: &[f32], n: usize| -> Result<()> {
        if v.len() != n {
            return Err(Error::Dimension(format!("{what} has length {}, expected {n}", v.len())));
        }
        Ok(())
    };
    expect("embed", &w.embed, cfg.vocab_size, d)?;
    expect("unembed", &w.unembed, cfg.vocab_size, d)?;
    expect_len("final_norm", &w.final_norm, d)?;
    if w.layers.len() != cfg.n_layers {
        return Err(Error::Dimension(format!(
            "{} layer weight blocks for {} layers",
            w.layers.len(),
            cfg.n_layers
        )));
    }
    for (l, lw) in w.layers.iter().enumerate() {
        expect_len(&format!("layer {l} attn_norm"), &lw.attn_norm, d)?;
        expect_len(&format!("layer {l} mlp_norm"), &lw.mlp_norm, d)?;
        for (name, m) in [("wq", &lw.w_q), ("wk", &lw.w_k), ("wv", &lw.w_v), ("wo", &lw.w_o)] {
            expect(&format!("layer {l} {name}"), m, d, d)?;
        }
        expect(&format!("layer {l} w_gate"), &lw.w_gate, cfg.d_mlp, d)?;
        expect(&format!("layer {l} w_up"), &lw.w_up, cfg.d_mlp, d)?;
        expect(&format!("layer {l} w_down"), &lw.w_down, d, cfg.d_mlp)?;
    }
    Ok(())
}

/// Resolve a checkpoint locator.
///
/// * `toy:<seed>`: the default fixture (4 layers, 2 heads, d_model 16, vocab 64).
/// * `toy:<seed>:<layers>x<heads>x<d_model>x<vocab>`: fixture with explicit dims.
/// * a filesystem path to a checkpoint container written by [`ModelHandle::save`].
///
/// Any other `scheme:` prefix is reported as a capability error.
pub fn load_model(locator: &str) -> Result<ModelHandle> {
    if let Some(rest) = locator.strip_prefix("toy:") {
        let (seed, dims) = match rest.split_once(':') {
            Some((s, d)) => (s, Some(d)),
            None => (rest, None),
        };
        let seed: u64 = seed.parse().map_err(|_| Error::Load {
            locator: locator.into(),
            reason: format!("invalid seed `{seed}`"),
        })?;
        let dims = match dims {
            None => ToyDims::default(),
            Some(d) => {
                let parts: Vec<usize> = d
                    .split('x')
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Load {
                        locator: locator.into(),
                        reason: format!("invalid dims `{d}`"),
                    })?;
                let [n_layers, n_heads, d_model, vocab_size] = parts[..] else {
                    return Err(Error::Load {
                        locator: locator.into(),
                        reason: "dims must be <layers>x<heads>x<d_model>x<vocab>".into(),
                    });
                };
                ToyDims {
                    n_layers,
                    n_heads,
                    d_model,
                    vocab_size,
                }
            }
        };
        return toy_model_fixture(seed, dims);
    }
    let path = Path::new(locator);
    if !path.exists() {
        if let Some((scheme, _)) = locator.split_once(':') {
            if scheme.len() > 1 && !scheme.contains(['/', '\\']) {
                return Err(Error::Capability(format!(
                    "backend `{scheme}` is not available in this build"
                )));
            }
        }
        return Err(Error::Load {
            locator: locator.into(),
            reason: "checkpoint does not exist".into(),
        });
    }
    let container = Container::load(path).map_err(|e| match e {
        Error::Capability(_) => e,
        other => Error::Load {
            locator: locator.into(),
            reason: other.to_string(),
        },
    })?;
    ModelHandle::from_container(&container, ARCHITECTURE).map_err(|e| match e {
        Error::Capability(_) => e,
        other => Error::Load {
            locator: locator.into(),
            reason: other.to_string(),
        },
    })
}
