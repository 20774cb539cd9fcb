// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cached activations from one forward pass.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::json;

use super::{Component, Position, TokenId};
use crate::container::Container;
use crate::error::{Error, Result};

/// Which activations a forward pass stores.
///
/// `layers` filters residual, attention, MLP and head captures; the residual
/// stream index runs to `n_layers` inclusive. `positions` filters token
/// positions. Final logits are always kept for every position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureFilter {
    pub layers: Option<BTreeSet<usize>>,
    pub positions: Option<Vec<Position>>,
    pub heads: bool,
    pub attn_weights: bool,
    pub mlp_hidden: bool,
}

impl Default for CaptureFilter {
    fn default() -> Self {
        Self::all()
    }
}

impl CaptureFilter {
    pub fn all() -> Self {
        Self {
            layers: None,
            positions: None,
            heads: true,
            attn_weights: true,
            mlp_hidden: true,
        }
    }

    /// Residual, attention and MLP outputs at the last position only.
    pub fn last_position() -> Self {
        Self {
            layers: None,
            positions: Some(vec![Position::Last]),
            heads: false,
            attn_weights: false,
            mlp_hidden: false,
        }
    }

    pub fn with_layers(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.layers = Some(layers.into_iter().collect());
        self
    }

    pub fn with_heads(mut self, on: bool) -> Self {
        self.heads = on;
        self
    }

    pub fn with_attn_weights(mut self, on: bool) -> Self {
        self.attn_weights = on;
        self
    }

    pub fn with_mlp_hidden(mut self, on: bool) -> Self {
        self.mlp_hidden = on;
        self
    }

    pub fn layer(&self, l: usize) -> bool {
        self.layers.as_ref().is_none_or(|s| s.contains(&l))
    }

    pub fn position(&self, p: usize, seq_len: usize) -> bool {
        self.positions
            .as_ref()
            .is_none_or(|ps| ps.iter().any(|q| q.resolve(seq_len) == p))
    }
}

type Site = (usize, usize);

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForwardTrace {
    pub(crate) prompt: Vec<TokenId>,
    pub(crate) n_layers: usize,
    pub(crate) n_heads: usize,
    pub(crate) d_model: usize,
    pub(crate) residual_pre: BTreeMap<Site, Vec<f32>>,
    pub(crate) attn_out: BTreeMap<Site, Vec<f32>>,
    pub(crate) mlp_out: BTreeMap<Site, Vec<f32>>,
    pub(crate) mlp_hidden: BTreeMap<Site, Vec<f32>>,
    /// keyed `(layer, head, position)`
    pub(crate) head_out: BTreeMap<(usize, usize, usize), Vec<f32>>,
    /// keyed `(layer, head)`, rows are query positions
    pub(crate) attn_weights: BTreeMap<Site, Vec<Vec<f32>>>,
    pub(crate) final_logits: Vec<Vec<f32>>,
}

fn missing(what: &str, layer: usize, pos: usize) -> Error {
    Error::MissingCapture(format!("{what} at layer {layer}, position {pos}"))
}

impl ForwardTrace {
    pub fn prompt(&self) -> &[TokenId] {
        &self.prompt
    }
    pub fn seq_len(&self) -> usize {
        self.prompt.len()
    }
    pub fn last(&self) -> usize {
        self.prompt.len() - 1
    }
    pub fn n_layers(&self) -> usize {
        self.n_layers
    }
    pub fn n_heads(&self) -> usize {
        self.n_heads
    }
    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// Residual stream entering `layer`; `layer == n_layers` is the stream
    /// after the last block.
    pub fn residual_pre(&self, layer: usize, pos: usize) -> Result<&[f32]> {
        self.residual_pre
            .get(&(layer, pos))
            .map(Vec::as_slice)
            .ok_or_else(|| missing("residual_pre", layer, pos))
    }

    pub fn attn_out(&self, layer: usize, pos: usize) -> Result<&[f32]> {
        self.attn_out
            .get(&(layer, pos))
            .map(Vec::as_slice)
            .ok_or_else(|| missing("attn_out", layer, pos))
    }

    pub fn mlp_out(&self, layer: usize, pos: usize) -> Result<&[f32]> {
        self.mlp_out
            .get(&(layer, pos))
            .map(Vec::as_slice)
            .ok_or_else(|| missing("mlp_out", layer, pos))
    }

    /// SwiGLU hidden activations (`d_mlp` wide).
    pub fn mlp_hidden(&self, layer: usize, pos: usize) -> Result<&[f32]> {
        self.mlp_hidden
            .get(&(layer, pos))
            .map(Vec::as_slice)
            .ok_or_else(|| missing("mlp_hidden", layer, pos))
    }

    /// Output contribution of one head (already projected by `W_O`).
    pub fn head_out(&self, layer: usize, head: usize, pos: usize) -> Result<&[f32]> {
        self.head_out
            .get(&(layer, head, pos))
            .map(Vec::as_slice)
            .ok_or_else(|| missing(&format!("head {head} output"), layer, pos))
    }

    /// Attention pattern of one head: `[query][key]`.
    pub fn attn_weights(&self, layer: usize, head: usize) -> Result<&[Vec<f32>]> {
        self.attn_weights
            .get(&(layer, head))
            .map(Vec::as_slice)
            .ok_or_else(|| {
                Error::MissingCapture(format!("attention weights at layer {layer}, head {head}"))
            })
    }

    pub fn final_logits(&self, pos: usize) -> Result<&[f32]> {
        self.final_logits
            .get(pos)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingCapture(format!("final logits at position {pos}")))
    }

    pub fn last_logits(&self) -> &[f32] {
        &self.final_logits[self.last()]
    }

    pub fn component(&self, layer: usize, component: Component, pos: usize) -> Result<&[f32]> {
        match component {
            Component::Resid => self.residual_pre(layer, pos),
            Component::Attn => self.attn_out(layer, pos),
            Component::Mlp => self.mlp_out(layer, pos),
            Component::Head(h) => self.head_out(layer, h, pos),
        }
    }

    /// Serialize to the binary container. Tensor names are
    /// `resid_pre.{l}.{p}`, `attn_out.{l}.{p}`, `mlp_out.{l}.{p}`,
    /// `mlp_hidden.{l}.{p}`, `head_out.{l}.{h}.{p}`, `attn_weights.{l}.{h}`
    /// (`[T, T]`) and `final_logits` (`[T, vocab]`).
    pub fn to_container(&self) -> Container {
        let mut c = Container::new(json!({
            "kind": "forward_trace",
            "prompt": self.prompt,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_model": self.d_model,
        }));
        let site_maps = [
            ("resid_pre", &self.residual_pre),
            ("attn_out", &self.attn_out),
            ("mlp_out", &self.mlp_out),
            ("mlp_hidden", &self.mlp_hidden),
        ];
        for (name, map) in site_maps {
            for ((l, p), v) in map {
                c.push(format!("{name}.{l}.{p}"), vec![v.len()], v.clone());
            }
        }
        for ((l, h, p), v) in &self.head_out {
            c.push(format!("head_out.{l}.{h}.{p}"), vec![v.len()], v.clone());
        }
        for ((l, h), rows) in &self.attn_weights {
            let t = rows.len();
            c.push(format!("attn_weights.{l}.{h}"), vec![t, t], rows.concat());
        }
        let vocab = self.final_logits.first().map_or(0, Vec::len);
        c.push(
            "final_logits",
            vec![self.final_logits.len(), vocab],
            self.final_logits.concat(),
        );
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = &c.meta;
        let field = |k: &str| -> Result<usize> {
            meta.get(k)
                .and_then(serde_json::Value::as_u64)
                .map(|v| v as usize)
                .ok_or_else(|| Error::Format(format!("trace metadata lacks `{k}`")))
        };
        let prompt: Vec<TokenId> = serde_json::from_value(
            meta.get("prompt")
                .cloned()
                .ok_or_else(|| Error::Format("trace metadata lacks `prompt`".into()))?,
        )?;
        let mut trace = ForwardTrace {
            n_layers: field("n_layers")?,
            n_heads: field("n_heads")?,
            d_model: field("d_model")?,
            prompt,
            ..Default::default()
        };
        let idx = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad index `{s}` in tensor name")))
        };
        for t in &c.tensors {
            let parts: Vec<&str> = t.name.split('.').collect();
            match parts.as_slice() {
                [name, l, p] if *name != "attn_weights" => {
                    let key = (idx(l)?, idx(p)?);
                    let map = match *name {
                        "resid_pre" => &mut trace.residual_pre,
                        "attn_out" => &mut trace.attn_out,
                        "mlp_out" => &mut trace.mlp_out,
                        "mlp_hidden" => &mut trace.mlp_hidden,
                        other => return Err(Error::Format(format!("unknown tensor `{other}`"))),
                    };
                    map.insert(key, t.data.clone());
                }
                ["head_out", l, h, p] => {
                    trace
                        .head_out
                        .insert((idx(l)?, idx(h)?, idx(p)?), t.data.clone());
                }
                ["attn_weights", l, h] => {
                    let n = t.shape.first().copied().unwrap_or(0);
                    let rows = t.data.chunks(n.max(1)).map(<[f32]>::to_vec).collect();
                    trace.attn_weights.insert((idx(l)?, idx(h)?), rows);
                }
                ["final_logits"] => {
                    let vocab = t.shape.get(1).copied().unwrap_or(0).max(1);
                    trace.final_logits = t.data.chunks(vocab).map(<[f32]>::to_vec).collect();
                }
                _ => return Err(Error::Format(format!("unknown tensor `{}`", t.name))),
            }
        }
        Ok(trace)
    }
}
