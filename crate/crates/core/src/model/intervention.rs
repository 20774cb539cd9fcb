// SPDX-License-Identifier: MIT OR Apache-2.0

//! Edits applied during a forward pass.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ForwardTrace, ModelConfig};
use crate::error::{Error, Result};

/// A token position, possibly symbolic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Position {
    At(usize),
    Last,
}

impl Position {
    pub fn resolve(self, seq_len: usize) -> usize {
        match self {
            Position::At(p) => p,
            Position::Last => seq_len - 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Positions {
    All,
    Only(Vec<Position>),
}

impl Positions {
    pub fn contains(&self, pos: usize, seq_len: usize) -> bool {
        match self {
            Positions::All => true,
            Positions::Only(ps) => ps.iter().any(|p| p.resolve(seq_len) == pos),
        }
    }

    pub fn resolve(&self, seq_len: usize) -> Vec<usize> {
        match self {
            Positions::All => (0..seq_len).collect(),
            Positions::Only(ps) => ps.iter().map(|p| p.resolve(seq_len)).collect(),
        }
    }
}

/// Patchable model component at one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Component {
    /// Residual stream entering the layer (`layer == n_layers` is the final stream).
    Resid,
    Attn,
    Mlp,
    Head(usize),
}

impl std::fmt::Display for Component {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Component::Resid => write!(f, "resid"),
            Component::Attn => write!(f, "attn"),
            Component::Mlp => write!(f, "mlp"),
            Component::Head(h) => write!(f, "head{h}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AblationMode {
    Zero,
    /// Replacement vector per ablated head, in the order of `heads`.
    Mean(Vec<Vec<f32>>),
}

/// One forward-pass edit. A list of interventions is applied in list order at
/// each site they touch.
#[derive(Debug, Clone)]
pub enum Intervention {
    /// `residual_pre[layer][position] += scale * vector`.
    ResidualAdd {
        layer: usize,
        position: Position,
        vector: Arc<[f32]>,
        scale: f32,
        /// Fingerprint of the model the vector was extracted from.
        source: Option<String>,
    },
    /// Mask attention from `query` to each of `keys` (pre-softmax `-inf`) in
    /// every layer of `layers`.
    AttentionKnockout {
        layers: Range<usize>,
        query: Position,
        keys: Vec<usize>,
    },
    /// Remove (zero mode) or replace (mean mode) the listed heads' output
    /// contributions at `positions`.
    HeadAblation {
        layer: usize,
        heads: Vec<usize>,
        positions: Positions,
        mode: AblationMode,
    },
    /// Replace a component's output with the donor trace's value.
    ActivationPatch {
        layer: usize,
        component: Component,
        positions: Positions,
        donor: Arc<ForwardTrace>,
    },
}

impl Intervention {
    pub fn residual_add(layer: usize, position: Position, vector: Vec<f32>, scale: f32) -> Self {
        Intervention::ResidualAdd {
            layer,
            position,
            vector: vector.into(),
            scale,
            source: None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Intervention::ResidualAdd { .. } => "residual_add",
            Intervention::AttentionKnockout { .. } => "attention_knockout",
            Intervention::HeadAblation { .. } => "head_zero",
            Intervention::ActivationPatch { .. } => "activation_patch",
        }
    }

    /// Check against model dims and prompt length.
    pub fn validate(&self, cfg: &ModelConfig, seq_len: usize) -> Result<()> {
        let pos_ok = |p: Position| -> Result<()> {
            if let Position::At(i) = p {
                if i >= seq_len {
                    return Err(Error::Index(format!(
                        "position {i} outside prompt of length {seq_len}"
                    )));
                }
            }
            Ok(())
        };
        let layer_ok = |l: usize, max: usize| -> Result<()> {
            if l >= max {
                return Err(Error::Index(format!("layer {l} outside [0, {max})")));
            }
            Ok(())
        };
        match self {
            Intervention::ResidualAdd {
                layer,
                position,
                vector,
                ..
            } => {
                layer_ok(*layer, cfg.n_layers + 1)?;
                pos_ok(*position)?;
                if vector.len() != cfg.d_model {
                    return Err(Error::Dimension(format!(
                        "residual_add payload has dimension {}, model d_model is {}",
                        vector.len(),
                        cfg.d_model
                    )));
                }
            }
            Intervention::AttentionKnockout {
                layers,
                query,
                keys,
            } => {
                if layers.end > cfg.n_layers || layers.start > layers.end {
                    return Err(Error::Index(format!(
                        "knockout layers {layers:?} outside [0, {})",
                        cfg.n_layers
                    )));
                }
                pos_ok(*query)?;
                for &k in keys {
                    pos_ok(Position::At(k))?;
                }
            }
            Intervention::HeadAblation {
                layer,
                heads,
                positions,
                mode,
            } => {
                layer_ok(*layer, cfg.n_layers)?;
                for &h in heads {
                    if h >= cfg.n_heads {
                        return Err(Error::Index(format!(
                            "head {h} outside [0, {})",
                            cfg.n_heads
                        )));
                    }
                }
                if let Positions::Only(ps) = positions {
                    ps.iter().try_for_each(|p| pos_ok(*p))?;
                }
                if let AblationMode::Mean(means) = mode {
                    if means.len() != heads.len() || means.iter().any(|m| m.len() != cfg.d_model) {
                        return Err(Error::Dimension(
                            "mean ablation needs one d_model vector per head".into(),
                        ));
                    }
                }
            }
            Intervention::ActivationPatch {
                layer,
                component,
                positions,
                donor,
            } => {
                let max = if *component == Component::Resid {
                    cfg.n_layers + 1
                } else {
                    cfg.n_layers
                };
                layer_ok(*layer, max)?;
                if let Component::Head(h) = component {
                    if *h >= cfg.n_heads {
                        return Err(Error::Index(format!("head {h} outside [0, {})", cfg.n_heads)));
                    }
                }
                if donor.seq_len() != seq_len {
                    return Err(Error::Dimension(format!(
                        "patch donor has {} positions, run has {seq_len}",
                        donor.seq_len()
                    )));
                }
                if let Positions::Only(ps) = positions {
                    ps.iter().try_for_each(|p| pos_ok(*p))?;
                }
                for p in positions.resolve(seq_len) {
                    donor.component(*layer, *component, p)?;
                }
            }
        }
        Ok(())
    }

    /// Stable textual description, including a hash of any vector payload.
    pub fn describe(&self) -> String {
        match self {
            Intervention::ResidualAdd {
                layer,
                position,
                vector,
                scale,
                ..
            } => {
                let mut h = Sha256::new();
                for v in vector.iter() {
                    h.update(v.to_le_bytes());
                }
                format!(
                    "residual_add(layer={layer},pos={position:?},scale={scale},payload={})",
                    &hex::encode(h.finalize())[..16]
                )
            }
            Intervention::AttentionKnockout {
                layers,
                query,
                keys,
            } => format!("knockout(layers={layers:?},query={query:?},keys={keys:?})"),
            Intervention::HeadAblation {
                layer,
                heads,
                positions,
                mode,
            } => format!(
                "head_ablation(layer={layer},heads={heads:?},positions={positions:?},mode={})",
                match mode {
                    AblationMode::Zero => "zero",
                    AblationMode::Mean(_) => "mean",
                }
            ),
            Intervention::ActivationPatch {
                layer,
                component,
                positions,
                donor,
            } => format!(
                "patch(layer={layer},component={component},positions={positions:?},donor={:?})",
                donor.prompt()
            ),
        }
    }
}

/// Content hash identifying a list of interventions.
pub fn fingerprint(interventions: &[Intervention]) -> String {
    if interventions.is_empty() {
        return "none".into();
    }
    let mut h = Sha256::new();
    for i in interventions {
        h.update(i.describe().as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())[..16].to_string()
}
