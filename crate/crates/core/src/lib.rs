// SPDX-License-Identifier: MIT OR Apache-2.0

//! Diagnose and repair multilingual factual-recall failures in decoder-only
//! transformers.
//!
//! * [`model`]: hooked forward passes, interventions and the deterministic
//!   fixture backend.
//! * [`dataset`]: parallel multilingual fact triples, splits, translation
//!   and few-shot prompt derivation.
//! * [`lens`]: intermediate-layer decoding and layer-wise diagnostics.
//! * [`steering`]: translation-difference and recall-task vectors.
//! * [`causal`]: activation patching, attention knockout, head ablation.
//! * [`eval`]: accuracy reports, answer-equivalence judging and the
//!   translate-recall-translate baseline.
//! * [`similarity`]: MLP activation similarity between task conditions.
//! * [`manifest`]: run manifests, content hashes and seed derivation.

pub mod causal;
pub mod container;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod lens;
pub mod linalg;
pub mod manifest;
pub mod model;
pub mod similarity;
pub mod steering;

pub use error::{Error, Result};
