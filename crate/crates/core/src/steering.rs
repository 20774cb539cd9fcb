// SPDX-License-Identifier: MIT OR Apache-2.0

//! Translation-difference and recall-task vectors, their persistence, and
//! layer/scale grid search.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::dataset::{
    derive_translation_prompt, render_prompt, FactSet, IclBundle, Language,
};
use crate::error::{Error, Result};
use crate::manifest::sha256_hex;
use crate::model::{forward_with_cache, CaptureFilter, Intervention, ModelHandle, Position};

/// Default layers for translation-vector extraction.
pub const TRANSLATION_LAYERS: std::ops::RangeInclusive<usize> = 21..=27;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorKind {
    TranslationDiff,
    RecallTask,
}

/// Which stream a vector is read from, relative to the injection layer `l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionSite {
    /// `residual_pre[l]`, the same point the vector is added back at.
    LayerInput,
    /// `residual_pre[l + 1]`, the output of block `l`.
    LayerOutput,
}

impl ExtractionSite {
    /// Residual index read for injection layer `layer`.
    pub fn stream_index(self, layer: usize) -> usize {
        match self {
            ExtractionSite::LayerInput => layer,
            ExtractionSite::LayerOutput => layer + 1,
        }
    }

    pub fn default_for(kind: VectorKind) -> Self {
        match kind {
            VectorKind::TranslationDiff => ExtractionSite::LayerInput,
            VectorKind::RecallTask => ExtractionSite::LayerOutput,
        }
    }
}

/// A prompt with the metadata that ends up in vector provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPrompt {
    pub text: String,
    pub language: Language,
    pub relation_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub n_prompts_used: usize,
    pub languages: Vec<String>,
    pub relations: Vec<String>,
    pub seed: u64,
    pub site: ExtractionSite,
    /// Hash over the sorted prompt texts of every set used.
    pub prompt_set_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    pub kind: VectorKind,
    pub layer: usize,
    pub vector: Vec<f32>,
    pub scale: f32,
    pub model_fingerprint: String,
    pub provenance: Provenance,
}

// ---------------------------------------------------------------------------
// Prompt sets
// ---------------------------------------------------------------------------

/// Fact-recall prompts of `set` in each of `languages`.
pub fn fact_prompts(set: &FactSet, languages: &[Language]) -> Result<Vec<LabeledPrompt>> {
    let mut out = Vec::new();
    for t in set.triples() {
        for lang in languages {
            out.push(LabeledPrompt {
                text: render_prompt(t, lang)?.to_string(),
                language: lang.clone(),
                relation_id: t.relation_id.clone(),
            });
        }
    }
    Ok(out)
}

/// Explicit-translation prompts of `set` for each non-English language.
pub fn translation_prompts(set: &FactSet, languages: &[Language]) -> Result<Vec<LabeledPrompt>> {
    let mut out = Vec::new();
    for t in set.triples() {
        for lang in languages.iter().filter(|l| !l.is_english()) {
            out.push(LabeledPrompt {
                text: derive_translation_prompt(t, lang)?,
                language: lang.clone(),
                relation_id: t.relation_id.clone(),
            });
        }
    }
    Ok(out)
}

pub fn icl_prompts(bundles: &[IclBundle]) -> Vec<LabeledPrompt> {
    bundles
        .iter()
        .map(|b| LabeledPrompt {
            text: b.prompt.clone(),
            language: b.language.clone(),
            relation_id: b.query.relation_id.clone(),
        })
        .collect()
}

fn prompt_set_hash(sets: &[&[LabeledPrompt]]) -> String {
    let mut parts = Vec::new();
    for s in sets {
        let mut texts: Vec<&str> = s.iter().map(|p| p.text.as_str()).collect();
        texts.sort_unstable();
        parts.push(texts.join("\n"));
    }
    sha256_hex(parts.join("\n\u{1e}\n").as_bytes())
}

fn provenance(sets: &[&[LabeledPrompt]], seed: u64, site: ExtractionSite) -> Provenance {
    let all = sets.iter().flat_map(|s| s.iter());
    let languages: BTreeSet<String> = all.clone().map(|p| p.language.to_string()).collect();
    let relations: BTreeSet<String> = all.clone().map(|p| p.relation_id.clone()).collect();
    Provenance {
        n_prompts_used: all.count(),
        languages: languages.into_iter().collect(),
        relations: relations.into_iter().collect(),
        seed,
        site,
        prompt_set_hash: prompt_set_hash(sets),
    }
}

// ---------------------------------------------------------------------------
// Extraction
// ---------------------------------------------------------------------------

/// Mean of `residual_pre[stream][last]` over `prompts`, in f64.
///
/// Each coordinate is summed over its values in sorted order, so the result
/// does not depend on prompt order.
fn mean_activation_f64(model: &ModelHandle, prompts: &[&str], stream: usize) -> Result<Vec<f64>> {
    if prompts.is_empty() {
        return Err(Error::Domain("mean activation over an empty prompt list".into()));
    }
    if stream > model.n_layers() {
        return Err(Error::Index(format!(
            "residual stream {stream} outside [0, {}]",
            model.n_layers()
        )));
    }
    let capture = CaptureFilter::last_position().with_layers([stream]);
    let acts: Vec<Vec<f32>> = prompts
        .par_iter()
        .map(|p| {
            let ids = model.tokenizer().encode_with_bos(p);
            let trace = forward_with_cache(model, &ids, &capture)?;
            Ok(trace.residual_pre(stream, trace.last())?.to_vec())
        })
        .collect::<Result<_>>()?;
    let n = acts.len() as f64;
    let mut col = Vec::with_capacity(acts.len());
    Ok((0..model.d_model())
        .map(|j| {
            col.clear();
            col.extend(acts.iter().map(|a| a[j]));
            col.sort_unstable_by(f32::total_cmp);
            col.iter().map(|&x| x as f64).sum::<f64>() / n
        })
        .collect())
}

/// Mean last-position `residual_pre[layer]` over `prompts`.
pub fn mean_activation(model: &ModelHandle, prompts: &[&str], layer: usize) -> Result<Vec<f32>> {
    Ok(mean_activation_f64(model, prompts, layer)?
        .into_iter()
        .map(|x| x as f32)
        .collect())
}

fn texts(ps: &[LabeledPrompt]) -> Vec<&str> {
    ps.iter().map(|p| p.text.as_str()).collect()
}

/// `mean(T) - mean(C)` at injection layer `layer`.
pub fn translation_difference_vector(
    model: &ModelHandle,
    fact: &[LabeledPrompt],
    translation: &[LabeledPrompt],
    layer: usize,
    site: ExtractionSite,
    seed: u64,
) -> Result<SteeringVector> {
    if fact.is_empty() || translation.is_empty() {
        return Err(Error::Domain(
            "translation vector needs non-empty fact and translation prompt sets".into(),
        ));
    }
    if model.n_layers() > *TRANSLATION_LAYERS.end() && !TRANSLATION_LAYERS.contains(&layer) {
        tracing::warn!(layer, "translation vector layer outside the default 21..=27 window");
    }
    let stream = site.stream_index(layer);
    let c = mean_activation_f64(model, &texts(fact), stream)?;
    let t = mean_activation_f64(model, &texts(translation), stream)?;
    Ok(SteeringVector {
        kind: VectorKind::TranslationDiff,
        layer,
        vector: t.iter().zip(&c).map(|(t, c)| (t - c) as f32).collect(),
        scale: 1.0,
        model_fingerprint: model.fingerprint().to_string(),
        provenance: provenance(&[fact, translation], seed, site),
    })
}

/// Mean last-position activation over few-shot bundles.
pub fn recall_task_vector(
    model: &ModelHandle,
    bundles: &[LabeledPrompt],
    layer: usize,
    site: ExtractionSite,
    seed: u64,
) -> Result<SteeringVector> {
    if bundles.is_empty() {
        return Err(Error::Domain("recall vector needs at least one bundle".into()));
    }
    let stream = site.stream_index(layer);
    let vector = mean_activation(model, &texts(bundles), stream)?;
    Ok(SteeringVector {
        kind: VectorKind::RecallTask,
        layer,
        vector,
        scale: 1.0,
        model_fingerprint: model.fingerprint().to_string(),
        provenance: provenance(&[bundles], seed, site),
    })
}

/// Residual-add at `(vec.layer, LAST)` with the effective scale.
pub fn to_intervention(vec: &SteeringVector, scale: Option<f32>) -> Result<Intervention> {
    let s = scale.unwrap_or(vec.scale);
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Domain(format!("steering scale must be > 0, got {s}")));
    }
    Ok(Intervention::ResidualAdd {
        layer: vec.layer,
        position: Position::Last,
        vector: vec.vector.clone().into(),
        scale: s,
        source: Some(vec.model_fingerprint.clone()),
    })
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorSidecar {
    pub kind: VectorKind,
    pub layer: usize,
    pub scale: f32,
    pub model_fingerprint: String,
    pub prompt_set_hash: String,
    pub seed: u64,
    pub provenance: Provenance,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

impl SteeringVector {
    pub fn sidecar(&self) -> VectorSidecar {
        VectorSidecar {
            kind: self.kind,
            layer: self.layer,
            scale: self.scale,
            model_fingerprint: self.model_fingerprint.clone(),
            prompt_set_hash: self.provenance.prompt_set_hash.clone(),
            seed: self.provenance.seed,
            provenance: self.provenance.clone(),
        }
    }

    /// Container bytes and sidecar JSON, with `manifest_id` embedded in both.
    pub fn to_artifacts(&self, manifest_id: &str) -> Result<(Vec<u8>, Vec<u8>)> {
        let mut meta = serde_json::to_value(self.sidecar())?;
        meta["manifest_id"] = manifest_id.into();
        let mut c = Container::new(meta.clone());
        c.push("vector", vec![self.vector.len()], self.vector.clone());
        Ok((c.to_bytes(), serde_json::to_vec_pretty(&meta)?))
    }

    /// Write the container to `path` and the sidecar next to it.
    pub fn save(&self, path: &Path, manifest_id: &str) -> Result<()> {
        let (bin, json) = self.to_artifacts(manifest_id)?;
        std::fs::write(path, bin).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        std::fs::write(&side, json).map_err(|e| Error::io(side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sc: VectorSidecar = serde_json::from_str(&text)?;
        let embedded: VectorSidecar = serde_json::from_value(c.meta.clone())?;
        if embedded != sc {
            return Err(Error::Format(format!(
                "sidecar {} disagrees with vector container",
                side.display()
            )));
        }
        Ok(SteeringVector {
            kind: sc.kind,
            layer: sc.layer,
            vector: c.require("vector")?.data.clone(),
            scale: sc.scale,
            model_fingerprint: sc.model_fingerprint,
            provenance: sc.provenance,
        })
    }

    /// Refuse to apply a vector extracted from a different model.
    pub fn check_model(&self, model: &ModelHandle, force: bool) -> Result<()> {
        if self.vector.len() != model.d_model() {
            return Err(Error::Dimension(format!(
                "vector has dimension {}, model d_model is {}",
                self.vector.len(),
                model.d_model()
            )));
        }
        if !force && self.model_fingerprint != model.fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: model.fingerprint().to_string(),
                found: self.model_fingerprint.clone(),
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Grid search
// ---------------------------------------------------------------------------

/// One grid point. Single-vector searches have one layer; combined searches
/// list (translation layer, recall layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub layers: Vec<usize>,
    pub scale: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCandidate {
    pub point: GridPoint,
    pub value: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub metric_name: String,
    pub split: String,
    pub candidates: Vec<GridCandidate>,
    pub best: Option<GridPoint>,
}

/// Highest value wins; ties go to lexicographically lower layers, then lower
/// scale.
fn better(a: &GridCandidate, b: &GridCandidate) -> bool {
    let (va, vb) = (a.value.unwrap(), b.value.unwrap());
    if va != vb {
        return va > vb;
    }
    match a.point.layers.cmp(&b.point.layers) {
        std::cmp::Ordering::Equal => a.point.scale < b.point.scale,
        o => o == std::cmp::Ordering::Less,
    }
}

/// Evaluate `metric` at every point. Failed or non-finite evaluations are
/// kept as missing scores and excluded from the argmax.
pub fn grid_search<F>(points: Vec<GridPoint>, metric_name: &str, metric: F) -> GridSearchResult
where
    F: Fn(&GridPoint) -> Result<f64> + Sync,
{
    let candidates: Vec<GridCandidate> = points
        .into_par_iter()
        .map(|point| match metric(&point) {
            Ok(v) if v.is_finite() => GridCandidate {
                point,
                value: Some(v),
                error: None,
            },
            Ok(v) => GridCandidate {
                point,
                value: None,
                error: Some(format!("non-finite metric {v}")),
            },
            Err(e) => GridCandidate {
                point,
                value: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let mut best: Option<&GridCandidate> = None;
    for c in candidates.iter().filter(|c| c.value.is_some()) {
        if best.is_none_or(|b| better(c, b)) {
            best = Some(c);
        }
    }
    let best = best.map(|b| b.point.clone());
    GridSearchResult {
        metric_name: metric_name.to_string(),
        split: "val".into(),
        candidates,
        best,
    }
}

/// `layers × scales`, single-layer points.
pub fn grid(layers: &[usize], scales: &[f32]) -> Vec<GridPoint> {
    layers
        .iter()
        .flat_map(|&l| {
            scales.iter().map(move |&s| GridPoint {
                layers: vec![l],
                scale: s,
            })
        })
        .collect()
}

/// `translation layers × recall layers × shared scales`.
pub fn combined_grid(t_layers: &[usize], r_layers: &[usize], scales: &[f32]) -> Vec<GridPoint> {
    let mut out = Vec::new();
    for &t in t_layers {
        for &r in r_layers {
            for &s in scales {
                out.push(GridPoint {
                    layers: vec![t, r],
                    scale: s,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{toy_model_fixture, ToyDims};

    fn lp(text: &str) -> LabeledPrompt {
        LabeledPrompt {
            text: text.into(),
            language: Language::en(),
            relation_id: "r".into(),
        }
    }

    #[test]
    fn scale_must_be_positive() {
        let m = toy_model_fixture(7, ToyDims::default()).unwrap();
        let v = recall_task_vector(&m, &[lp("The main religion")], 1, ExtractionSite::LayerInput, 0)
            .unwrap();
        assert!(matches!(to_intervention(&v, Some(0.0)), Err(Error::Domain(_))));
        assert!(matches!(to_intervention(&v, Some(-1.0)), Err(Error::Domain(_))));
        let Intervention::ResidualAdd { scale, .. } = to_intervention(&v, Some(2.0)).unwrap() else {
            panic!()
        };
        assert_eq!(scale, 2.0);
    }

    #[test]
    fn empty_sets_rejected() {
        let m = toy_model_fixture(7, ToyDims::default()).unwrap();
        assert!(matches!(mean_activation(&m, &[], 0), Err(Error::Domain(_))));
        assert!(matches!(
            translation_difference_vector(&m, &[], &[lp("a")], 1, ExtractionSite::LayerInput, 0),
            Err(Error::Domain(_))
        ));
    }

    fn pt(layers: Vec<usize>, scale: f32) -> GridPoint {
        GridPoint { layers, scale }
    }

    #[test]
    fn grid_ties_prefer_lower_layer_then_scale() {
        let pts = grid(&[3, 1, 2], &[2.0, 1.0]);
        let r = grid_search(pts, "m", |p| {
            if p.layers[0] == 2 {
                Err(Error::Domain("boom".into()))
            } else {
                Ok(1.0)
            }
        });
        assert_eq!(r.best, Some(pt(vec![1], 1.0)));
        assert_eq!(r.candidates.iter().filter(|c| c.error.is_some()).count(), 2);
    }

    #[test]
    fn singleton_grid() {
        let r = grid_search(grid(&[4], &[3.0]), "m", |_| Ok(0.2));
        assert_eq!(r.best, Some(pt(vec![4], 3.0)));
        let r = grid_search(grid(&[4], &[3.0]), "m", |_| Ok(f64::NAN));
        assert_eq!(r.best, None);
    }

    #[test]
    fn vector_roundtrip_and_fingerprint_guard() {
        let m = toy_model_fixture(7, ToyDims::default()).unwrap();
        let other = toy_model_fixture(8, ToyDims::default()).unwrap();
        let v = recall_task_vector(&m, &[lp("The main")], 2, ExtractionSite::LayerOutput, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.rltc");
        v.save(&path, "abc").unwrap();
        let back = SteeringVector::load(&path).unwrap();
        assert_eq!(back, v);
        back.check_model(&m, false).unwrap();
        assert!(matches!(
            back.check_model(&other, false),
            Err(Error::FingerprintMismatch { .. })
        ));
        back.check_model(&other, true).unwrap();
    }
}
