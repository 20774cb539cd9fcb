// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end fact-recall evaluation under interventions.

mod baseline;
mod judge;

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{render_prompt, FactSet, FactTriple, Language};
use crate::error::{Error, Result};
use crate::lens::{agnostic_correct, contains_answer, is_answer_prefix};
use crate::model::{
    generate, intervention_fingerprint, run_with_interventions, CaptureFilter, Intervention,
    ModelHandle, TokenId,
};

pub use baseline::{
    baseline_translate_recall_translate, five_token_rule, StepFailure, TrtStep, TrtTemplates,
};
pub use judge::{
    cache_key, lemma_forms, lexicon_score, CacheEntry, FallbackPolicy, HttpTransport, Judge,
    JudgeConfig, JudgeMode, JudgeRequest, JudgeResponse, JudgeTransport, Verdict, DEFAULT_RUBRIC,
    JUDGE_ENDPOINT_ENV, SCORE_ASSOCIATED, SCORE_EXACT, SCORE_INSTANCE, SCORE_SYNONYM,
};

/// Reference layer for conversion accounting on a 28-layer model.
pub const REFERENCE_LAYER: usize = 21;

/// Key used for the pooled non-English row.
pub const NON_ENGLISH: &str = "non_en";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConversionOutcome {
    NotApplicable,
    Converted,
    Failed,
}

impl ConversionOutcome {
    pub fn from_flags(agnostic: bool, final_correct: bool) -> Self {
        match (agnostic, final_correct) {
            (false, _) => ConversionOutcome::NotApplicable,
            (true, true) => ConversionOutcome::Converted,
            (true, false) => ConversionOutcome::Failed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub relation_id: String,
    pub subject_en: String,
    pub language: Language,
    pub generated_answer: String,
    pub final_correct: bool,
    pub agnostic_correct_by_layer: BTreeMap<usize, bool>,
    pub conversion_outcome: ConversionOutcome,
    pub intervention_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_failure: Option<StepFailure>,
}

impl EvalRecord {
    pub fn agnostic_at(&self, layer: usize) -> bool {
        self.agnostic_correct_by_layer.get(&layer).copied().unwrap_or(false)
    }
}

/// Counts of the four final/agnostic combinations at one layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Breakdown {
    pub final_and_agnostic: usize,
    pub agnostic_only: usize,
    pub final_only: usize,
    pub neither: usize,
}

impl Breakdown {
    pub fn add(&mut self, final_correct: bool, agnostic: bool) {
        match (final_correct, agnostic) {
            (true, true) => self.final_and_agnostic += 1,
            (false, true) => self.agnostic_only += 1,
            (true, false) => self.final_only += 1,
            (false, false) => self.neither += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.final_and_agnostic + self.agnostic_only + self.final_only + self.neither
    }

    pub fn agnostic(&self) -> usize {
        self.final_and_agnostic + self.agnostic_only
    }

    /// `P(final | agnostic)`, or `None` with no agnostic-correct examples.
    pub fn conversion(&self) -> Option<f64> {
        match self.agnostic() {
            0 => None,
            a => Some(self.final_and_agnostic as f64 / a as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageSummary {
    pub n: usize,
    pub final_accuracy: f64,
    pub agnostic_rate: f64,
    pub conversion_correctness: Option<f64>,
}

impl LanguageSummary {
    fn from_records<'a>(records: impl Iterator<Item = &'a EvalRecord>, reference_layer: usize) -> Self {
        let mut b = Breakdown::default();
        for r in records {
            b.add(r.final_correct, r.agnostic_at(reference_layer));
        }
        let n = b.total();
        let frac = |x: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
        LanguageSummary {
            n,
            final_accuracy: frac(b.final_and_agnostic + b.final_only),
            agnostic_rate: frac(b.agnostic()),
            conversion_correctness: b.conversion(),
        }
    }
}

/// Settings echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEcho {
    pub condition: String,
    pub split_hash: String,
    pub split: Option<serde_json::Value>,
    pub seed: Option<u64>,
    pub languages: Vec<Language>,
    pub interventions: Vec<String>,
    pub intervention_fingerprint: String,
    pub judge_mode: Option<JudgeMode>,
    pub reference_layer: usize,
    pub audit_layers: Vec<usize>,
    pub max_new_tokens: usize,
    pub strict_single_token: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_language: BTreeMap<Language, LanguageSummary>,
    /// Example-weighted pool of every non-English language.
    pub non_english: Option<LanguageSummary>,
    /// Four-way breakdown per language (and [`NON_ENGLISH`]) per audited layer.
    pub breakdown: BTreeMap<String, BTreeMap<usize, Breakdown>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_failures: Option<BTreeMap<String, usize>>,
    pub config: EvalEcho,
    pub records: Vec<EvalRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    FinalAccuracy,
    ConversionCorrectness,
    /// Intermediate English-answer correctness at the reference layer.
    AgnosticRate,
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final_acc" | "final_accuracy" => Ok(Metric::FinalAccuracy),
            "conversion" | "conversion_correctness" => Ok(Metric::ConversionCorrectness),
            "agnostic" | "agnostic_rate" => Ok(Metric::AgnosticRate),
            other => Err(Error::Key(format!("unknown metric `{other}`"))),
        }
    }
}

impl EvalReport {
    /// Aggregate records. Records are sorted by (relation, subject, language)
    /// so the report does not depend on evaluation order.
    pub fn from_records(mut records: Vec<EvalRecord>, config: EvalEcho) -> Self {
        records.sort_by(|a, b| {
            (&a.relation_id, &a.subject_en, &a.language).cmp(&(&b.relation_id, &b.subject_en, &b.language))
        });
        let reference = config.reference_layer;
        let langs: BTreeSet<&Language> = records.iter().map(|r| &r.language).collect();
        let per_language: BTreeMap<Language, LanguageSummary> = langs
            .iter()
            .map(|&l| {
                let s = LanguageSummary::from_records(records.iter().filter(|r| &r.language == l), reference);
                (l.clone(), s)
            })
            .collect();
        let non_en = || records.iter().filter(|r| !r.language.is_english());
        let non_english = (non_en().count() > 0).then(|| LanguageSummary::from_records(non_en(), reference));

        let mut breakdown: BTreeMap<String, BTreeMap<usize, Breakdown>> = BTreeMap::new();
        for r in &records {
            let mut keys = vec![r.language.to_string()];
            if !r.language.is_english() {
                keys.push(NON_ENGLISH.to_string());
            }
            for k in keys {
                let per_layer = breakdown.entry(k).or_default();
                for &layer in &config.audit_layers {
                    per_layer
                        .entry(layer)
                        .or_default()
                        .add(r.final_correct, r.agnostic_at(layer));
                }
            }
        }
        let step_failures = records.iter().any(|r| r.step_failure.is_some()).then(|| {
            let mut m = BTreeMap::new();
            for f in records.iter().filter_map(|r| r.step_failure) {
                *m.entry(f.label()).or_insert(0) += 1;
            }
            m
        });
        EvalReport {
            per_language,
            non_english,
            breakdown,
            step_failures,
            config,
            records,
        }
    }

    /// Metric over the non-English pool.
    pub fn metric(&self, m: Metric) -> Option<f64> {
        let s = self.non_english.as_ref()?;
        match m {
            Metric::FinalAccuracy => Some(s.final_accuracy),
            Metric::ConversionCorrectness => s.conversion_correctness,
            Metric::AgnosticRate => Some(s.agnostic_rate),
        }
    }

    /// `language,n,final_accuracy,agnostic_rate,conversion_correctness`,
    /// with the pooled non-English row last.
    pub fn summary_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["language", "n", "final_accuracy", "agnostic_rate", "conversion_correctness"])?;
        let rows = self
            .per_language
            .iter()
            .map(|(l, s)| (l.to_string(), s))
            .chain(self.non_english.iter().map(|s| (NON_ENGLISH.to_string(), s)));
        for (l, s) in rows {
            w.write_record([
                l,
                s.n.to_string(),
                s.final_accuracy.to_string(),
                s.agnostic_rate.to_string(),
                s.conversion_correctness.map(|c| c.to_string()).unwrap_or_default(),
            ])?;
        }
        w.into_inner().map_err(|e| Error::Domain(format!("csv buffer: {e}")))
    }

    /// Per-layer four-way breakdown in long form.
    pub fn breakdown_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "language",
            "layer",
            "final_and_agnostic",
            "agnostic_only",
            "final_only",
            "neither",
            "total",
        ])?;
        for (lang, layers) in &self.breakdown {
            for (layer, b) in layers {
                w.write_record([
                    lang.clone(),
                    layer.to_string(),
                    b.final_and_agnostic.to_string(),
                    b.agnostic_only.to_string(),
                    b.final_only.to_string(),
                    b.neither.to_string(),
                    b.total().to_string(),
                ])?;
            }
        }
        w.into_inner().map_err(|e| Error::Domain(format!("csv buffer: {e}")))
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub condition: String,
    pub reference_layer: usize,
    pub audit_layers: Vec<usize>,
    pub max_new_tokens: usize,
    /// Judge only the first generated token.
    pub strict_single_token: bool,
    /// Apply vectors extracted from a different model.
    pub force: bool,
    pub seed: Option<u64>,
    pub split: Option<serde_json::Value>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            condition: "original".into(),
            reference_layer: REFERENCE_LAYER,
            audit_layers: (20..=27).collect(),
            max_new_tokens: 5,
            strict_single_token: false,
            force: false,
            seed: None,
            split: None,
        }
    }
}

impl EvalOptions {
    /// Defaults for a model of the given depth. Models with fewer than 28
    /// layers audit every stream and use the layer at three quarters depth
    /// as reference.
    pub fn for_depth(n_layers: usize) -> Self {
        if n_layers >= 28 {
            return Self::default();
        }
        EvalOptions {
            reference_layer: (n_layers * 3) / 4,
            audit_layers: (0..=n_layers).collect(),
            ..Self::default()
        }
    }
}

/// Refuse vectors extracted from another model unless `force`.
pub fn check_intervention_sources(
    model: &ModelHandle,
    interventions: &[Intervention],
    force: bool,
) -> Result<()> {
    for iv in interventions {
        if let Intervention::ResidualAdd {
            source: Some(src), ..
        } = iv
        {
            if !force && src != model.fingerprint() {
                return Err(Error::FingerprintMismatch {
                    expected: model.fingerprint().to_string(),
                    found: src.clone(),
                });
            }
        }
    }
    Ok(())
}

/// True when the decoded generation contains `answer`, or its first piece
/// is a leading fragment of `answer`.
pub fn generation_matches(
    model: &ModelHandle,
    generated: &[TokenId],
    answer: &str,
) -> Result<bool> {
    let Some(&first) = generated.first() else {
        return Ok(false);
    };
    let tok = model.tokenizer();
    if is_answer_prefix(&tok.decode_token(first)?, answer) {
        return Ok(true);
    }
    Ok(contains_answer(&tok.decode(generated)?, answer))
}

fn evaluate_one(
    model: &ModelHandle,
    triple: &FactTriple,
    language: &Language,
    interventions: &[Intervention],
    opts: &EvalOptions,
    fingerprint: &str,
) -> Result<EvalRecord> {
    let ids = model.tokenizer().encode_with_bos(render_prompt(triple, language)?);
    let mut layers: BTreeSet<usize> = opts.audit_layers.iter().copied().collect();
    layers.insert(opts.reference_layer);
    let capture = CaptureFilter::last_position().with_layers(layers.iter().copied());
    let trace = run_with_interventions(model, &ids, interventions, &capture)?;
    let mut agnostic = BTreeMap::new();
    for &l in &layers {
        agnostic.insert(l, agnostic_correct(model, &trace, l, triple.answer_english())?);
    }
    let n_new = if opts.strict_single_token { 1 } else { opts.max_new_tokens.max(1) };
    let generated = generate(model, &ids, interventions, n_new)?;
    let answer = triple.answer_in(language)?;
    let final_correct = generation_matches(model, &generated, answer)?;
    let agn_ref = agnostic[&opts.reference_layer];
    Ok(EvalRecord {
        relation_id: triple.relation_id.clone(),
        subject_en: triple.subject_english().to_string(),
        language: language.clone(),
        generated_answer: model.tokenizer().decode(&generated)?,
        final_correct,
        agnostic_correct_by_layer: agnostic,
        conversion_outcome: ConversionOutcome::from_flags(agn_ref, final_correct),
        intervention_fingerprint: fingerprint.to_string(),
        step_failure: None,
    })
}

/// Evaluate every triple of `split` in each of `languages` (English is always
/// added when any language is requested) under `interventions`.
pub fn evaluate(
    model: &ModelHandle,
    split: &FactSet,
    languages: &[Language],
    interventions: &[Intervention],
    judge: Option<&Judge>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    check_intervention_sources(model, interventions, opts.force)?;
    if opts.reference_layer > model.n_layers() {
        return Err(Error::Index(format!(
            "reference layer {} beyond model depth {}",
            opts.reference_layer,
            model.n_layers()
        )));
    }
    if let Some(&l) = opts.audit_layers.iter().find(|&&l| l > model.n_layers()) {
        return Err(Error::Index(format!(
            "audit layer {l} beyond model depth {}",
            model.n_layers()
        )));
    }
    let mut langs: BTreeSet<Language> = languages.iter().cloned().collect();
    if !langs.is_empty() {
        langs.insert(Language::en());
    }
    let langs: Vec<Language> = langs.into_iter().collect();
    if !langs.is_empty() && split.is_empty() {
        return Err(Error::Domain("evaluation split is empty".into()));
    }
    let fp = intervention_fingerprint(interventions);
    let jobs: Vec<(&FactTriple, &Language)> = split
        .triples()
        .iter()
        .flat_map(|t| langs.iter().map(move |l| (t, l)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|(t, l)| evaluate_one(model, t, l, interventions, opts, &fp))
        .collect::<Result<Vec<_>>>()?;
    let echo = EvalEcho {
        condition: opts.condition.clone(),
        split_hash: split.content_hash(),
        split: opts.split.clone(),
        seed: opts.seed,
        languages: langs,
        interventions: interventions.iter().map(Intervention::describe).collect(),
        intervention_fingerprint: fp,
        judge_mode: judge.map(|j| j.config().mode),
        reference_layer: opts.reference_layer,
        audit_layers: opts.audit_layers.clone(),
        max_new_tokens: opts.max_new_tokens,
        strict_single_token: opts.strict_single_token,
    };
    Ok(EvalReport::from_records(records, echo))
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub condition: String,
    pub language: String,
    pub n: usize,
    pub final_accuracy: f64,
    pub delta_final_accuracy: f64,
    pub agnostic_rate: f64,
    pub conversion_correctness: Option<f64>,
    pub delta_conversion: Option<f64>,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reference: String,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| Error::Domain(format!("csv buffer: {e}")))
    }

    pub fn best_for(&self, language: &str) -> Option<&str> {
        self.rows
            .iter()
            .find(|r| r.best && r.language == language)
            .map(|r| r.condition.as_str())
    }
}

fn summaries(r: &EvalReport) -> BTreeMap<String, &LanguageSummary> {
    let mut m: BTreeMap<String, &LanguageSummary> =
        r.per_language.iter().map(|(l, s)| (l.to_string(), s)).collect();
    if let Some(s) = &r.non_english {
        m.insert(NON_ENGLISH.to_string(), s);
    }
    m
}

/// Per-language deltas of every condition against `reference`. The best
/// condition per language (highest final accuracy, first by name on ties)
/// is flagged.
pub fn compare_conditions(
    reports: &BTreeMap<String, EvalReport>,
    reference: &str,
) -> Result<Comparison> {
    let (ref_name, base) = match reports.get(reference) {
        Some(r) => (reference.to_string(), r),
        None if reports.len() == 1 => {
            let (k, v) = reports.iter().next().expect("one report");
            (k.clone(), v)
        }
        None => return Err(Error::Key(format!("no reference condition `{reference}`"))),
    };
    for (name, r) in reports {
        if r.config.split_hash != base.config.split_hash {
            return Err(Error::Comparability(format!(
                "`{name}` was evaluated on a different split than `{ref_name}`"
            )));
        }
        if r.config.languages != base.config.languages {
            return Err(Error::Comparability(format!(
                "`{name}` covers different languages than `{ref_name}`"
            )));
        }
    }
    let base_s = summaries(base);
    let mut rows = Vec::new();
    for (name, r) in reports {
        for (lang, s) in summaries(r) {
            let b = base_s.get(&lang).copied();
            rows.push(ComparisonRow {
                condition: name.clone(),
                language: lang,
                n: s.n,
                final_accuracy: s.final_accuracy,
                delta_final_accuracy: s.final_accuracy - b.map_or(0.0, |b| b.final_accuracy),
                agnostic_rate: s.agnostic_rate,
                conversion_correctness: s.conversion_correctness,
                delta_conversion: match (s.conversion_correctness, b.and_then(|b| b.conversion_correctness)) {
                    (Some(a), Some(c)) => Some(a - c),
                    _ => None,
                },
                best: false,
            });
        }
    }
    let langs: BTreeSet<String> = rows.iter().map(|r| r.language.clone()).collect();
    for lang in langs {
        let mut best: Option<usize> = None;
        for (i, r) in rows.iter().enumerate().filter(|(_, r)| r.language == lang) {
            if best.is_none_or(|b| r.final_accuracy > rows[b].final_accuracy) {
                best = Some(i);
            }
        }
        if let Some(b) = best {
            rows[b].best = true;
        }
    }
    rows.sort_by(|a, b| (&a.language, &a.condition).cmp(&(&b.language, &b.condition)));
    Ok(Comparison {
        reference: ref_name,
        rows,
    })
}

/// Mean and population standard deviation of a metric across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSpread {
    pub language: String,
    pub n_seeds: usize,
    pub mean_final_accuracy: f64,
    pub std_final_accuracy: f64,
}

pub fn seed_spread(reports: &[&EvalReport]) -> Vec<SeedSpread> {
    let mut by_lang: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (l, s) in summaries(r) {
            by_lang.entry(l).or_default().push(s.final_accuracy);
        }
    }
    by_lang
        .into_iter()
        .map(|(language, xs)| {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            SeedSpread {
                language,
                n_seeds: xs.len(),
                mean_final_accuracy: mean,
                std_final_accuracy: var.sqrt(),
            }
        })
        .collect()
}
