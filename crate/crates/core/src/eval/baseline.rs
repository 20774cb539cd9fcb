// SPDX-License-Identifier: MIT OR Apache-2.0

//! Translate-recall-translate prompting baseline.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ConversionOutcome, EvalEcho, EvalRecord, EvalReport};
use crate::dataset::{render_prompt, FactSet, FactTriple, Language};
use crate::error::{Error, Result};
use crate::lens::{contains_answer, token_matches_answer};
use crate::model::{generate, ModelHandle, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrtStep {
    ToEnglish,
    Recall,
    Back,
}

/// First step that went wrong for an incorrect example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepFailure {
    pub step: TrtStep,
    /// The step produced no usable output within its token budget.
    pub truncated: bool,
}

impl StepFailure {
    pub fn label(&self) -> String {
        let n = match self.step {
            TrtStep::ToEnglish => 1,
            TrtStep::Recall => 2,
            TrtStep::Back => 3,
        };
        if self.truncated {
            format!("truncated_at_{n}")
        } else {
            format!("failed_at_{n}")
        }
    }
}

/// Prompt templates. `{language}` is the target language's English name,
/// `{prompt}` the original query, `{english}` the step-1 output and
/// `{answer}` the step-2 output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrtTemplates {
    pub to_english: String,
    pub recall: String,
    pub back: String,
}

impl Default for TrtTemplates {
    fn default() -> Self {
        TrtTemplates {
            to_english: "Translate this text from {language} into English. {language}: {prompt}\nEnglish:".into(),
            recall: "{english}".into(),
            back: "Translate this text from English into {language}. English: {answer}\n{language}:".into(),
        }
    }
}

fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut s = template.to_string();
    for (k, v) in vars {
        s = s.replace(&format!("{{{k}}}"), v);
    }
    s
}

/// Index of the first of the leading `window` pieces that includes
/// `answer_token`, the first token of the gold answer.
pub fn five_token_rule(pieces: &[String], answer_token: &str, window: usize) -> Option<usize> {
    pieces
        .iter()
        .take(window)
        .position(|p| contains_answer(p, answer_token))
}

fn first_piece(model: &ModelHandle, answer: &str) -> Result<String> {
    let tok = model.tokenizer();
    let id = *tok
        .encode(answer)
        .first()
        .ok_or_else(|| Error::Domain(format!("answer `{answer}` has no tokens")))?;
    tok.decode_token(id)
}

struct StepOutput {
    text: String,
    pieces: Vec<String>,
}

/// Generate, keep the first line, report `None` when nothing usable came out
/// (empty line or context overflow).
fn run_step(model: &ModelHandle, prompt: &str, max_tokens: usize) -> Result<Option<StepOutput>> {
    let tok = model.tokenizer();
    let ids = tok.encode_with_bos(prompt);
    let generated: Vec<TokenId> = match generate(model, &ids, &[], max_tokens) {
        Ok(g) => g,
        Err(Error::ContextLength { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let mut kept = Vec::new();
    for &t in &generated {
        let piece = tok.decode_token(t)?;
        if piece.contains('\n') {
            break;
        }
        kept.push(t);
    }
    let text = tok.decode(&kept)?.trim().to_string();
    if text.is_empty() {
        return Ok(None);
    }
    let pieces = kept
        .iter()
        .map(|&t| tok.decode_token(t))
        .collect::<Result<_>>()?;
    Ok(Some(StepOutput { text, pieces }))
}

fn run_example(
    model: &ModelHandle,
    triple: &FactTriple,
    language: &Language,
    max_tokens: usize,
    templates: &TrtTemplates,
) -> Result<EvalRecord> {
    let name = language
        .english_name()
        .ok_or_else(|| Error::Key(format!("no language name for `{language}`")))?;
    let prompt = render_prompt(triple, language)?;
    let answer = triple.answer_in(language)?;
    let mut record = EvalRecord {
        relation_id: triple.relation_id.clone(),
        subject_en: triple.subject_english().to_string(),
        language: language.clone(),
        generated_answer: String::new(),
        final_correct: false,
        agnostic_correct_by_layer: BTreeMap::new(),
        conversion_outcome: ConversionOutcome::NotApplicable,
        intervention_fingerprint: "none".into(),
        step_failure: None,
    };
    let truncated = |step| Some(StepFailure { step, truncated: true });

    let p1 = fill(&templates.to_english, &[("language", name), ("prompt", prompt)]);
    let Some(s1) = run_step(model, &p1, max_tokens)? else {
        record.step_failure = truncated(TrtStep::ToEnglish);
        return Ok(record);
    };
    let p2 = fill(&templates.recall, &[("english", &s1.text), ("language", name)]);
    let Some(s2) = run_step(model, &p2, max_tokens)? else {
        record.step_failure = truncated(TrtStep::Recall);
        return Ok(record);
    };
    let p3 = fill(&templates.back, &[("answer", &s2.text), ("language", name)]);
    let Some(s3) = run_step(model, &p3, max_tokens)? else {
        record.step_failure = truncated(TrtStep::Back);
        return Ok(record);
    };
    record.generated_answer = s3.text.clone();
    record.final_correct = five_token_rule(&s3.pieces, &first_piece(model, answer)?, 5).is_some();
    if !record.final_correct {
        let subject_ok = s1
            .text
            .to_lowercase()
            .contains(&triple.subject_english().to_lowercase());
        let en_first = first_piece(model, triple.answer_english())?;
        let recall_ok = five_token_rule(&s2.pieces, &en_first, 5).is_some()
            || token_matches_answer(&s2.text, triple.answer_english());
        let step = if !subject_ok {
            TrtStep::ToEnglish
        } else if !recall_ok {
            TrtStep::Recall
        } else {
            TrtStep::Back
        };
        record.step_failure = Some(StepFailure {
            step,
            truncated: false,
        });
    }
    Ok(record)
}

/// Three chained generations per example; correct iff one of the first five
/// tokens of the last step matches the target-language answer.
pub fn baseline_translate_recall_translate(
    model: &ModelHandle,
    split: &FactSet,
    language: &Language,
    max_tokens: usize,
    templates: &TrtTemplates,
) -> Result<EvalReport> {
    if language.is_english() {
        return Err(Error::Domain(
            "translate-recall-translate needs a non-English language".into(),
        ));
    }
    if split.is_empty() {
        return Err(Error::Domain("evaluation split is empty".into()));
    }
    let records = split
        .triples()
        .par_iter()
        .map(|t| run_example(model, t, language, max_tokens, templates))
        .collect::<Result<Vec<_>>>()?;
    let echo = EvalEcho {
        condition: "translate_recall_translate".into(),
        split_hash: split.content_hash(),
        split: None,
        seed: None,
        languages: vec![language.clone()],
        interventions: Vec::new(),
        intervention_fingerprint: "none".into(),
        judge_mode: None,
        reference_layer: 0,
        audit_layers: Vec::new(),
        max_new_tokens: max_tokens,
        strict_single_token: false,
    };
    Ok(EvalReport::from_records(records, echo))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen(answer_at: Option<usize>) -> Vec<String> {
        let mut v: Vec<String> = ["The", "animal", "is", "a", "kind", "of", "thing"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        if let Some(i) = answer_at {
            v[i] = "mammal".into();
        }
        v
    }

    #[test]
    fn five_token_window() {
        for i in 0..5 {
            assert_eq!(five_token_rule(&gen(Some(i)), "mammal", 5), Some(i));
        }
        assert_eq!(five_token_rule(&gen(Some(5)), "mammal", 5), None);
        assert_eq!(five_token_rule(&gen(None), "mammal", 5), None);
    }

    #[test]
    fn template_fill() {
        let t = TrtTemplates::default();
        let p = fill(&t.back, &[("answer", "mammal"), ("language", "French")]);
        assert_eq!(p, "Translate this text from English into French. English: mammal\nFrench:");
    }

    #[test]
    fn failure_labels() {
        let f = StepFailure { step: TrtStep::ToEnglish, truncated: false };
        assert_eq!(f.label(), "failed_at_1");
        let f = StepFailure { step: TrtStep::Back, truncated: true };
        assert_eq!(f.label(), "truncated_at_3");
    }
}
