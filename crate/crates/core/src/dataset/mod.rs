// SPDX-License-Identifier: MIT OR Apache-2.0

//! Parallel multilingual fact triples.
//!
//! One JSONL record per fact:
//!
//! ```json
//! {"relation_id": "country_religion",
//!  "subject": {"en": "Thailand", ...},
//!  "prompt": {"en": "The main religion practiced in Thailand is", ...},
//!  "answer": {"en": "Buddhism", ...},
//!  "relation_tokens": {"en": ["religion", "practiced"], ...}}
//! ```
//!
//! Strings are NFC-normalised on load. Prompts are stored verbatim per
//! language and never templated at runtime.

mod prompts;
mod split;

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub use prompts::{
    build_icl_bundle, build_icl_bundles, derive_translation_prompt, derive_translation_set,
    IclBundle, IclOptions, TranslationItem,
};
pub use split::{split, Split, SplitManifest, SplitSpec, SplitStrategy};

/// ISO-639-1 language code.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Language(pub String);

impl Language {
    pub fn new(code: &str) -> Self {
        Self(code.to_string())
    }
    pub fn en() -> Self {
        Self::new("en")
    }
    pub fn code(&self) -> &str {
        &self.0
    }
    pub fn is_english(&self) -> bool {
        self.0 == "en"
    }

    /// English name used inside translation instructions.
    pub fn english_name(&self) -> Option<&'static str> {
        Some(match self.0.as_str() {
            "en" => "English",
            "zh" => "Chinese",
            "ja" => "Japanese",
            "ko" => "Korean",
            "fr" => "French",
            "es" => "Spanish",
            _ => return None,
        })
    }

    /// Separator placed between a cloze prompt and its answer.
    pub fn answer_separator(&self) -> &'static str {
        match self.0.as_str() {
            "zh" | "ja" => "",
            _ => " ",
        }
    }

    /// Scripts without case distinctions are matched exactly.
    pub fn is_cjk(&self) -> bool {
        matches!(self.0.as_str(), "zh" | "ja" | "ko")
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Borrow<str> for Language {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl From<&str> for Language {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

/// The six languages every record must carry.
pub const CORE_LANGUAGES: [&str; 6] = ["en", "zh", "ja", "ko", "fr", "es"];

/// Relation datasets and their per-language triple counts in the reference
/// release.
pub const RELATION_COUNTS: [(&str, usize); 10] = [
    ("country_currency", 51),
    ("country_language", 45),
    ("book_language", 54),
    ("animal_classification", 47),
    ("object_color", 43),
    ("country_religion", 46),
    ("language_family", 50),
    ("musician_country", 47),
    ("musician_instruments", 45),
    ("person_university", 49),
];

pub fn core_languages() -> Vec<Language> {
    CORE_LANGUAGES.iter().map(|c| Language::new(c)).collect()
}

/// Identity of a triple within a dataset.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TripleKey {
    pub relation_id: String,
    pub subject_en: String,
}

impl fmt::Display for TripleKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.relation_id, self.subject_en)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactTriple {
    pub relation_id: String,
    pub subject: BTreeMap<Language, String>,
    pub prompt: BTreeMap<Language, String>,
    pub answer: BTreeMap<Language, String>,
    pub relation_tokens: BTreeMap<Language, Vec<String>>,
}

impl FactTriple {
    pub fn answer_english(&self) -> &str {
        self.answer.get("en").map(String::as_str).unwrap_or_default()
    }

    pub fn subject_english(&self) -> &str {
        self.subject.get("en").map(String::as_str).unwrap_or_default()
    }

    pub fn key(&self) -> TripleKey {
        TripleKey {
            relation_id: self.relation_id.clone(),
            subject_en: self.subject_english().to_string(),
        }
    }

    pub fn languages(&self) -> impl Iterator<Item = &Language> {
        self.prompt.keys()
    }

    pub fn answer_in(&self, language: &Language) -> Result<&str> {
        self.answer
            .get(language)
            .map(String::as_str)
            .ok_or_else(|| Error::Key(format!("language `{language}` not in triple {}", self.key())))
    }

    pub fn subject_in(&self, language: &Language) -> Result<&str> {
        self.subject
            .get(language)
            .map(String::as_str)
            .ok_or_else(|| Error::Key(format!("language `{language}` not in triple {}", self.key())))
    }

    pub fn relation_tokens_in(&self, language: &Language) -> Result<&[String]> {
        self.relation_tokens
            .get(language)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Key(format!("language `{language}` not in triple {}", self.key())))
    }

    fn normalize(&mut self) {
        let nfc = |s: &mut String| *s = s.nfc().collect();
        self.relation_id = self.relation_id.nfc().collect();
        for m in [&mut self.subject, &mut self.prompt, &mut self.answer] {
            let entries = std::mem::take(m);
            *m = entries
                .into_iter()
                .map(|(k, mut v)| {
                    nfc(&mut v);
                    (k, v)
                })
                .collect();
        }
        for list in self.relation_tokens.values_mut() {
            list.iter_mut().for_each(nfc);
        }
    }

    /// Schema validation; `record` names the triple in error messages.
    pub fn validate(&self, record: &str) -> Result<()> {
        let err = |reason: String| Error::Validation {
            record: record.to_string(),
            reason,
        };
        if self.relation_id.trim().is_empty() {
            return Err(err("empty relation_id".into()));
        }
        let languages: BTreeSet<&str> = CORE_LANGUAGES
            .iter()
            .copied()
            .chain(self.prompt.keys().map(|l| l.code()))
            .collect();
        for lang in languages {
            for (field, map) in [
                ("subject", &self.subject),
                ("prompt", &self.prompt),
                ("answer", &self.answer),
            ] {
                match map.get(lang) {
                    Some(s) if !s.trim().is_empty() => {}
                    _ => return Err(err(format!("missing {field} for language `{lang}`"))),
                }
            }
            match self.relation_tokens.get(lang) {
                Some(toks) if !toks.is_empty() && toks.iter().all(|t| !t.trim().is_empty()) => {}
                _ => return Err(err(format!("missing relation_tokens for language `{lang}`"))),
            }
        }
        Ok(())
    }
}

/// Validated collection of triples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FactSet {
    triples: Vec<FactTriple>,
    per_relation_counts: BTreeMap<String, usize>,
}

impl FactSet {
    /// Validate and index; rejects duplicate `(relation_id, subject[en])`.
    pub fn new(triples: Vec<FactTriple>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut per_relation_counts = BTreeMap::new();
        for (i, t) in triples.iter().enumerate() {
            let record = format!("triple #{} ({})", i + 1, t.key());
            t.validate(&record)?;
            if !seen.insert(t.key()) {
                return Err(Error::Validation {
                    record,
                    reason: "duplicate subject within relation".into(),
                });
            }
            *per_relation_counts.entry(t.relation_id.clone()).or_insert(0) += 1;
        }
        Ok(Self {
            triples,
            per_relation_counts,
        })
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut triples = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut t: FactTriple = serde_json::from_str(line).map_err(|e| Error::Validation {
                record: format!("line {}", n + 1),
                reason: e.to_string(),
            })?;
            t.normalize();
            triples.push(t);
        }
        Self::new(triples)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_jsonl(&text)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for t in &self.triples {
            out.push_str(&serde_json::to_string(t).expect("triple serializes"));
            out.push('\n');
        }
        out
    }

    pub fn triples(&self) -> &[FactTriple] {
        &self.triples
    }
    pub fn len(&self) -> usize {
        self.triples.len()
    }
    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
    pub fn per_relation_counts(&self) -> &BTreeMap<String, usize> {
        &self.per_relation_counts
    }
    pub fn relations(&self) -> impl Iterator<Item = &str> {
        self.per_relation_counts.keys().map(String::as_str)
    }

    /// Number of triples carrying each language.
    pub fn per_language_counts(&self) -> BTreeMap<Language, usize> {
        let mut counts = BTreeMap::new();
        for t in &self.triples {
            for l in t.languages() {
                *counts.entry(l.clone()).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Language-specific instances: the sum of [`Self::per_language_counts`].
    pub fn total_instances(&self) -> usize {
        self.per_language_counts().values().sum()
    }

    pub fn get(&self, key: &TripleKey) -> Option<&FactTriple> {
        self.triples.iter().find(|t| &t.key() == key)
    }

    pub fn of_relation<'a>(&'a self, relation: &'a str) -> impl Iterator<Item = &'a FactTriple> {
        self.triples.iter().filter(move |t| t.relation_id == relation)
    }

    /// Subset preserving order.
    pub fn filter(&self, pred: impl Fn(&FactTriple) -> bool) -> FactSet {
        FactSet::new(self.triples.iter().filter(|t| pred(t)).cloned().collect())
            .expect("subset of a valid set is valid")
    }

    /// Content hash of the canonical JSONL serialization.
    pub fn content_hash(&self) -> String {
        crate::manifest::sha256_hex(self.to_jsonl().as_bytes())
    }
}

/// Returns the stored cloze prompt for `language`.
pub fn render_prompt<'a>(triple: &'a FactTriple, language: &Language) -> Result<&'a str> {
    triple
        .prompt
        .get(language)
        .map(String::as_str)
        .ok_or_else(|| Error::Key(format!("language `{language}` not in triple {}", triple.key())))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn sample_triple(relation: &str, subject: &str) -> FactTriple {
        let mut t = FactTriple {
            relation_id: relation.into(),
            subject: BTreeMap::new(),
            prompt: BTreeMap::new(),
            answer: BTreeMap::new(),
            relation_tokens: BTreeMap::new(),
        };
        for l in CORE_LANGUAGES {
            let lang = Language::new(l);
            t.subject.insert(lang.clone(), format!("{subject}-{l}"));
            t.prompt
                .insert(lang.clone(), format!("The {relation} of {subject}-{l} is"));
            t.answer.insert(lang.clone(), format!("ans-{subject}-{l}"));
            t.relation_tokens.insert(lang, vec![relation.to_string()]);
        }
        t.subject.insert(Language::en(), subject.into());
        t
    }

    #[test]
    fn missing_korean_answer_is_named() {
        let mut t = sample_triple("object_color", "Banana");
        t.answer.remove("ko");
        let err = FactSet::new(vec![t]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("Banana") && msg.contains("`ko`"), "{msg}");
    }

    #[test]
    fn duplicate_subject_rejected() {
        let a = sample_triple("object_color", "Banana");
        let err = FactSet::new(vec![a.clone(), a]).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn counts_two_triples() {
        let set = FactSet::new(vec![
            sample_triple("object_color", "Banana"),
            sample_triple("country_religion", "Thailand"),
        ])
        .unwrap();
        assert_eq!(set.per_relation_counts().values().sum::<usize>(), 2);
        assert_eq!(set.total_instances(), 12);
    }

    #[test]
    fn render_prompt_unknown_language() {
        let t = sample_triple("object_color", "Banana");
        assert!(matches!(render_prompt(&t, &"de".into()), Err(Error::Key(_))));
        assert_eq!(
            render_prompt(&t, &Language::en()).unwrap(),
            render_prompt(&t, &Language::en()).unwrap()
        );
    }

    #[test]
    fn nfc_normalisation_on_load() {
        let mut t = sample_triple("animal_classification", "Frog");
        // "mamífero" with a combining acute accent
        t.answer.insert("es".into(), "mami\u{301}fero".into());
        let line = serde_json::to_string(&t).unwrap();
        let set = FactSet::parse_jsonl(&line).unwrap();
        assert_eq!(set.triples()[0].answer["es"], "mamífero");
    }

    #[test]
    fn additional_language_needs_all_fields() {
        let mut t = sample_triple("object_color", "Banana");
        t.prompt.insert("de".into(), "Die Farbe von Banane ist".into());
        assert!(FactSet::new(vec![t.clone()]).is_err());
        t.subject.insert("de".into(), "Banane".into());
        t.answer.insert("de".into(), "gelb".into());
        t.relation_tokens.insert("de".into(), vec!["Farbe".into()]);
        assert_eq!(FactSet::new(vec![t]).unwrap().per_language_counts().len(), 7);
    }
}
