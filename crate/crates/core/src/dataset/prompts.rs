// SPDX-License-Identifier: MIT OR Apache-2.0

//! Explicit-translation prompts and few-shot bundles.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{render_prompt, FactSet, FactTriple, Language, TripleKey};
use crate::error::{Error, Result};
use crate::manifest::derive_seed;

/// `Please translate this word into <Language>. Word: <answer_en>, Translation:`
pub fn derive_translation_prompt(triple: &FactTriple, target: &Language) -> Result<String> {
    if target.is_english() {
        return Err(Error::Domain(
            "translation target must differ from English".into(),
        ));
    }
    let name = target
        .english_name()
        .ok_or_else(|| Error::Key(format!("no language name for `{target}`")))?;
    Ok(format!(
        "Please translate this word into {name}. Word: {}, Translation:",
        triple.answer_english()
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationItem {
    pub key: TripleKey,
    pub language: Language,
    pub prompt: String,
    /// Expected completion: the triple's answer in the target language.
    pub expected: String,
}

/// One translation prompt per (triple, non-English language) pair.
pub fn derive_translation_set(set: &FactSet) -> Result<Vec<TranslationItem>> {
    let mut out = Vec::new();
    for t in set.triples() {
        for lang in t.languages().filter(|l| !l.is_english()) {
            out.push(TranslationItem {
                key: t.key(),
                language: lang.clone(),
                prompt: derive_translation_prompt(t, lang)?,
                expected: t.answer_in(lang)?.to_string(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclOptions {
    pub k: usize,
    pub seed: u64,
    /// Restrict demonstrations to the query's relation.
    pub same_relation_only: bool,
}

impl Default for IclOptions {
    fn default() -> Self {
        Self {
            k: 5,
            seed: 0,
            same_relation_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclBundle {
    pub query: TripleKey,
    pub language: Language,
    pub demos: Vec<TripleKey>,
    /// Demonstrations (`prompt answer` lines) followed by the query prompt.
    pub prompt: String,
    /// Gold answer of the query in `language`.
    pub answer: String,
}

/// Few-shot bundle for `query` with demonstrations drawn from `pool`.
pub fn build_icl_bundle(
    pool: &FactSet,
    query: &FactTriple,
    language: &Language,
    opts: &IclOptions,
) -> Result<IclBundle> {
    let query_key = query.key();
    let query_prompt = render_prompt(query, language)?;
    let mut candidates: Vec<&FactTriple> = pool
        .triples()
        .iter()
        .filter(|t| t.key() != query_key)
        .filter(|t| !opts.same_relation_only || t.relation_id == query.relation_id)
        .collect();
    if opts.k > 0 && candidates.len() < opts.k {
        return Err(Error::InsufficientData(format!(
            "{} demonstrations requested for {query_key} but only {} available",
            opts.k,
            candidates.len()
        )));
    }
    candidates.sort_by_key(|t| t.key());
    let label = format!("icl/{language}/{query_key}");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &label));
    candidates.shuffle(&mut rng);
    candidates.truncate(opts.k);

    let sep = language.answer_separator();
    let mut prompt = String::new();
    for d in &candidates {
        prompt.push_str(render_prompt(d, language)?);
        prompt.push_str(sep);
        prompt.push_str(d.answer_in(language)?);
        prompt.push('\n');
    }
    prompt.push_str(query_prompt);
    Ok(IclBundle {
        query: query_key,
        language: language.clone(),
        demos: candidates.iter().map(|t| t.key()).collect(),
        prompt,
        answer: query.answer_in(language)?.to_string(),
    })
}

/// One bundle per triple of `set`, each using the rest of `set` as the
/// demonstration pool.
pub fn build_icl_bundles(
    set: &FactSet,
    language: &Language,
    opts: &IclOptions,
) -> Result<Vec<IclBundle>> {
    set.triples()
        .iter()
        .map(|q| build_icl_bundle(set, q, language, opts))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::sample_triple;

    fn set(n: usize) -> FactSet {
        FactSet::new(
            (0..n)
                .map(|i| sample_triple(if i % 2 == 0 { "a" } else { "b" }, &format!("s{i}")))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn translation_prompt_format_and_english_rejected() {
        let mut t = sample_triple("animal_classification", "Frog");
        t.answer.insert(Language::en(), "mammal".into());
        assert_eq!(
            derive_translation_prompt(&t, &"es".into()).unwrap(),
            "Please translate this word into Spanish. Word: mammal, Translation:"
        );
        assert!(matches!(
            derive_translation_prompt(&t, &Language::en()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn translation_set_is_five_per_triple() {
        let s = set(4);
        assert_eq!(derive_translation_set(&s).unwrap().len(), 5 * s.len());
    }

    #[test]
    fn bundle_excludes_query_and_is_deterministic() {
        let s = set(20);
        let q = &s.triples()[3];
        let opts = IclOptions::default();
        let b = build_icl_bundle(&s, q, &"fr".into(), &opts).unwrap();
        assert_eq!(b.demos.len(), 5);
        assert!(!b.demos.contains(&q.key()));
        assert!(b.prompt.ends_with(render_prompt(q, &"fr".into()).unwrap()));
        assert_eq!(b.prompt.lines().count(), 6);
        assert_eq!(b, build_icl_bundle(&s, q, &"fr".into(), &opts).unwrap());
    }

    #[test]
    fn zero_shot_is_bare_prompt() {
        let s = set(2);
        let q = &s.triples()[0];
        let opts = IclOptions {
            k: 0,
            ..IclOptions::default()
        };
        let b = build_icl_bundle(&s, q, &Language::en(), &opts).unwrap();
        assert_eq!(b.prompt, render_prompt(q, &Language::en()).unwrap());
    }

    #[test]
    fn too_few_demonstrations() {
        let s = set(5);
        let err = build_icl_bundle(&s, &s.triples()[0], &Language::en(), &IclOptions::default());
        assert!(matches!(err, Err(Error::InsufficientData(_))));
    }

    #[test]
    fn same_relation_flag() {
        let s = set(20);
        let q = &s.triples()[0];
        let opts = IclOptions {
            same_relation_only: true,
            ..IclOptions::default()
        };
        let b = build_icl_bundle(&s, q, &Language::en(), &opts).unwrap();
        assert!(b.demos.iter().all(|k| k.relation_id == q.relation_id));
    }
}
