// SPDX-License-Identifier: MIT OR Apache-2.0

//! Answer-equivalence judging.
//!
//! Three modes: plain containment, a built-in lemma + lexicon scorer, and an
//! external scoring endpoint. External responses are stored in an
//! append-only JSONL cache keyed by a content hash, so a run can be replayed
//! without the endpoint.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lens::{token_matches_answer, Equivalence};
use crate::manifest::{now_rfc3339, sha256_hex};

/// Environment variable naming the external judge endpoint.
pub const JUDGE_ENDPOINT_ENV: &str = "RECALL_LENS_JUDGE_URL";

/// Scoring guidelines sent to the external judge.
pub const DEFAULT_RUBRIC: &str = "\
Rate how close the candidate word is in meaning to the reference word, from 0 to 1.
1.0: the same word as the reference.
0.8 to 0.99: a synonym or near paraphrase of the reference concept (\"hue\" for \"color\").
0.5 to 0.8: a related or associated term that is not a synonym (\"paint\" for \"color\").
below 0.5: a member or instance of the category rather than the concept itself (\"red\" for \"color\", \"yen\" for \"currency\").
below 0.2: unrelated.
A candidate that looks like a truncated or inflected form of a word is scored as that word (\"pigm\" as \"pigment\").
Reply with JSON: {\"score\": <number>}.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMode {
    ExactSubstring,
    LemmaSynonym,
    ExternalLlm,
}

impl std::fmt::Display for JudgeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            JudgeMode::ExactSubstring => "exact_substring",
            JudgeMode::LemmaSynonym => "lemma_synonym",
            JudgeMode::ExternalLlm => "external_llm",
        })
    }
}

/// What to do when the external judge cannot answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackPolicy {
    #[default]
    Fail,
    Degrade,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeConfig {
    pub mode: JudgeMode,
    pub threshold: f64,
    pub rubric: String,
    pub endpoint: Option<String>,
    #[serde(default)]
    pub fallback: FallbackPolicy,
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
    /// Answer only from the cache; misses count as unavailable.
    #[serde(default)]
    pub replay_only: bool,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    30
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig {
            mode: JudgeMode::LemmaSynonym,
            threshold: 0.8,
            rubric: DEFAULT_RUBRIC.to_string(),
            endpoint: None,
            fallback: FallbackPolicy::Fail,
            cache_path: None,
            replay_only: false,
            timeout_secs: default_timeout(),
        }
    }
}

impl JudgeConfig {
    pub fn with_mode(mode: JudgeMode) -> Self {
        JudgeConfig {
            mode,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Domain(format!(
                "judge threshold must be in (0, 1], got {}",
                self.threshold
            )));
        }
        if self.mode == JudgeMode::ExternalLlm && self.endpoint.is_none() && !self.replay_only {
            return Err(Error::Domain(format!(
                "external judge needs an endpoint (flag or {JUDGE_ENDPOINT_ENV})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub accepted: bool,
    pub score: f64,
    /// Mode that produced the score; differs from the configured mode after
    /// a degrade fallback.
    pub mode: JudgeMode,
}

// ---------------------------------------------------------------------------
// Lemma + lexicon scorer
// ---------------------------------------------------------------------------

pub const SCORE_EXACT: f64 = 1.0;
pub const SCORE_SYNONYM: f64 = 0.9;
pub const SCORE_ASSOCIATED: f64 = 0.65;
pub const SCORE_INSTANCE: f64 = 0.3;

struct Concept {
    words: &'static [&'static str],
    synonyms: &'static [&'static str],
    associated: &'static [&'static str],
    instances: &'static [&'static str],
}

const LEXICON: &[Concept] = &[
    Concept {
        words: &["color", "colour"],
        synonyms: &["hue", "shade", "tint", "tinge", "tone", "coloration", "colouration"],
        associated: &["paint", "pigment", "dye", "palette", "chroma", "appearance"],
        instances: &[
            "red", "blue", "green", "yellow", "black", "white", "orange", "purple", "pink",
            "brown", "gray", "grey",
        ],
    },
    Concept {
        words: &["language"],
        synonyms: &["tongue", "dialect", "idiom", "vernacular", "lingo"],
        associated: &["accent", "speech", "grammar", "vocabulary", "linguistic", "script", "word"],
        instances: &[
            "english", "spanish", "french", "chinese", "japanese", "korean", "german", "latin",
            "arabic", "russian", "portuguese", "italian",
        ],
    },
    Concept {
        words: &["currency"],
        synonyms: &["money", "tender", "coinage"],
        associated: &["cash", "coin", "banknote", "exchange", "payment", "finance", "price"],
        instances: &["dollar", "euro", "yen", "peso", "pound", "yuan", "won", "franc", "rupee"],
    },
    Concept {
        words: &["religion"],
        synonyms: &["faith", "creed", "belief"],
        associated: &["worship", "church", "temple", "god", "spirituality", "theology", "prayer"],
        instances: &[
            "buddhism", "christianity", "islam", "hinduism", "judaism", "catholicism", "shinto",
        ],
    },
    Concept {
        words: &["country"],
        synonyms: &["nation", "state", "land", "homeland"],
        associated: &["territory", "border", "government", "region", "nationality"],
        instances: &["france", "japan", "china", "brazil", "thailand", "spain", "korea", "germany"],
    },
    Concept {
        words: &["college", "university"],
        synonyms: &["college", "university", "academy"],
        associated: &["campus", "degree", "education", "student", "faculty", "school"],
        instances: &["harvard", "oxford", "stanford", "yale", "cambridge", "princeton"],
    },
    Concept {
        words: &["instrument"],
        synonyms: &[],
        associated: &["music", "musical", "melody", "orchestra"],
        instances: &[
            "guitar", "piano", "violin", "drum", "trumpet", "saxophone", "bass", "cello", "flute",
        ],
    },
    Concept {
        words: &["family"],
        synonyms: &["lineage", "branch", "stock"],
        associated: &["ancestry", "relative", "clan", "group"],
        instances: &[],
    },
    Concept {
        words: &["classified", "classify"],
        synonyms: &["categorized", "categorised", "categorize", "grouped", "sorted"],
        associated: &["class", "category", "taxonomy", "type", "kind"],
        instances: &["mammal", "reptile", "bird", "amphibian", "fish", "insect"],
    },
    Concept {
        words: &["biologically", "biological"],
        synonyms: &["biological", "biologically"],
        associated: &["biology", "species", "organism", "scientifically"],
        instances: &[],
    },
    Concept {
        words: &["birth"],
        synonyms: &["nativity", "origin"],
        associated: &["born", "birthplace", "childhood"],
        instances: &[],
    },
    Concept {
        words: &["written", "write"],
        synonyms: &["composed", "authored", "penned"],
        associated: &["text", "wrote", "writing", "manuscript"],
        instances: &[],
    },
    Concept {
        words: &["original"],
        synonyms: &["initial", "first", "primary"],
        associated: &["source", "authentic"],
        instances: &[],
    },
    Concept {
        words: &["practiced", "practised", "practice"],
        synonyms: &["observed", "followed", "exercised"],
        associated: &["ritual", "custom"],
        instances: &[],
    },
    Concept {
        words: &["played", "play"],
        synonyms: &["performed", "perform"],
        associated: &["music", "song"],
        instances: &[],
    },
    Concept {
        words: &["attended", "attend"],
        synonyms: &["studied", "enrolled"],
        associated: &["school", "student", "class"],
        instances: &[],
    },
];

const IRREGULAR: &[(&str, &str)] = &[
    ("wrote", "write"),
    ("written", "write"),
    ("forgot", "forget"),
    ("forgotten", "forget"),
    ("spoken", "speak"),
    ("spoke", "speak"),
    ("born", "birth"),
];

/// Candidate base forms of a word, the word itself first.
pub fn lemma_forms(word: &str) -> Vec<String> {
    let w: String = word
        .trim()
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    let mut out = vec![w.clone()];
    let mut push = |s: String| {
        if !s.is_empty() && !out.contains(&s) {
            out.push(s);
        }
    };
    if let Some(&(_, base)) = IRREGULAR.iter().find(|(f, _)| *f == w) {
        push(base.to_string());
    }
    if let Some(s) = w.strip_suffix("ies") {
        push(format!("{s}y"));
    }
    if let Some(s) = w.strip_suffix("ied") {
        push(format!("{s}y"));
    }
    if let Some(s) = w.strip_suffix("es") {
        push(s.to_string());
    }
    if w.ends_with('s') && !w.ends_with("ss") {
        push(w[..w.len() - 1].to_string());
    }
    if let Some(s) = w.strip_suffix("ed") {
        push(s.to_string());
        push(format!("{s}e"));
    }
    if let Some(s) = w.strip_suffix("ing") {
        push(s.to_string());
        push(format!("{s}e"));
    }
    out
}

fn concept_for(reference: &str) -> Option<&'static Concept> {
    let forms = lemma_forms(reference);
    LEXICON
        .iter()
        .find(|c| forms.iter().any(|f| c.words.contains(&f.as_str())))
}

fn tiers(c: &Concept) -> [(&'static [&'static str], f64); 4] {
    [
        (c.words, SCORE_EXACT),
        (c.synonyms, SCORE_SYNONYM),
        (c.associated, SCORE_ASSOCIATED),
        (c.instances, SCORE_INSTANCE),
    ]
}

/// Lexicon similarity of `candidate` to `reference` in `[0, 1]`; 0 means no
/// known relation. Truncated candidates (at least three letters) are scored
/// as the best-scoring lexicon word they are a prefix of.
pub fn lexicon_score(candidate: &str, reference: &str) -> f64 {
    let cand = lemma_forms(candidate);
    let refs = lemma_forms(reference);
    if cand[0].is_empty() {
        return 0.0;
    }
    if cand.iter().any(|c| refs.contains(c)) {
        return SCORE_EXACT;
    }
    let Some(concept) = concept_for(reference) else {
        return 0.0;
    };
    for (words, score) in tiers(concept) {
        if cand.iter().any(|c| words.contains(&c.as_str())) {
            return score;
        }
    }
    let stem = &cand[0];
    if stem.chars().count() >= 3 {
        for (words, score) in tiers(concept) {
            if words.iter().any(|w| w.len() > stem.len() && w.starts_with(stem.as_str())) {
                return score;
            }
        }
    }
    0.0
}

// ---------------------------------------------------------------------------
// External endpoint
// ---------------------------------------------------------------------------

/// Request body sent to the external judge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub rubric: String,
    pub word: String,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub score: f64,
}

/// Something that can score a request.
pub trait JudgeTransport: Send + Sync {
    fn score(&self, endpoint: &str, request: &JudgeRequest) -> Result<f64>;
}

/// JSON over HTTP POST.
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpTransport { agent }
    }
}

impl JudgeTransport for HttpTransport {
    fn score(&self, endpoint: &str, request: &JudgeRequest) -> Result<f64> {
        let mut resp = self
            .agent
            .post(endpoint)
            .send_json(request)
            .map_err(|e| Error::JudgeUnavailable(format!("{endpoint}: {e}")))?;
        let body: JudgeResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::JudgeUnavailable(format!("{endpoint}: malformed response: {e}")))?;
        Ok(body.score)
    }
}

/// One cached external score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub candidate: String,
    pub reference: String,
    pub mode: JudgeMode,
    pub score: f64,
    pub timestamp: String,
}

pub fn cache_key(mode: JudgeMode, rubric: &str, candidate: &str, reference: &str) -> String {
    let body = serde_json::json!([mode.to_string(), rubric, candidate, reference]);
    sha256_hex(body.to_string().as_bytes())
}

fn read_cache(path: &Path) -> Result<HashMap<String, CacheEntry>> {
    let mut out = HashMap::new();
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(Error::io(path, e)),
    };
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: CacheEntry = serde_json::from_str(&line).map_err(|e| Error::Validation {
            record: format!("{} line {}", path.display(), i + 1),
            reason: e.to_string(),
        })?;
        out.insert(entry.key.clone(), entry);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Judge
// ---------------------------------------------------------------------------

pub struct Judge {
    config: JudgeConfig,
    transport: Box<dyn JudgeTransport>,
    cache: RwLock<HashMap<String, CacheEntry>>,
    writer: Mutex<Option<File>>,
}

impl std::fmt::Debug for Judge {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Judge").field("config", &self.config).finish()
    }
}

impl Judge {
    pub fn new(config: JudgeConfig) -> Result<Self> {
        let t = HttpTransport::new(Duration::from_secs(config.timeout_secs));
        Self::with_transport(config, Box::new(t))
    }

    pub fn with_transport(config: JudgeConfig, transport: Box<dyn JudgeTransport>) -> Result<Self> {
        config.validate()?;
        let (cache, writer) = match &config.cache_path {
            Some(p) => {
                let cache = read_cache(p)?;
                let w = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?;
                (cache, Some(w))
            }
            None => (HashMap::new(), None),
        };
        Ok(Judge {
            config,
            transport,
            cache: RwLock::new(cache),
            writer: Mutex::new(writer),
        })
    }

    pub fn config(&self) -> &JudgeConfig {
        &self.config
    }

    pub fn cached_entries(&self) -> usize {
        self.cache.read().map(|c| c.len()).unwrap_or(0)
    }

    fn accept(&self, score: f64) -> bool {
        score >= SCORE_EXACT || score > self.config.threshold
    }

    fn lemma_verdict(&self, candidate: &str, reference: &str) -> Verdict {
        let score = lexicon_score(candidate, reference);
        Verdict {
            accepted: score > 0.0 && self.accept(score),
            score,
            mode: JudgeMode::LemmaSynonym,
        }
    }

    fn external_score(&self, candidate: &str, reference: &str) -> Result<f64> {
        let key = cache_key(JudgeMode::ExternalLlm, &self.config.rubric, candidate, reference);
        if let Some(e) = self.cache.read().expect("judge cache poisoned").get(&key) {
            return Ok(e.score);
        }
        if self.config.replay_only {
            return Err(Error::JudgeUnavailable(format!(
                "no cached score for ({candidate}, {reference}) in replay mode"
            )));
        }
        let endpoint = self.config.endpoint.as_deref().unwrap_or_default();
        let request = JudgeRequest {
            rubric: self.config.rubric.clone(),
            word: candidate.to_string(),
            reference: reference.to_string(),
        };
        let score = self.transport.score(endpoint, &request)?;
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::JudgeUnavailable(format!(
                "judge returned score {score} outside [0, 1]"
            )));
        }
        let entry = CacheEntry {
            key: key.clone(),
            candidate: candidate.to_string(),
            reference: reference.to_string(),
            mode: JudgeMode::ExternalLlm,
            score,
            timestamp: now_rfc3339(),
        };
        let mut w = self.writer.lock().expect("judge cache writer poisoned");
        let mut cache = self.cache.write().expect("judge cache poisoned");
        if let Some(existing) = cache.get(&key) {
            return Ok(existing.score);
        }
        if let Some(f) = w.as_mut() {
            let mut line = serde_json::to_string(&entry)?;
            line.push('\n');
            let path = self.config.cache_path.clone().unwrap_or_default();
            f.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))?;
            f.flush().map_err(|e| Error::io(&path, e))?;
        }
        cache.insert(key, entry);
        Ok(score)
    }

    pub fn judge_equivalent(&self, candidate: &str, reference: &str) -> Result<Verdict> {
        let (c, r) = (candidate.trim(), reference.trim());
        if c.is_empty() || r.is_empty() {
            return Err(Error::Domain("judge inputs must be non-empty".into()));
        }
        match self.config.mode {
            JudgeMode::ExactSubstring => {
                let ok = token_matches_answer(c, r);
                Ok(Verdict {
                    accepted: ok,
                    score: if ok { 1.0 } else { 0.0 },
                    mode: JudgeMode::ExactSubstring,
                })
            }
            JudgeMode::LemmaSynonym => Ok(self.lemma_verdict(c, r)),
            JudgeMode::ExternalLlm => match self.external_score(c, r) {
                Ok(score) => Ok(Verdict {
                    accepted: self.accept(score),
                    score,
                    mode: JudgeMode::ExternalLlm,
                }),
                Err(e @ Error::JudgeUnavailable(_)) => match self.config.fallback {
                    FallbackPolicy::Fail => Err(e),
                    FallbackPolicy::Degrade => {
                        tracing::warn!(error = %e, "external judge unavailable; using lexicon scorer");
                        Ok(self.lemma_verdict(c, r))
                    }
                },
                Err(e) => Err(e),
            },
        }
    }
}

impl Equivalence for Judge {
    fn equivalent(&self, candidate: &str, reference: &str) -> Result<bool> {
        if candidate.trim().is_empty() || reference.trim().is_empty() {
            return Ok(false);
        }
        Ok(self.judge_equivalent(candidate, reference)?.accepted)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn rubric_examples() {
        let j = Judge::new(JudgeConfig::default()).unwrap();
        let v = j.judge_equivalent("hue", "color").unwrap();
        assert!(v.accepted && (0.8..=0.99).contains(&v.score));
        let v = j.judge_equivalent("red", "color").unwrap();
        assert!(!v.accepted && v.score < 0.5);
        let v = j.judge_equivalent("color", "color").unwrap();
        assert!(v.accepted && v.score == 1.0);
        assert_eq!(lexicon_score("banana", "color"), 0.0);
        assert_eq!(lexicon_score("paint", "color"), SCORE_ASSOCIATED);
    }

    #[test]
    fn lemmas_and_truncations() {
        assert_eq!(lexicon_score("colors", "color"), 1.0);
        assert_eq!(lexicon_score("pigm", "color"), SCORE_ASSOCIATED);
        assert_eq!(lexicon_score("dialects", "language"), SCORE_SYNONYM);
        assert_eq!(lexicon_score("Spanish", "language"), SCORE_INSTANCE);
        assert_eq!(lexicon_score("forgot", "forget"), 1.0);
    }

    #[test]
    fn threshold_and_endpoint_validation() {
        let mut c = JudgeConfig::default();
        c.threshold = 0.0;
        assert!(c.validate().is_err());
        let c = JudgeConfig::with_mode(JudgeMode::ExternalLlm);
        assert!(c.validate().is_err());
    }

    struct Fixed(f64, Arc<AtomicUsize>);
    impl JudgeTransport for Fixed {
        fn score(&self, _: &str, _: &JudgeRequest) -> Result<f64> {
            self.1.fetch_add(1, Ordering::SeqCst);
            Ok(self.0)
        }
    }
    struct Down;
    impl JudgeTransport for Down {
        fn score(&self, e: &str, _: &JudgeRequest) -> Result<f64> {
            Err(Error::JudgeUnavailable(e.to_string()))
        }
    }

    fn external(cache: Option<PathBuf>) -> JudgeConfig {
        JudgeConfig {
            mode: JudgeMode::ExternalLlm,
            endpoint: Some("http://127.0.0.1:9/score".into()),
            cache_path: cache,
            ..Default::default()
        }
    }

    #[test]
    fn external_scores_are_cached_and_replayable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("judge.jsonl");
        let calls = Arc::new(AtomicUsize::new(0));
        let j = Judge::with_transport(external(Some(path.clone())), Box::new(Fixed(0.85, calls.clone())))
            .unwrap();
        assert!(j.judge_equivalent("dialect", "language").unwrap().accepted);
        assert!(j.judge_equivalent("dialect", "language").unwrap().accepted);
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        drop(j);

        let mut cfg = external(Some(path.clone()));
        cfg.replay_only = true;
        let j = Judge::with_transport(cfg, Box::new(Down)).unwrap();
        let v = j.judge_equivalent("dialect", "language").unwrap();
        assert_eq!(v.score, 0.85);
        assert!(matches!(
            j.judge_equivalent("paint", "color"),
            Err(Error::JudgeUnavailable(_))
        ));
        let lines = std::fs::read_to_string(&path).unwrap();
        assert_eq!(lines.lines().count(), 1);
    }

    #[test]
    fn fallback_policy() {
        let j = Judge::with_transport(external(None), Box::new(Down)).unwrap();
        assert!(matches!(
            j.judge_equivalent("hue", "color"),
            Err(Error::JudgeUnavailable(_))
        ));
        let mut cfg = external(None);
        cfg.fallback = FallbackPolicy::Degrade;
        let j = Judge::with_transport(cfg, Box::new(Down)).unwrap();
        let v = j.judge_equivalent("hue", "color").unwrap();
        assert_eq!(v.mode, JudgeMode::LemmaSynonym);
        assert!(v.accepted);
    }

    #[test]
    fn out_of_range_score_is_malformed() {
        let calls = Arc::new(AtomicUsize::new(0));
        let j = Judge::with_transport(external(None), Box::new(Fixed(3.0, calls))).unwrap();
        assert!(matches!(
            j.judge_equivalent("hue", "color"),
            Err(Error::JudgeUnavailable(_))
        ));
    }
}
