//! Character n-gram language identification for short outputs.
//!
//! Profiles are Cavnar–Trenkle rank tables over n-grams with `n = 1..=4`,
//! taken from space-padded words of normalized text. Identification first
//! drops every profile whose script histogram is disjoint from the input's
//! scripts, then picks the smallest out-of-place distance. Gating discards
//! tags outside a candidate set and abstains on ambiguous or mixed-script
//! input.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::lexicon::{normalize_surface, LanguageCode, Lexicon};
use crate::script::script_histogram;

pub const MAX_NGRAM: usize = 4;
pub const DEFAULT_MAX_RANKS: usize = 400;
/// Abstain when `(second - best) / second` falls below this.
pub const DEFAULT_MIN_MARGIN: f64 = 0.05;
/// Abstain when less than this share of the input's script-bearing
/// characters belongs to the winning profile's scripts.
pub const DEFAULT_MIN_SCRIPT_COVERAGE: f64 = 0.8;

const STORE_FORMAT: &str = "tbarrier-lid-profiles";
const STORE_VERSION: u32 = 1;
const PAD: char = '_';

#[derive(Debug, thiserror::Error)]
pub enum LidError {
    #[error("no training text for {0}")]
    EmptyCorpus(LanguageCode),
    #[error("{0} appears twice in the training corpus")]
    DuplicateLanguage(LanguageCode),
    #[error("empty training corpus")]
    NoLanguages,
    #[error("candidate {0} has no profile")]
    UnknownCandidate(LanguageCode),
    #[error("text carries no language signal")]
    NoSignal,
    #[error("no profile shares a script with the text")]
    NoEligibleProfile,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("profile store: {0}")]
    Format(String),
}

/// Rank table and script histogram for one language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "StoredProfile", into = "StoredProfile")]
pub struct LanguageProfile {
    lang: LanguageCode,
    ranks: Vec<String>,
    scripts: BTreeMap<String, u64>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct StoredProfile {
    lang: LanguageCode,
    scripts: BTreeMap<String, u64>,
    ranks: Vec<String>,
}

impl From<StoredProfile> for LanguageProfile {
    fn from(s: StoredProfile) -> Self {
        LanguageProfile::from_parts(s.lang, s.ranks, s.scripts)
    }
}

impl From<LanguageProfile> for StoredProfile {
    fn from(p: LanguageProfile) -> Self {
        StoredProfile {
            lang: p.lang,
            scripts: p.scripts,
            ranks: p.ranks,
        }
    }
}

impl LanguageProfile {
    fn from_parts(lang: LanguageCode, ranks: Vec<String>, scripts: BTreeMap<String, u64>) -> Self {
        let index = ranks
            .iter()
            .enumerate()
            .map(|(i, g)| (g.clone(), i))
            .collect();
        Self {
            lang,
            ranks,
            scripts,
            index,
        }
    }

    pub fn lang(&self) -> &LanguageCode {
        &self.lang
    }

    /// N-grams from most to least frequent.
    pub fn ranks(&self) -> &[String] {
        &self.ranks
    }

    pub fn scripts(&self) -> &BTreeMap<String, u64> {
        &self.scripts
    }

    pub fn rank_of(&self, gram: &str) -> Option<usize> {
        self.index.get(gram).copied()
    }
}

/// N-gram counts of normalized text, words padded with `_` on both sides.
fn ngram_counts(text: &str, counts: &mut HashMap<String, u64>) {
    for word in text.split_whitespace() {
        let chars: Vec<char> = std::iter::once(PAD)
            .chain(word.chars())
            .chain(std::iter::once(PAD))
            .collect();
        for n in 1..=MAX_NGRAM {
            for w in chars.windows(n) {
                if n == 1 && w[0] == PAD {
                    continue;
                }
                *counts.entry(w.iter().collect()).or_insert(0) += 1;
            }
        }
    }
}

/// Most frequent first; equal counts in code-point order.
fn ranked(counts: HashMap<String, u64>, limit: usize) -> Vec<String> {
    let mut v: Vec<(String, u64)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.truncate(limit);
    v.into_iter().map(|(g, _)| g).collect()
}

fn text_ranks(normalized: &str) -> Vec<String> {
    let mut counts = HashMap::new();
    ngram_counts(normalized, &mut counts);
    ranked(counts, usize::MAX)
}

/// Outcome of [`identify`]. Lower scores are closer.
#[derive(Debug, Clone, PartialEq)]
pub struct Identification {
    pub lang: LanguageCode,
    /// Out-of-place distance divided by its maximum, in `[0, 1]`.
    pub score: f64,
    /// `(second - best) / second`; 1 when only one profile was eligible.
    pub margin: f64,
    /// Share of the text's script-bearing characters written in a script
    /// of the winning profile.
    pub script_coverage: f64,
}

/// Trained profiles in language order, plus the candidate set used for
/// gating and the abstention thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSet {
    profiles: Vec<LanguageProfile>,
    candidate_set: BTreeSet<LanguageCode>,
    max_ranks: usize,
    pub min_margin: f64,
    pub min_script_coverage: f64,
}

#[derive(Serialize, Deserialize)]
struct Store {
    format: String,
    version: u32,
    max_ranks: usize,
    min_margin: f64,
    min_script_coverage: f64,
    candidate_set: Vec<LanguageCode>,
    profiles: Vec<LanguageProfile>,
}

/// Builds one profile per language. Language order follows `corpus` and
/// breaks distance ties. Every language starts out as a candidate.
pub fn train_profiles(
    corpus: &[(LanguageCode, Vec<String>)],
    max_ranks: usize,
) -> Result<ProfileSet, LidError> {
    if corpus.is_empty() {
        return Err(LidError::NoLanguages);
    }
    let mut seen = BTreeSet::new();
    let mut profiles = Vec::with_capacity(corpus.len());
    for (lang, texts) in corpus {
        if !seen.insert(lang.clone()) {
            return Err(LidError::DuplicateLanguage(lang.clone()));
        }
        let mut counts = HashMap::new();
        let mut scripts = BTreeMap::new();
        for t in texts {
            let norm = normalize_surface(t);
            ngram_counts(&norm, &mut counts);
            for (s, c) in script_histogram(&norm) {
                *scripts.entry(s).or_insert(0) += c;
            }
        }
        if counts.is_empty() {
            return Err(LidError::EmptyCorpus(lang.clone()));
        }
        profiles.push(LanguageProfile::from_parts(
            lang.clone(),
            ranked(counts, max_ranks.max(1)),
            scripts,
        ));
    }
    Ok(ProfileSet {
        profiles,
        candidate_set: seen,
        max_ranks: max_ranks.max(1),
        min_margin: DEFAULT_MIN_MARGIN,
        min_script_coverage: DEFAULT_MIN_SCRIPT_COVERAGE,
    })
}

/// Training corpus made of every lexicon form, in lexicon language order.
/// Concepts listed in `held_out` are skipped.
pub fn corpus_from_lexicon(
    lexicon: &Lexicon,
    held_out: &BTreeSet<String>,
) -> Vec<(LanguageCode, Vec<String>)> {
    lexicon
        .languages()
        .iter()
        .map(|lang| {
            let forms = lexicon
                .concepts()
                .iter()
                .filter(|c| !held_out.contains(&c.id))
                .filter_map(|c| c.forms_for(lang))
                .flatten()
                .cloned()
                .collect();
            (lang.clone(), forms)
        })
        .collect()
}

impl ProfileSet {
    pub fn profiles(&self) -> &[LanguageProfile] {
        &self.profiles
    }

    pub fn profile(&self, lang: &LanguageCode) -> Option<&LanguageProfile> {
        self.profiles.iter().find(|p| &p.lang == lang)
    }

    pub fn languages(&self) -> impl Iterator<Item = &LanguageCode> {
        self.profiles.iter().map(|p| &p.lang)
    }

    pub fn candidate_set(&self) -> &BTreeSet<LanguageCode> {
        &self.candidate_set
    }

    pub fn max_ranks(&self) -> usize {
        self.max_ranks
    }

    /// Replaces the candidate set; every candidate needs a profile.
    pub fn with_candidates(
        mut self,
        candidates: impl IntoIterator<Item = LanguageCode>,
    ) -> Result<Self, LidError> {
        let set: BTreeSet<LanguageCode> = candidates.into_iter().collect();
        if let Some(missing) = set.iter().find(|c| self.profile(c).is_none()) {
            return Err(LidError::UnknownCandidate(missing.clone()));
        }
        self.candidate_set = set;
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        let store = Store {
            format: STORE_FORMAT.into(),
            version: STORE_VERSION,
            max_ranks: self.max_ranks,
            min_margin: self.min_margin,
            min_script_coverage: self.min_script_coverage,
            candidate_set: self.candidate_set.iter().cloned().collect(),
            profiles: self.profiles.clone(),
        };
        let mut s = serde_json::to_string(&store).expect("profiles serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, LidError> {
        let store: Store =
            serde_json::from_str(text).map_err(|e| LidError::Format(e.to_string()))?;
        if store.format != STORE_FORMAT {
            return Err(LidError::Format(format!(
                "unexpected format {:?}",
                store.format
            )));
        }
        if store.version > STORE_VERSION {
            return Err(LidError::Format(format!(
                "store version {} is newer than supported version {STORE_VERSION}",
                store.version
            )));
        }
        if store.profiles.is_empty() {
            return Err(LidError::NoLanguages);
        }
        if let Some(p) = store.profiles.iter().find(|p| p.ranks.is_empty()) {
            return Err(LidError::EmptyCorpus(p.lang.clone()));
        }
        let set = ProfileSet {
            profiles: store.profiles,
            candidate_set: BTreeSet::new(),
            max_ranks: store.max_ranks.max(1),
            min_margin: store.min_margin,
            min_script_coverage: store.min_script_coverage,
        };
        set.with_candidates(store.candidate_set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LidError> {
        let path = path.as_ref();
        let io = |source| LidError::Io {
            path: path.display().to_string(),
            source,
        };
        crate::write_atomic(path, self.to_json().as_bytes()).map_err(io)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LidError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| LidError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// Closest profile to `text` among those sharing a script with it.
pub fn identify(text: &str, profiles: &ProfileSet) -> Result<Identification, LidError> {
    let norm = normalize_surface(text);
    let text_scripts = script_histogram(&norm);
    let script_chars: u64 = text_scripts.values().sum();
    if script_chars == 0 {
        return Err(LidError::NoSignal);
    }
    let grams = text_ranks(&norm);
    let penalty = profiles.max_ranks;
    let max_distance = (grams.len() * penalty) as f64;

    let mut scored: Vec<(usize, f64)> = Vec::new();
    for (i, p) in profiles.profiles.iter().enumerate() {
        if !text_scripts.keys().any(|s| p.scripts.contains_key(s)) {
            continue;
        }
        let distance: usize = grams
            .iter()
            .enumerate()
            .map(|(r, g)| {
                p.rank_of(g)
                    .map_or(penalty, |pr| pr.abs_diff(r).min(penalty))
            })
            .sum();
        scored.push((i, distance as f64 / max_distance));
    }
    // stable sort keeps language order among equal scores
    scored.sort_by(|a, b| a.1.total_cmp(&b.1));
    let &(best_i, best) = scored.first().ok_or(LidError::NoEligibleProfile)?;
    let margin = match scored.get(1) {
        Some(&(_, second)) if second > 0.0 => (second - best) / second,
        Some(_) => 0.0,
        None => 1.0,
    };
    let winner = &profiles.profiles[best_i];
    let covered: u64 = text_scripts
        .iter()
        .filter(|(s, _)| winner.scripts.contains_key(*s))
        .map(|(_, c)| c)
        .sum();
    Ok(Identification {
        lang: winner.lang.clone(),
        score: best,
        margin,
        script_coverage: covered as f64 / script_chars as f64,
    })
}

/// Language tag for an output, or `None` when no reliable tag exists.
///
/// A tag from a lexicon match short-circuits the classifier. Otherwise the
/// classifier's tag is kept only when its margin and script coverage clear
/// the set's thresholds. Either way the tag must be in `candidate_set`.
pub fn gated_identify(
    text: &str,
    profiles: &ProfileSet,
    candidate_set: &BTreeSet<LanguageCode>,
    lexicon_match: Option<&LanguageCode>,
) -> Option<LanguageCode> {
    let tag = match lexicon_match {
        Some(lang) => lang.clone(),
        None => {
            let id = identify(text, profiles).ok()?;
            if id.margin < profiles.min_margin || id.script_coverage < profiles.min_script_coverage
            {
                return None;
            }
            id.lang
        }
    };
    candidate_set.contains(&tag).then_some(tag)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LidCounts {
    pub total: usize,
    pub correct: usize,
    pub wrong: usize,
    pub abstained: usize,
}

impl LidCounts {
    fn add(&mut self, outcome: Option<bool>) {
        self.total += 1;
        match outcome {
            Some(true) => self.correct += 1,
            Some(false) => self.wrong += 1,
            None => self.abstained += 1,
        }
    }

    /// Correct over all samples, abstentions included.
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LidEvaluation {
    pub overall: LidCounts,
    pub per_language: BTreeMap<LanguageCode, LidCounts>,
}

/// Gated accuracy over labeled samples, using the set's own candidates.
pub fn evaluate(profiles: &ProfileSet, samples: &[(LanguageCode, String)]) -> LidEvaluation {
    let mut eval = LidEvaluation::default();
    for (lang, text) in samples {
        let outcome =
            gated_identify(text, profiles, profiles.candidate_set(), None).map(|t| &t == lang);
        eval.overall.add(outcome);
        eval.per_language
            .entry(lang.clone())
            .or_default()
            .add(outcome);
    }
    eval
}
