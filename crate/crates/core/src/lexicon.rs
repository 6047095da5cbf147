//! Multiparallel concept lexicons and the exact-match metrics built on them.
//!
//! A lexicon maps each concept to a set of accepted surface forms per
//! language. Forms are normalized once at load time with the same
//! [`normalize_surface`] pipeline that is later applied to candidates, so a
//! match is a plain string comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};
use unicode_normalization::UnicodeNormalization;

use crate::script::script_code_is_known;

/// Lexicon document schema version written by [`Lexicon::to_json`].
pub const LEXICON_SCHEMA_VERSION: &str = "1";

#[derive(Debug, thiserror::Error)]
pub enum LexiconError {
    #[error("cannot read lexicon {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("lexicon parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("lexicon validation error in {location}: {message}")]
    Validation { location: String, message: String },
    #[error("invalid language code {0:?} (expected <iso639-3>_<Script>, e.g. spa_Latn)")]
    BadLanguageCode(String),
    #[error("concept {concept:?} has no forms for language {lang}")]
    UnknownLanguage { concept: String, lang: LanguageCode },
    #[error("language {0} is not part of the lexicon")]
    LanguageNotInLexicon(LanguageCode),
    #[error("unknown concept {0:?}")]
    UnknownConcept(String),
}

/// FLORES-style language code such as `spa_Latn` or `zho_Hans`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LanguageCode(String);

impl LanguageCode {
    pub fn new(code: &str) -> Result<Self, LexiconError> {
        let bad = || LexiconError::BadLanguageCode(code.to_string());
        let (lang, script) = code.split_once('_').ok_or_else(bad)?;
        if lang.len() != 3 || !lang.bytes().all(|b| b.is_ascii_lowercase()) {
            return Err(bad());
        }
        if !script_code_is_known(script) {
            return Err(bad());
        }
        Ok(Self(code.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The ISO 639-3 part, e.g. `spa`.
    pub fn iso639(&self) -> &str {
        &self.0[..3]
    }

    /// The ISO 15924 script suffix, e.g. `Latn`.
    pub fn script(&self) -> &str {
        &self.0[4..]
    }
}

impl fmt::Display for LanguageCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for LanguageCode {
    type Err = LexiconError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

impl TryFrom<String> for LanguageCode {
    type Error = LexiconError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::new(&s)
    }
}

impl From<LanguageCode> for String {
    fn from(code: LanguageCode) -> String {
        code.0
    }
}

/// English display name for the languages of the 36-language study set.
/// Prompts name languages in English; codes outside the table fall back to
/// the code itself.
pub fn language_name(code: &LanguageCode) -> &str {
    match code.as_str() {
        "eng_Latn" => "English",
        "ceb_Latn" => "Cebuano",
        "deu_Latn" => "German",
        "fra_Latn" => "French",
        "nld_Latn" => "Dutch",
        "rus_Cyrl" => "Russian",
        "spa_Latn" => "Spanish",
        "ita_Latn" => "Italian",
        "pol_Latn" => "Polish",
        "zho_Hans" => "Chinese (Simplified)",
        "zho_Hant" => "Chinese (Traditional)",
        "jpn_Jpan" => "Japanese",
        "ukr_Cyrl" => "Ukrainian",
        "vie_Latn" => "Vietnamese",
        "arb_Arab" => "Arabic",
        "por_Latn" => "Portuguese",
        "pes_Arab" => "Persian",
        "cat_Latn" => "Catalan",
        "ind_Latn" => "Indonesian",
        "kor_Hang" => "Korean",
        "tur_Latn" => "Turkish",
        "ces_Latn" => "Czech",
        "ron_Latn" => "Romanian",
        "heb_Hebr" => "Hebrew",
        "uzn_Latn" => "Uzbek",
        "ell_Grek" => "Greek",
        "tam_Taml" => "Tamil",
        "tha_Thai" => "Thai",
        "hin_Deva" => "Hindi",
        "tel_Telu" => "Telugu",
        "swh_Latn" => "Swahili",
        "mar_Deva" => "Marathi",
        "bos_Latn" => "Bosnian",
        "yor_Latn" => "Yoruba",
        "nep_Deva" => "Nepali",
        "amh_Ethi" => "Amharic",
        other => other,
    }
}

/// How candidates and forms are canonicalized before comparison.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// NFC, trim, casefold, strip edge punctuation.
    #[default]
    Standard,
    /// NFC only: case and punctuation are significant.
    Strict,
}

fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

/// Canonical surface form used for exact matching.
///
/// Steps, in order: NFC, trim whitespace, casefold, strip leading and
/// trailing punctuation (general category P). Casefolding can produce
/// non-composed sequences, so NFC is reapplied after it, and trimming and
/// punctuation stripping repeat until neither changes the string. The
/// result is a fixed point: `normalize_surface(normalize_surface(s)) ==
/// normalize_surface(s)`.
pub fn normalize_surface(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    let folded = caseless::default_case_fold_str(nfc.trim());
    let mut s: String = folded.nfc().collect();
    loop {
        let stripped = s
            .trim()
            .trim_matches(|c: char| is_punctuation(c))
            .to_string();
        if stripped == s {
            return s;
        }
        s = stripped;
    }
}

/// Normalization under an explicit [`MatchMode`].
pub fn normalize_with(text: &str, mode: MatchMode) -> String {
    match mode {
        MatchMode::Standard => normalize_surface(text),
        MatchMode::Strict => text.nfc().collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartOfSpeech {
    Noun,
    Verb,
    Adjective,
    Adverb,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub id: String,
    pub pos: PartOfSpeech,
    pub forms: BTreeMap<LanguageCode, BTreeSet<String>>,
    /// Set when the concept deliberately lacks forms for some languages.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub partial: bool,
}

impl Concept {
    pub fn forms_for(&self, lang: &LanguageCode) -> Option<&BTreeSet<String>> {
        self.forms.get(lang)
    }

    pub fn covers(&self, lang: &LanguageCode) -> bool {
        self.forms.contains_key(lang)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LexiconDoc {
    schema_version: String,
    languages: Vec<LanguageCode>,
    concepts: Vec<Concept>,
    #[serde(default, skip_serializing_if = "is_standard")]
    match_mode: MatchMode,
}

fn is_standard(mode: &MatchMode) -> bool {
    *mode == MatchMode::Standard
}

/// A validated, immutable lexicon.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    version: String,
    languages: Vec<LanguageCode>,
    concepts: Vec<Concept>,
    mode: MatchMode,
    by_id: BTreeMap<String, usize>,
    reverse: BTreeMap<(String, LanguageCode), Vec<usize>>,
    warnings: Vec<String>,
}

impl Lexicon {
    /// Builds a lexicon from raw parts, normalizing every form and checking
    /// all invariants.
    pub fn new(
        languages: Vec<LanguageCode>,
        concepts: Vec<Concept>,
        mode: MatchMode,
    ) -> Result<Self, LexiconError> {
        let mut seen = BTreeSet::new();
        for lang in &languages {
            if !seen.insert(lang.clone()) {
                return Err(LexiconError::Validation {
                    location: "languages".into(),
                    message: format!("duplicate language code {lang}"),
                });
            }
        }

        let mut by_id = BTreeMap::new();
        let mut normalized = Vec::with_capacity(concepts.len());
        let mut warnings = Vec::new();
        for (idx, mut concept) in concepts.into_iter().enumerate() {
            let location = format!("concepts[{idx}] (id {:?})", concept.id);
            if concept.id.is_empty() {
                return Err(LexiconError::Validation {
                    location,
                    message: "empty concept id".into(),
                });
            }
            if by_id.insert(concept.id.clone(), idx).is_some() {
                return Err(LexiconError::Validation {
                    location,
                    message: format!("duplicate concept id {:?}", concept.id),
                });
            }
            let mut forms = BTreeMap::new();
            for (lang, raw) in std::mem::take(&mut concept.forms) {
                if !seen.contains(&lang) {
                    return Err(LexiconError::Validation {
                        location: format!("{location}.forms"),
                        message: format!("language {lang} is not declared in the header"),
                    });
                }
                let mut set = BTreeSet::new();
                for form in raw {
                    let norm = normalize_with(&form, mode);
                    if norm.is_empty() {
                        return Err(LexiconError::Validation {
                            location: format!("{location}.forms.{lang}"),
                            message: format!("form {form:?} is empty after normalization"),
                        });
                    }
                    set.insert(norm);
                }
                if set.is_empty() {
                    return Err(LexiconError::Validation {
                        location: format!("{location}.forms.{lang}"),
                        message: "empty form set".into(),
                    });
                }
                forms.insert(lang, set);
            }
            concept.forms = forms;
            let missing: Vec<&LanguageCode> =
                languages.iter().filter(|l| !concept.covers(l)).collect();
            if !missing.is_empty() {
                if !concept.partial {
                    return Err(LexiconError::Validation {
                        location: format!("{location}.forms"),
                        message: format!(
                            "no forms for {} (mark the concept \"partial\" to allow this)",
                            join_codes(&missing)
                        ),
                    });
                }
                warnings.push(format!(
                    "concept {:?} is partial; pairs involving {} skip it",
                    concept.id,
                    join_codes(&missing)
                ));
            }
            normalized.push(concept);
        }

        let mut reverse: BTreeMap<(String, LanguageCode), Vec<usize>> = BTreeMap::new();
        for (idx, concept) in normalized.iter().enumerate() {
            for (lang, set) in &concept.forms {
                for form in set {
                    reverse
                        .entry((form.clone(), lang.clone()))
                        .or_default()
                        .push(idx);
                }
            }
        }

        Ok(Self {
            version: LEXICON_SCHEMA_VERSION.to_string(),
            languages,
            concepts: normalized,
            mode,
            by_id,
            reverse,
            warnings,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self, LexiconError> {
        let doc: LexiconDoc = serde_json::from_str(text).map_err(|e| LexiconError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if doc.schema_version != LEXICON_SCHEMA_VERSION {
            return Err(LexiconError::Validation {
                location: "schema_version".into(),
                message: format!(
                    "unsupported schema version {:?} (expected {LEXICON_SCHEMA_VERSION:?})",
                    doc.schema_version
                ),
            });
        }
        Self::new(doc.languages, doc.concepts, doc.match_mode)
    }

    /// Serializes to the canonical JSON document. Loading the output yields
    /// an identical lexicon.
    pub fn to_json(&self) -> String {
        let doc = LexiconDoc {
            schema_version: self.version.clone(),
            languages: self.languages.clone(),
            concepts: self.concepts.clone(),
            match_mode: self.mode,
        };
        let mut out = serde_json::to_string_pretty(&doc).expect("lexicon serializes");
        out.push('\n');
        out
    }

    /// Parses the tab-separated variant: a header row `id<TAB>pos<TAB>lang...`
    /// followed by one row per concept, with synonyms separated by `|`.
    /// An empty cell marks the concept partial for that language.
    pub fn from_tsv_str(text: &str, mode: MatchMode) -> Result<Self, LexiconError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(LexiconError::Parse {
            line: 1,
            column: 1,
            message: "missing header row".into(),
        })?;
        let cols: Vec<&str> = header.split('\t').collect();
        if cols.len() < 3 || cols[0] != "id" || cols[1] != "pos" {
            return Err(LexiconError::Parse {
                line: 1,
                column: 1,
                message: "header must start with id<TAB>pos<TAB> followed by language codes".into(),
            });
        }
        let languages = cols[2..]
            .iter()
            .map(|c| LanguageCode::new(c.trim()))
            .collect::<Result<Vec<_>, _>>()?;
        let mut concepts = Vec::new();
        for (lineno, line) in lines {
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != cols.len() {
                return Err(LexiconError::Parse {
                    line: lineno + 1,
                    column: 1,
                    message: format!("expected {} columns, found {}", cols.len(), cells.len()),
                });
            }
            let pos: PartOfSpeech =
                serde_json::from_value(serde_json::Value::String(cells[1].trim().to_string()))
                    .map_err(|_| LexiconError::Parse {
                        line: lineno + 1,
                        column: 2,
                        message: format!("unknown part of speech {:?}", cells[1]),
                    })?;
            let mut forms = BTreeMap::new();
            let mut partial = false;
            for (lang, cell) in languages.iter().zip(&cells[2..]) {
                let set: BTreeSet<String> = cell
                    .split('|')
                    .map(str::trim)
                    .filter(|f| !f.is_empty())
                    .map(String::from)
                    .collect();
                if set.is_empty() {
                    partial = true;
                } else {
                    forms.insert(lang.clone(), set);
                }
            }
            concepts.push(Concept {
                id: cells[0].trim().to_string(),
                pos,
                forms,
                partial,
            });
        }
        Self::new(languages, concepts, mode)
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn languages(&self) -> &[LanguageCode] {
        &self.languages
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn mode(&self) -> MatchMode {
        self.mode
    }

    /// Load-time warnings (partial concepts).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn concept(&self, id: &str) -> Result<&Concept, LexiconError> {
        self.by_id
            .get(id)
            .map(|&i| &self.concepts[i])
            .ok_or_else(|| LexiconError::UnknownConcept(id.to_string()))
    }

    pub fn has_language(&self, lang: &LanguageCode) -> bool {
        self.languages.contains(lang)
    }

    /// Position of `lang` in the header order; used as attribution precedence.
    pub fn language_rank(&self, lang: &LanguageCode) -> Option<usize> {
        self.languages.iter().position(|l| l == lang)
    }

    /// Concepts usable for a (source, target) pair: partial concepts missing
    /// either language are skipped.
    pub fn concepts_for_pair<'a>(
        &'a self,
        source: &'a LanguageCode,
        target: &'a LanguageCode,
    ) -> impl Iterator<Item = &'a Concept> + 'a {
        self.concepts
            .iter()
            .filter(move |c| c.covers(source) && c.covers(target))
    }

    /// Concept ids carrying `form` (already normalized) in `lang`.
    pub fn lookup(&self, form: &str, lang: &LanguageCode) -> Vec<&str> {
        self.reverse
            .get(&(form.to_string(), lang.clone()))
            .map(|ids| ids.iter().map(|&i| self.concepts[i].id.as_str()).collect())
            .unwrap_or_default()
    }

    /// Number of (form, language) keys in the reverse index.
    pub fn reverse_index_len(&self) -> usize {
        self.reverse.len()
    }

    pub fn normalize(&self, text: &str) -> String {
        normalize_with(text, self.mode)
    }

    /// Binary exact match of `candidate` against the concept's forms in `lang`.
    pub fn exact_match(
        &self,
        candidate: &str,
        concept: &Concept,
        lang: &LanguageCode,
    ) -> Result<bool, LexiconError> {
        let forms = concept
            .forms_for(lang)
            .ok_or_else(|| LexiconError::UnknownLanguage {
                concept: concept.id.clone(),
                lang: lang.clone(),
            })?;
        let norm = self.normalize(candidate);
        Ok(!norm.is_empty() && forms.contains(&norm))
    }

    /// Every language other than `source` whose forms contain the candidate,
    /// in lexicon order. Non-empty exactly when the task was solved in some
    /// non-source language.
    pub fn task_match(
        &self,
        candidate: &str,
        concept: &Concept,
        source: &LanguageCode,
    ) -> Result<Vec<LanguageCode>, LexiconError> {
        if !self.has_language(source) {
            return Err(LexiconError::LanguageNotInLexicon(source.clone()));
        }
        let norm = self.normalize(candidate);
        if norm.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self
            .languages
            .iter()
            .filter(|l| *l != source)
            .filter(|l| concept.forms_for(l).is_some_and(|f| f.contains(&norm)))
            .cloned()
            .collect())
    }
}

fn join_codes(codes: &[&LanguageCode]) -> String {
    codes
        .iter()
        .map(|c| c.as_str())
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn load_lexicon(path: impl AsRef<Path>) -> Result<Lexicon, LexiconError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| LexiconError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let is_tsv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("tsv"));
    if is_tsv {
        Lexicon::from_tsv_str(&text, MatchMode::Standard)
    } else {
        Lexicon::from_json_str(&text)
    }
}
