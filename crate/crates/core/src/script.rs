//! Unicode script helpers shared by language-code validation and LID.

use std::collections::BTreeMap;

use unicode_script::{Script, UnicodeScript};

/// ISO 15924 codes naming script combinations rather than a single Unicode
/// script property value.
fn alias_scripts(code: &str) -> Option<&'static [Script]> {
    match code {
        "Hans" | "Hant" => Some(&[Script::Han]),
        "Jpan" => Some(&[Script::Han, Script::Hiragana, Script::Katakana]),
        "Kore" => Some(&[Script::Hangul, Script::Han]),
        _ => None,
    }
}

/// Unicode scripts denoted by an ISO 15924 code such as `Latn` or `Jpan`.
pub fn scripts_for_code(code: &str) -> Vec<Script> {
    if let Some(scripts) = alias_scripts(code) {
        return scripts.to_vec();
    }
    match Script::from_short_name(code) {
        Some(Script::Common | Script::Inherited | Script::Unknown) | None => Vec::new(),
        Some(s) => vec![s],
    }
}

pub fn script_code_is_known(code: &str) -> bool {
    code.len() == 4
        && code.chars().next().is_some_and(|c| c.is_ascii_uppercase())
        && code.chars().skip(1).all(|c| c.is_ascii_lowercase())
        && !scripts_for_code(code).is_empty()
}

/// Script of a character, or `None` for Common/Inherited/Unknown characters
/// (digits, punctuation, combining marks) that carry no script signal.
pub fn char_script(c: char) -> Option<Script> {
    match c.script() {
        Script::Common | Script::Inherited | Script::Unknown => None,
        s => Some(s),
    }
}

/// Count of script-bearing characters per script, keyed by the four-letter
/// short name so the histogram serializes stably.
pub fn script_histogram(text: &str) -> BTreeMap<String, u64> {
    let mut hist = BTreeMap::new();
    for s in text.chars().filter_map(char_script) {
        *hist.entry(s.short_name().to_string()).or_insert(0) += 1;
    }
    hist
}
