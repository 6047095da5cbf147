//! Shared helpers for integration tests: synthetic trace generators and a
//! brute-force reimplementation of the metrics.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::IndexedRandom;
use rand::{Rng, RngExt};
use tbarrier::lexicon::{load_lexicon, LanguageCode, Lexicon};
use tbarrier::logitlens::{InstanceTrace, LayerToken, LensStep, TrackedLayers};
use tbarrier::metrics::{
    AttributionMode, LabeledLayerOutput, LabeledTrace, PairReport, SourceAggregate,
    SWITCH_MIN_FINAL_ACC,
};
use tbarrier::refmodel::NormKind;
use tbarrier::trace::TraceMeta;

pub const TOL: f64 = 1e-12;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

pub fn lexicon50() -> Lexicon {
    load_lexicon(fixture("lexicon50.tsv")).unwrap()
}

pub fn lang(s: &str) -> LanguageCode {
    LanguageCode::new(s).unwrap()
}

pub const POOL: [&str; 6] = [
    "eng_Latn", "spa_Latn", "fra_Latn", "deu_Latn", "rus_Cyrl", "hin_Deva",
];

fn random_subset<R: Rng>(rng: &mut R, langs: &[LanguageCode], p: f64) -> Vec<LanguageCode> {
    langs
        .iter()
        .filter(|_| rng.random_bool(p))
        .cloned()
        .collect()
}

/// One pair's worth of labeled traces with arbitrary match patterns.
/// Precedence is `POOL` order.
pub fn random_labeled_pair<R: Rng>(
    rng: &mut R,
    source: &LanguageCode,
    target: &LanguageCode,
    tracked: &[usize],
    n: usize,
) -> Vec<LabeledTrace> {
    let pool: Vec<LanguageCode> = POOL.iter().map(|s| lang(s)).collect();
    let non_source: Vec<LanguageCode> = pool.iter().filter(|l| *l != source).cloned().collect();
    let output_layer = *tracked.last().unwrap();
    let density = rng.random_range(0.05..0.6);
    (0..n)
        .map(|i| {
            let outputs = tracked
                .iter()
                .map(|&layer| {
                    let matched = if rng.random_bool(density) {
                        random_subset(rng, &non_source, 0.3)
                    } else {
                        Vec::new()
                    };
                    let target_match = if source == target {
                        rng.random_bool(0.3)
                    } else {
                        matched.contains(target)
                    };
                    let lid_tag = if matched.is_empty() && rng.random_bool(0.6) {
                        Some(pool.choose(rng).unwrap().clone())
                    } else {
                        None
                    };
                    let attribution = if matched.contains(target) {
                        Some(target.clone())
                    } else {
                        pool.iter()
                            .find(|l| matched.contains(l))
                            .cloned()
                            .or(lid_tag.clone())
                    };
                    LabeledLayerOutput {
                        layer,
                        text: String::new(),
                        matched_langs: matched,
                        target_match,
                        source_match: false,
                        lid_tag,
                        attribution,
                    }
                })
                .collect::<Vec<_>>();
            LabeledTrace {
                instance_id: format!("{source}-{target}-{i:04}"),
                concept_id: format!("c{i}"),
                source_lang: source.clone(),
                target_lang: target.clone(),
                output_layer,
                final_correct: outputs.last().unwrap().target_match,
                outputs,
            }
        })
        .collect()
}

/// Random tracked set over `1..=n_layers` that always holds the output layer.
pub fn random_tracked<R: Rng>(rng: &mut R, n_layers: usize) -> Vec<usize> {
    let mut layers: Vec<usize> = (1..n_layers).filter(|_| rng.random_bool(0.6)).collect();
    layers.push(n_layers);
    layers
}

#[derive(Debug, Clone, Default)]
pub struct OracleRow {
    pub layer: usize,
    pub total: usize,
    pub labeled: usize,
    pub cats: [usize; 4],
    pub accurate: usize,
    pub accurate_on_target: usize,
}

#[derive(Debug, Clone)]
pub struct OraclePair {
    pub n: usize,
    pub final_correct: usize,
    pub intermediate_correct: usize,
    pub either: usize,
    pub d_f: usize,
    pub tl_sum: i64,
    pub tl_clamped_sum: i64,
    pub rows: Vec<OracleRow>,
    pub switch_layer: Option<usize>,
    pub cutoff: usize,
    pub dist_count: usize,
    pub dist: BTreeMap<LanguageCode, f64>,
    pub recall: Option<f64>,
}

/// Straight-line recomputation of every pair-level quantity.
pub fn oracle_pair(
    traces: &[LabeledTrace],
    cutoff_offset: usize,
    mode: AttributionMode,
) -> OraclePair {
    let l = traces[0].output_layer;
    let mut o = OraclePair {
        n: traces.len(),
        final_correct: 0,
        intermediate_correct: 0,
        either: 0,
        d_f: 0,
        tl_sum: 0,
        tl_clamped_sum: 0,
        rows: Vec::new(),
        switch_layer: None,
        cutoff: l.saturating_sub(cutoff_offset),
        dist_count: 0,
        dist: BTreeMap::new(),
        recall: None,
    };
    let mut finals = 0;
    let mut recall_hits = 0;
    for t in traces {
        let fin = t.final_correct;
        let mut int = false;
        for out in &t.outputs {
            if out.layer < l && !out.matched_langs.is_empty() {
                int = true;
            }
        }
        let tl = int as i64 - fin as i64;
        o.final_correct += fin as usize;
        o.intermediate_correct += int as usize;
        o.either += (int || fin) as usize;
        o.d_f += (!fin) as usize;
        o.tl_sum += tl;
        o.tl_clamped_sum += if tl > 0 { tl } else { 0 };
        if fin {
            finals += 1;
            let mut hit = false;
            for out in &t.outputs {
                if out.layer < l && out.matched_langs.iter().any(|m| m != &t.target_lang) {
                    hit = true;
                }
            }
            recall_hits += hit as usize;
        }
    }
    if finals > 0 {
        o.recall = Some(recall_hits as f64 / finals as f64);
    }

    let layers: BTreeSet<usize> = traces
        .iter()
        .flat_map(|t| t.outputs.iter().map(|x| x.layer))
        .collect();
    for &layer in &layers {
        let mut row = OracleRow {
            layer,
            ..Default::default()
        };
        for t in traces {
            for out in t.outputs.iter().filter(|x| x.layer == layer) {
                row.total += 1;
                let correct = !out.matched_langs.is_empty();
                let on_target = out.attribution.as_ref() == Some(&t.target_lang);
                if correct {
                    row.accurate += 1;
                    if on_target {
                        row.accurate_on_target += 1;
                    }
                }
                if out.attribution.is_some() {
                    row.labeled += 1;
                    let idx = match (on_target, correct) {
                        (true, true) => 0,
                        (true, false) => 1,
                        (false, true) => 2,
                        (false, false) => 3,
                    };
                    row.cats[idx] += 1;
                }
            }
        }
        o.rows.push(row);
    }

    let final_acc = o.final_correct as f64 / o.n as f64;
    if final_acc > SWITCH_MIN_FINAL_ACC {
        let defined: Vec<(usize, f64)> = o
            .rows
            .iter()
            .filter(|r| r.accurate > 0)
            .map(|r| (r.layer, r.accurate_on_target as f64 / r.accurate as f64))
            .collect();
        let mut best_rise = 0.0;
        for i in 1..defined.len() {
            let rise = defined[i].1 - defined[i - 1].1;
            if rise > 0.0 && rise >= best_rise {
                best_rise = rise;
                o.switch_layer = Some(defined[i].0);
            }
        }
    }

    let mut weights: BTreeMap<LanguageCode, f64> = BTreeMap::new();
    for t in traces {
        for out in &t.outputs {
            if out.layer >= l || out.layer > o.cutoff {
                continue;
            }
            if out.matched_langs.is_empty() || out.target_match {
                continue;
            }
            o.dist_count += 1;
            match mode {
                AttributionMode::Precedence => {
                    *weights.entry(out.attribution.clone().unwrap()).or_default() += 1.0;
                }
                AttributionMode::Fractional => {
                    for m in &out.matched_langs {
                        *weights.entry(m.clone()).or_default() +=
                            1.0 / out.matched_langs.len() as f64;
                    }
                }
            }
        }
    }
    for (k, w) in weights {
        o.dist.insert(k, w / o.dist_count as f64);
    }
    o
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL
}

fn close_opt(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => close(a, b),
        (None, None) => true,
        _ => false,
    }
}

/// Every field of `r` checked against the oracle; one message per mismatch.
pub fn compare_pair(r: &PairReport, o: &OraclePair) -> Vec<String> {
    let mut bad = Vec::new();
    let mut check = |ok: bool, field: &str| {
        if !ok {
            bad.push(format!("{}->{} {field}", r.source_lang, r.target_lang));
        }
    };
    let n = o.n as f64;
    let ratio = |x: i64| (o.d_f > 0).then(|| x as f64 / o.d_f as f64);
    check(r.n == o.n, "n");
    check(r.final_correct == o.final_correct, "final_correct");
    check(
        r.intermediate_correct == o.intermediate_correct,
        "intermediate_correct",
    );
    check(close(r.final_acc, o.final_correct as f64 / n), "final_acc");
    check(
        close(r.intermediate_acc, o.intermediate_correct as f64 / n),
        "intermediate_acc",
    );
    check(r.d_f == o.d_f, "d_f");
    check(r.tl_sum == o.tl_sum, "tl_sum");
    check(r.tl_clamped_sum == o.tl_clamped_sum, "tl_clamped_sum");
    check(close_opt(r.tlp, ratio(o.tl_sum)), "tlp");
    check(
        close_opt(r.tlp_clamped, ratio(o.tl_clamped_sum)),
        "tlp_clamped",
    );
    check(r.tlp_undefined == (o.d_f == 0), "tlp_undefined");
    check(
        close(r.intermediate_acc_clamped, o.either as f64 / n),
        "intermediate_acc_clamped",
    );
    check(r.switch_layer == o.switch_layer, "switch_layer");
    check(
        r.switch_layer_relative == o.switch_layer.map(|s| s as i64 - r.output_layer as i64),
        "switch_layer_relative",
    );
    check(r.task_language_cutoff == o.cutoff, "task_language_cutoff");
    check(
        r.lang_distribution.count == o.dist_count,
        "lang_distribution.count",
    );
    check(
        r.lang_distribution.fractions.len() == o.dist.len()
            && o.dist.iter().all(|(k, v)| {
                r.lang_distribution
                    .fractions
                    .get(k)
                    .is_some_and(|x| close(*x, *v))
            }),
        "lang_distribution.fractions",
    );
    check(close_opt(r.nontarget_recall, o.recall), "nontarget_recall");
    check(r.layer_profile.len() == o.rows.len(), "layer_profile.len");
    for (row, want) in r.layer_profile.iter().zip(&o.rows) {
        let frac = |c: usize| {
            if want.labeled == 0 {
                0.0
            } else {
                c as f64 / want.labeled as f64
            }
        };
        let ok = row.layer == want.layer
            && row.relative_layer == want.layer as i64 - r.output_layer as i64
            && row.total_count == want.total
            && row.labeled_count == want.labeled
            && close(row.on_target_correct, frac(want.cats[0]))
            && close(row.on_target_incorrect, frac(want.cats[1]))
            && close(row.off_target_correct, frac(want.cats[2]))
            && close(row.off_target_incorrect, frac(want.cats[3]))
            && row.accurate_count == want.accurate
            && close_opt(
                row.target_presence_among_accurate,
                (want.accurate > 0).then(|| want.accurate_on_target as f64 / want.accurate as f64),
            )
            && row.empty == (want.labeled == 0);
        check(ok, &format!("layer_profile[{}]", want.layer));
    }
    bad
}

fn pop_mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (Some(mean), None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
    (Some(mean), Some(var.sqrt()))
}

/// Checks per-source and `Avg` rows against a direct recomputation.
pub fn compare_aggregates(reports: &[PairReport], rows: &[SourceAggregate]) -> Vec<String> {
    let mut bad = Vec::new();
    let mut sources: Vec<String> = Vec::new();
    for r in reports {
        if !sources.contains(&r.source_lang.to_string()) {
            sources.push(r.source_lang.to_string());
        }
    }
    sources.push("Avg".into());
    if rows.len() != sources.len() {
        bad.push(format!(
            "{} aggregate rows, expected {}",
            rows.len(),
            sources.len()
        ));
        return bad;
    }
    for (row, src) in rows.iter().zip(&sources) {
        let members: Vec<&PairReport> = reports
            .iter()
            .filter(|r| src == "Avg" || r.source_lang.as_str() == src)
            .collect();
        let col = |f: &dyn Fn(&PairReport) -> Option<f64>| -> Vec<f64> {
            members.iter().filter_map(|r| f(r)).collect()
        };
        let checks = [
            (
                "final",
                row.final_acc,
                pop_mean_std(&col(&|r| Some(r.final_acc))),
            ),
            (
                "int",
                row.intermediate_acc,
                pop_mean_std(&col(&|r| Some(r.intermediate_acc))),
            ),
            ("tlp", row.tlp, pop_mean_std(&col(&|r| r.tlp))),
        ];
        if row.source != *src || row.n_pairs != members.len() {
            bad.push(format!("aggregate {src}: identity"));
        }
        for (name, got, (mean, std)) in checks {
            if !close_opt(got.mean, mean) || !close_opt(got.std, std) {
                bad.push(format!("aggregate {src}: {name}"));
            }
        }
        let undefined = members.iter().filter(|r| r.tlp.is_none()).count();
        if row.tlp_undefined_pairs != undefined {
            bad.push(format!("aggregate {src}: tlp_undefined_pairs"));
        }
    }
    bad
}

/// Independent labeler without a classifier: lexicon matches only.
pub fn oracle_label(
    lexicon: &Lexicon,
    trace: &InstanceTrace,
    tracked: &TrackedLayers,
) -> LabeledTrace {
    let concept = lexicon
        .concepts()
        .iter()
        .find(|c| c.id == trace.concept_id)
        .unwrap();
    let precedence = lexicon.languages();
    let outputs: Vec<LabeledLayerOutput> = tracked
        .layers()
        .iter()
        .map(|&layer| {
            let text: String = trace
                .steps
                .iter()
                .map(|s| s.per_layer[&layer].text.as_str())
                .collect();
            let norm = lexicon.normalize(&text);
            let has = |lang: &LanguageCode, c: &tbarrier::lexicon::Concept| {
                !norm.is_empty() && c.forms_for(lang).is_some_and(|f| f.contains(&norm))
            };
            let matched: Vec<LanguageCode> = precedence
                .iter()
                .filter(|l| **l != trace.source_lang && has(l, concept))
                .cloned()
                .collect();
            let target_match = has(&trace.target_lang, concept);
            let source_match = has(&trace.source_lang, concept);
            let lid_tag = if !matched.is_empty() {
                None
            } else if source_match {
                Some(trace.source_lang.clone())
            } else {
                precedence
                    .iter()
                    .find(|l| lexicon.concepts().iter().any(|c| has(l, c)))
                    .cloned()
            };
            let attribution = if matched.contains(&trace.target_lang) {
                Some(trace.target_lang.clone())
            } else {
                matched.first().cloned().or(lid_tag.clone())
            };
            LabeledLayerOutput {
                layer,
                text,
                matched_langs: matched,
                target_match,
                source_match,
                lid_tag,
                attribution,
            }
        })
        .collect();
    LabeledTrace {
        instance_id: trace.instance_id.clone(),
        concept_id: trace.concept_id.clone(),
        source_lang: trace.source_lang.clone(),
        target_lang: trace.target_lang.clone(),
        output_layer: tracked.output_layer(),
        final_correct: outputs.last().unwrap().target_match,
        outputs,
    }
}

pub fn synthetic_meta(n_layers: usize, tracked: TrackedLayers) -> TraceMeta {
    TraceMeta {
        model_name: "synthetic".into(),
        n_layers,
        tracked_layers: tracked,
        tokenizer_id: "synthetic".into(),
        norm_kind: NormKind::Rms,
        provenance: BTreeMap::new(),
    }
}

const GIBBERISH: [&str; 6] = ["zzq", "xkcdv", "ъъъ", "ฮฮฮ", "qwrt", "ጰጰ"];

/// Picks a layer text: target, pivot or other-language form of the concept,
/// the source form, another concept's form, gibberish, or nothing.
fn pick_text<R: Rng>(
    rng: &mut R,
    lexicon: &Lexicon,
    concept: &tbarrier::lexicon::Concept,
    source: &LanguageCode,
    target: &LanguageCode,
    bias_target: f64,
) -> String {
    let first = |c: &tbarrier::lexicon::Concept, l: &LanguageCode| {
        c.forms_for(l)
            .and_then(|f| f.iter().next())
            .cloned()
            .unwrap_or_default()
    };
    if rng.random_bool(bias_target) {
        return first(concept, target);
    }
    match rng.random_range(0..6) {
        0 => first(concept, &lang("eng_Latn")),
        1 => first(concept, lexicon.languages().choose(rng).unwrap()),
        2 => first(concept, source),
        3 => {
            let other = lexicon.concepts().choose(rng).unwrap();
            first(other, lexicon.languages().choose(rng).unwrap())
        }
        4 => GIBBERISH.choose(rng).unwrap().to_string(),
        _ => String::new(),
    }
}

fn split_chars(text: &str, parts: usize) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let per = chars.len().div_ceil(parts.max(1)).max(1);
    let mut out: Vec<String> = chars.chunks(per).map(|c| c.iter().collect()).collect();
    out.resize(parts, String::new());
    out
}

fn token_id(text: &str) -> u32 {
    text.bytes()
        .fold(7u32, |h, b| h.wrapping_mul(31).wrapping_add(b as u32))
        % 50_000
}

/// Instance traces whose layer texts are drawn from the lexicon. Deeper
/// layers favour the target form.
pub fn synthetic_traces<R: Rng>(
    rng: &mut R,
    lexicon: &Lexicon,
    pairs: &[(LanguageCode, LanguageCode)],
    concepts_per_pair: usize,
    tracked: &TrackedLayers,
) -> Vec<InstanceTrace> {
    let layers = tracked.layers();
    let mut out = Vec::new();
    for (s, t) in pairs {
        let usable: Vec<_> = lexicon.concepts_for_pair(s, t).collect();
        for concept in usable.iter().take(concepts_per_pair) {
            let n_steps = rng.random_range(0..=3usize);
            let texts: Vec<Vec<String>> = layers
                .iter()
                .enumerate()
                .map(|(i, _)| {
                    let bias = 0.6 * (i + 1) as f64 / layers.len() as f64;
                    split_chars(&pick_text(rng, lexicon, concept, s, t, bias), n_steps)
                })
                .collect();
            let steps = (0..n_steps)
                .map(|k| {
                    let per_layer: BTreeMap<usize, LayerToken> = layers
                        .iter()
                        .zip(&texts)
                        .map(|(&l, parts)| {
                            let text = parts[k].clone();
                            let tok = LayerToken {
                                token: token_id(&text),
                                prob: (rng.random_range(0..1000) as f64) / 1000.0,
                                text,
                            };
                            (l, tok)
                        })
                        .collect();
                    LensStep {
                        step_index: k,
                        final_token: per_layer[&tracked.output_layer()].token,
                        per_layer,
                    }
                })
                .collect();
            out.push(InstanceTrace {
                instance_id: format!("{s}-{t}-{}", concept.id),
                concept_id: concept.id.clone(),
                source_lang: s.clone(),
                target_lang: t.clone(),
                prompt: format!("{s}->{t}: {}", concept.id),
                steps,
                external_tags: BTreeMap::new(),
            });
        }
    }
    out
}
