//! Translation loss and layerwise statistics over labeled traces.
//!
//! Labeling runs per tracked layer: the layer's text is matched against the
//! lexicon first (M′ over non-source languages, M against the target), and
//! only unmatched outputs fall back to gated language identification.
//! Aggregates are computed over instances sorted by `instance_id`, so every
//! float is reproducible bit for bit.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::langid::{gated_identify, ProfileSet};
use crate::lexicon::{LanguageCode, Lexicon, LexiconError};
use crate::logitlens::{layer_output, InstanceTrace, LensError, TrackedLayers};

/// Pairs at or below this final accuracy get no layer of switch.
pub const SWITCH_MIN_FINAL_ACC: f64 = 0.05;
/// Task-solving layers run up to `L - DEFAULT_CUTOFF_OFFSET`.
pub const DEFAULT_CUTOFF_OFFSET: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("instance {instance_id}: {source}")]
    Lexicon {
        instance_id: String,
        #[source]
        source: LexiconError,
    },
    #[error("instance {instance_id}: {source}")]
    Lens {
        instance_id: String,
        #[source]
        source: LensError,
    },
    #[error("no instances")]
    Empty,
    #[error("{0}")]
    Inconsistent(String),
}

/// How multi-language matches are credited in language distributions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributionMode {
    /// The single attributed language takes the whole count.
    #[default]
    Precedence,
    /// Each matched language takes an equal share.
    Fractional,
}

/// Settings shared by labeling and reporting.
#[derive(Debug, Clone)]
pub struct LabelOptions {
    /// Languages a tag may take; others are discarded.
    pub candidate_set: BTreeSet<LanguageCode>,
    /// Attribution order among several matched languages. Languages not
    /// listed follow in lexicon order.
    pub precedence: Vec<LanguageCode>,
    /// Take tags from the trace's external tag field instead of running the
    /// in-repo classifier.
    pub use_external_lid: bool,
}

impl LabelOptions {
    /// Every lexicon language is a candidate; precedence is lexicon order.
    pub fn for_lexicon(lexicon: &Lexicon) -> Self {
        Self {
            candidate_set: lexicon.languages().iter().cloned().collect(),
            precedence: lexicon.languages().to_vec(),
            use_external_lid: false,
        }
    }
}

/// One tracked layer's output with its match verdicts and language tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledLayerOutput {
    pub layer: usize,
    pub text: String,
    /// Non-source languages whose forms contain the text, in lexicon order.
    pub matched_langs: Vec<LanguageCode>,
    pub target_match: bool,
    pub source_match: bool,
    /// Gated tag for outputs without a task match.
    pub lid_tag: Option<LanguageCode>,
    pub attribution: Option<LanguageCode>,
}

impl LabeledLayerOutput {
    /// M′: solved in some non-source language.
    pub fn correct(&self) -> bool {
        !self.matched_langs.is_empty()
    }

    pub fn reliable(&self) -> bool {
        self.attribution.is_some()
    }
}

/// A trace with every tracked layer labeled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledTrace {
    pub instance_id: String,
    pub concept_id: String,
    pub source_lang: LanguageCode,
    pub target_lang: LanguageCode,
    pub output_layer: usize,
    /// M at the output layer against the target language.
    pub final_correct: bool,
    /// Ascending by layer; the last entry is the output layer.
    pub outputs: Vec<LabeledLayerOutput>,
}

impl LabeledTrace {
    pub fn output(&self, layer: usize) -> Option<&LabeledLayerOutput> {
        self.outputs.iter().find(|o| o.layer == layer)
    }

    /// Outputs of layers strictly below the output layer.
    pub fn intermediate(&self) -> impl Iterator<Item = &LabeledLayerOutput> {
        let l = self.output_layer;
        self.outputs.iter().filter(move |o| o.layer < l)
    }
}

/// Picks one language out of several matches: the target when it matched,
/// else the first language in `precedence`, else the first match.
pub fn attribute(
    matched: &[LanguageCode],
    target: &LanguageCode,
    precedence: &[LanguageCode],
) -> Option<LanguageCode> {
    if matched.contains(target) {
        return Some(target.clone());
    }
    precedence
        .iter()
        .find(|p| matched.contains(p))
        .or_else(|| matched.first())
        .cloned()
}

/// Language of the first lexicon entry, of any concept, spelled like `text`.
fn lexicon_language(lexicon: &Lexicon, text: &str) -> Option<LanguageCode> {
    let norm = lexicon.normalize(text);
    if norm.is_empty() {
        return None;
    }
    lexicon
        .languages()
        .iter()
        .find(|l| !lexicon.lookup(&norm, l).is_empty())
        .cloned()
}

/// Labels every tracked layer of `trace`. A trace without steps labels as
/// empty output at every layer.
///
/// Order per layer: task match over non-source languages; if none, a match
/// against the source language or any other lexicon entry supplies the tag;
/// otherwise the gated classifier (or the external tag) does.
pub fn label_trace(
    trace: &InstanceTrace,
    tracked: &TrackedLayers,
    lexicon: &Lexicon,
    profiles: Option<&ProfileSet>,
    options: &LabelOptions,
) -> Result<LabeledTrace, MetricsError> {
    let lex_err = |source| MetricsError::Lexicon {
        instance_id: trace.instance_id.clone(),
        source,
    };
    let concept = lexicon.concept(&trace.concept_id).map_err(lex_err)?;
    for lang in [&trace.source_lang, &trace.target_lang] {
        if !concept.covers(lang) {
            return Err(lex_err(LexiconError::UnknownLanguage {
                concept: concept.id.clone(),
                lang: lang.clone(),
            }));
        }
    }
    let layers = tracked.layers();
    let output_layer = tracked.output_layer();

    let mut outputs = Vec::with_capacity(layers.len());
    for &layer in layers {
        let text = layer_output(trace, layer).map_err(|source| MetricsError::Lens {
            instance_id: trace.instance_id.clone(),
            source,
        })?;
        let matched = lexicon
            .task_match(&text, concept, &trace.source_lang)
            .map_err(lex_err)?;
        // M against the target; differs from membership in `matched` only
        // for same-language pairs, where M′ excludes the target
        let target_match = lexicon
            .exact_match(&text, concept, &trace.target_lang)
            .map_err(lex_err)?;
        let source_match = lexicon
            .exact_match(&text, concept, &trace.source_lang)
            .map_err(lex_err)?;
        let lid_tag = if !matched.is_empty() {
            None
        } else if source_match {
            Some(trace.source_lang.clone()).filter(|l| options.candidate_set.contains(l))
        } else if let Some(lang) = lexicon_language(lexicon, &text) {
            Some(lang).filter(|l| options.candidate_set.contains(l))
        } else if options.use_external_lid {
            trace
                .external_tags
                .get(&layer)
                .and_then(|t| LanguageCode::new(t).ok())
                .filter(|l| options.candidate_set.contains(l))
        } else {
            profiles.and_then(|p| gated_identify(&text, p, &options.candidate_set, None))
        };
        let attribution = attribute(&matched, &trace.target_lang, &options.precedence)
            .or_else(|| lid_tag.clone());
        outputs.push(LabeledLayerOutput {
            layer,
            text,
            matched_langs: matched,
            target_match,
            source_match,
            lid_tag,
            attribution,
        });
    }
    let final_correct = outputs.last().is_some_and(|o| o.target_match);
    Ok(LabeledTrace {
        instance_id: trace.instance_id.clone(),
        concept_id: trace.concept_id.clone(),
        source_lang: trace.source_lang.clone(),
        target_lang: trace.target_lang.clone(),
        output_layer,
        final_correct,
        outputs,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub instance_id: String,
    pub final_correct: bool,
    /// M′ = 1 at some tracked layer below the output layer.
    pub intermediate_correct: bool,
    /// Lowest intermediate layer with M′ = 1.
    pub best_layer: Option<usize>,
    /// `intermediate_correct - final_correct`, one of -1, 0, 1.
    pub tl: i8,
}

pub fn instance_tl(labeled: &LabeledTrace) -> InstanceResult {
    let best_layer = labeled
        .intermediate()
        .find(|o| o.correct())
        .map(|o| o.layer);
    let intermediate_correct = best_layer.is_some();
    InstanceResult {
        instance_id: labeled.instance_id.clone(),
        final_correct: labeled.final_correct,
        intermediate_correct,
        best_layer,
        tl: intermediate_correct as i8 - labeled.final_correct as i8,
    }
}

/// Language breakdown of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfileRow {
    pub layer: usize,
    /// `layer - L`: 0 for the output layer, -1 for the one below.
    pub relative_layer: i64,
    /// Outputs at this layer, reliable tag or not.
    pub total_count: usize,
    /// Outputs with an attributed language; the denominator of the four
    /// category fractions.
    pub labeled_count: usize,
    pub on_target_correct: f64,
    pub on_target_incorrect: f64,
    pub off_target_correct: f64,
    pub off_target_incorrect: f64,
    pub accurate_count: usize,
    /// Accurate outputs attributed to the target over all accurate outputs.
    pub target_presence_among_accurate: Option<f64>,
    /// No labeled outputs at this layer; fractions are all zero.
    pub empty: bool,
}

pub fn layer_profiles(labeled: &[LabeledTrace]) -> Vec<LayerProfileRow> {
    #[derive(Default)]
    struct Tally {
        total: usize,
        labeled: usize,
        cats: [usize; 4],
        accurate: usize,
        accurate_on_target: usize,
    }
    let mut tallies: BTreeMap<usize, Tally> = BTreeMap::new();
    let mut output_layer = 0;
    for t in labeled {
        output_layer = output_layer.max(t.output_layer);
        for o in &t.outputs {
            let tally = tallies.entry(o.layer).or_default();
            tally.total += 1;
            let on_target = o.attribution.as_ref() == Some(&t.target_lang);
            if o.correct() {
                tally.accurate += 1;
                tally.accurate_on_target += on_target as usize;
            }
            if o.reliable() {
                tally.labeled += 1;
                let cat = match (on_target, o.correct()) {
                    (true, true) => 0,
                    (true, false) => 1,
                    (false, true) => 2,
                    (false, false) => 3,
                };
                tally.cats[cat] += 1;
            }
        }
    }
    tallies
        .into_iter()
        .map(|(layer, t)| {
            let frac = |c: usize| {
                if t.labeled == 0 {
                    0.0
                } else {
                    c as f64 / t.labeled as f64
                }
            };
            LayerProfileRow {
                layer,
                relative_layer: layer as i64 - output_layer as i64,
                total_count: t.total,
                labeled_count: t.labeled,
                on_target_correct: frac(t.cats[0]),
                on_target_incorrect: frac(t.cats[1]),
                off_target_correct: frac(t.cats[2]),
                off_target_incorrect: frac(t.cats[3]),
                accurate_count: t.accurate,
                target_presence_among_accurate: (t.accurate > 0)
                    .then(|| t.accurate_on_target as f64 / t.accurate as f64),
                empty: t.labeled == 0,
            }
        })
        .collect()
}

/// Layer with the largest rise in target presence over the previous row
/// that has a defined presence. Ties go to the later layer. Absent when
/// `final_acc <= min_final_acc`, with fewer than two defined rows, or when
/// presence never rises.
pub fn layer_of_switch(
    profile: &[LayerProfileRow],
    final_acc: f64,
    min_final_acc: f64,
) -> Option<usize> {
    if final_acc <= min_final_acc {
        return None;
    }
    let defined: Vec<(usize, f64)> = profile
        .iter()
        .filter_map(|r| r.target_presence_among_accurate.map(|p| (r.layer, p)))
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for w in defined.windows(2) {
        let rise = w[1].1 - w[0].1;
        if rise > 0.0 && best.is_none_or(|(_, b)| rise >= b) {
            best = Some((w[1].0, rise));
        }
    }
    best.map(|(layer, _)| layer)
}

/// Distribution of languages over correct off-target outputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LanguageDistribution {
    /// Outputs counted (before fractional splitting).
    pub count: usize,
    pub fractions: BTreeMap<LanguageCode, f64>,
}

impl LanguageDistribution {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// Languages of correct off-target outputs at tracked layers up to and
/// including `cutoff`, never the output layer.
pub fn task_language_distribution(
    labeled: &[LabeledTrace],
    cutoff: usize,
    mode: AttributionMode,
) -> LanguageDistribution {
    let mut weights: BTreeMap<LanguageCode, f64> = BTreeMap::new();
    let mut count = 0;
    for t in labeled {
        for o in t.intermediate().filter(|o| o.layer <= cutoff) {
            if !o.correct() || o.target_match {
                continue;
            }
            count += 1;
            match mode {
                AttributionMode::Precedence => {
                    let lang = o
                        .attribution
                        .clone()
                        .expect("correct outputs are attributed");
                    *weights.entry(lang).or_insert(0.0) += 1.0;
                }
                AttributionMode::Fractional => {
                    let share = 1.0 / o.matched_langs.len() as f64;
                    for l in &o.matched_langs {
                        *weights.entry(l.clone()).or_insert(0.0) += share;
                    }
                }
            }
        }
    }
    let fractions = weights
        .into_iter()
        .map(|(l, w)| (l, w / count as f64))
        .collect();
    LanguageDistribution { count, fractions }
}

/// Share of final-correct instances that were also solved at some
/// intermediate layer in a language other than the target. `None` without
/// final-correct instances.
pub fn nontarget_recall(labeled: &[LabeledTrace]) -> Option<f64> {
    let finals: Vec<&LabeledTrace> = labeled.iter().filter(|t| t.final_correct).collect();
    if finals.is_empty() {
        return None;
    }
    let hits = finals
        .iter()
        .filter(|t| {
            t.intermediate()
                .any(|o| o.matched_langs.iter().any(|l| l != &t.target_lang))
        })
        .count();
    Some(hits as f64 / finals.len() as f64)
}

/// Options for [`pair_report`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub cutoff_offset: usize,
    pub attribution_mode: AttributionMode,
    pub switch_min_final_acc: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            cutoff_offset: DEFAULT_CUTOFF_OFFSET,
            attribution_mode: AttributionMode::Precedence,
            switch_min_final_acc: SWITCH_MIN_FINAL_ACC,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub source_lang: LanguageCode,
    pub target_lang: LanguageCode,
    pub n: usize,
    pub final_correct: usize,
    pub intermediate_correct: usize,
    pub final_acc: f64,
    pub intermediate_acc: f64,
    pub d_f: usize,
    pub tl_sum: i64,
    pub tl_clamped_sum: i64,
    /// `tl_sum / d_f`; `None` when `d_f == 0`.
    pub tlp: Option<f64>,
    pub tlp_clamped: Option<f64>,
    pub tlp_undefined: bool,
    /// Mean over instances of `max(intermediate, final)` correctness.
    pub intermediate_acc_clamped: f64,
    pub output_layer: usize,
    pub layer_profile: Vec<LayerProfileRow>,
    pub switch_layer: Option<usize>,
    pub switch_layer_relative: Option<i64>,
    pub task_language_cutoff: usize,
    pub lang_distribution: LanguageDistribution,
    pub nontarget_recall: Option<f64>,
}

/// Full report for one language pair. Instances are sorted by id first.
pub fn pair_report(
    labeled: &[LabeledTrace],
    options: &ReportOptions,
) -> Result<PairReport, MetricsError> {
    let first = labeled.first().ok_or(MetricsError::Empty)?;
    let (source, target, output_layer) =
        (&first.source_lang, &first.target_lang, first.output_layer);
    if let Some(t) = labeled.iter().find(|t| {
        &t.source_lang != source || &t.target_lang != target || t.output_layer != output_layer
    }) {
        return Err(MetricsError::Inconsistent(format!(
            "instance {} does not belong to pair {source}->{target} at depth {output_layer}",
            t.instance_id
        )));
    }
    let mut sorted: Vec<LabeledTrace> = labeled.to_vec();
    sorted.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    if let Some(w) = sorted
        .windows(2)
        .find(|w| w[0].instance_id == w[1].instance_id)
    {
        return Err(MetricsError::Inconsistent(format!(
            "duplicate instance {}",
            w[0].instance_id
        )));
    }
    let results: Vec<InstanceResult> = sorted.iter().map(instance_tl).collect();

    let n = results.len();
    let final_correct = results.iter().filter(|r| r.final_correct).count();
    let intermediate_correct = results.iter().filter(|r| r.intermediate_correct).count();
    let either = results
        .iter()
        .filter(|r| r.final_correct || r.intermediate_correct)
        .count();
    let d_f = n - final_correct;
    let tl_sum: i64 = results.iter().map(|r| r.tl as i64).sum();
    let tl_clamped_sum: i64 = results.iter().map(|r| r.tl.max(0) as i64).sum();
    let ratio = |x: i64| (d_f > 0).then(|| x as f64 / d_f as f64);
    let final_acc = final_correct as f64 / n as f64;

    let layer_profile = layer_profiles(&sorted);
    let switch_layer = layer_of_switch(&layer_profile, final_acc, options.switch_min_final_acc);
    let cutoff = output_layer.saturating_sub(options.cutoff_offset);
    Ok(PairReport {
        source_lang: source.clone(),
        target_lang: target.clone(),
        n,
        final_correct,
        intermediate_correct,
        final_acc,
        intermediate_acc: intermediate_correct as f64 / n as f64,
        d_f,
        tl_sum,
        tl_clamped_sum,
        tlp: ratio(tl_sum),
        tlp_clamped: ratio(tl_clamped_sum),
        tlp_undefined: d_f == 0,
        intermediate_acc_clamped: either as f64 / n as f64,
        output_layer,
        switch_layer_relative: switch_layer.map(|l| l as i64 - output_layer as i64),
        switch_layer,
        layer_profile,
        task_language_cutoff: cutoff,
        lang_distribution: task_language_distribution(&sorted, cutoff, options.attribution_mode),
        nontarget_recall: nontarget_recall(&sorted),
    })
}

impl PairReport {
    /// Checks the report's internal identities; returns one message per
    /// violation.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                v.push(format!("{}->{}: {msg}", self.source_lang, self.target_lang));
            }
        };
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        check(
            self.n == self.final_correct + self.d_f,
            "n != final_correct + d_F",
        );
        check(
            unit(self.final_acc) && unit(self.intermediate_acc),
            "accuracy outside [0, 1]",
        );
        check(
            self.tl_sum <= self.tl_clamped_sum,
            "tl_sum > tl_clamped_sum",
        );
        check(
            self.tlp_undefined == (self.d_f == 0),
            "tlp flag disagrees with d_F",
        );
        check(
            self.tlp.is_some() == (self.d_f > 0),
            "tlp defined without failures",
        );
        if let (Some(t), Some(c)) = (self.tlp, self.tlp_clamped) {
            check(t <= c, "tlp > tlp_clamped");
            check(unit(c), "tlp_clamped outside [0, 1]");
        }
        check(
            self.intermediate_acc_clamped >= self.final_acc,
            "clamped intermediate accuracy below final accuracy",
        );
        for row in &self.layer_profile {
            let sum = row.on_target_correct
                + row.on_target_incorrect
                + row.off_target_correct
                + row.off_target_incorrect;
            check(
                row.empty || (sum - 1.0).abs() <= 1e-9,
                "layer categories do not sum to 1",
            );
        }
        if !self.lang_distribution.is_empty() {
            let sum: f64 = self.lang_distribution.fractions.values().sum();
            check(
                (sum - 1.0).abs() <= 1e-9,
                "language distribution does not sum to 1",
            );
        }
        v
    }
}

/// Population mean and standard deviation. `std` needs two values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub count: usize,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let count = values.len();
    if count == 0 {
        return MeanStd {
            mean: None,
            std: None,
            count,
        };
    }
    let mean = values.iter().sum::<f64>() / count as f64;
    let std = (count >= 2).then(|| {
        (values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / count as f64).sqrt()
    });
    MeanStd {
        mean: Some(mean),
        std,
        count,
    }
}

/// Summary row: one source language over its targets, or the
/// all-pairs average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceAggregate {
    /// Source language code, or `"Avg"` for the all-pairs row.
    pub source: String,
    pub n_pairs: usize,
    pub final_acc: MeanStd,
    pub intermediate_acc: MeanStd,
    pub tlp: MeanStd,
    /// Pairs left out of the TLP statistics because TLP was undefined.
    pub tlp_undefined_pairs: usize,
}

fn aggregate(source: String, reports: &[&PairReport]) -> SourceAggregate {
    let finals: Vec<f64> = reports.iter().map(|r| r.final_acc).collect();
    let ints: Vec<f64> = reports.iter().map(|r| r.intermediate_acc).collect();
    let tlps: Vec<f64> = reports.iter().filter_map(|r| r.tlp).collect();
    SourceAggregate {
        source,
        n_pairs: reports.len(),
        final_acc: mean_std(&finals),
        intermediate_acc: mean_std(&ints),
        tlp: mean_std(&tlps),
        tlp_undefined_pairs: reports.len() - tlps.len(),
    }
}

/// Per-source aggregates in order of first appearance, followed by the
/// `Avg` row over all pairs.
pub fn aggregate_by_source(reports: &[PairReport]) -> Vec<SourceAggregate> {
    let mut order: Vec<&LanguageCode> = Vec::new();
    for r in reports {
        if !order.contains(&&r.source_lang) {
            order.push(&r.source_lang);
        }
    }
    let mut rows: Vec<SourceAggregate> = order
        .iter()
        .map(|s| {
            let group: Vec<&PairReport> = reports.iter().filter(|r| &r.source_lang == *s).collect();
            aggregate(s.to_string(), &group)
        })
        .collect();
    if !reports.is_empty() {
        rows.push(aggregate("Avg".into(), &reports.iter().collect::<Vec<_>>()));
    }
    rows
}
