//! End-to-end orchestration: prompts, trace generation on the reference
//! model, analysis of trace files, and exports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::langid::{LidError, ProfileSet};
use crate::lexicon::{language_name, load_lexicon, Concept, LanguageCode, Lexicon, LexiconError};
use crate::logitlens::{iterative_lens_decode, InstanceTrace, LensError, TrackedLayers};
use crate::metrics::{
    aggregate_by_source, instance_tl, label_trace, nontarget_recall, pair_report, AttributionMode,
    LabelOptions, LabeledTrace, MetricsError, ReportOptions,
};
use crate::refmodel::{
    load_weights, ModelBundle, ModelConfig, ModelError, Tokenizer, TrainExample, BOS, EOS,
};
use crate::report::{
    AnalysisSettings, LidSettings, Overall, ReportError, RunReport, REPORT_VERSION,
};
use crate::trace::{read_all, validate, write_traces, TraceError, TraceMeta};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lens(#[from] LensError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Lid(#[from] LidError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("trace file has no records")]
    EmptyTrace,
    #[error("trace file failed validation:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
    #[error("instances do not fit the lexicon: {}", .0.join(", "))]
    Mismatch(Vec<String>),
    #[error("worker pool: {0}")]
    Workers(String),
}

impl PipelineError {
    /// Failures caused by bad input data rather than bad usage.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            PipelineError::Invalid(_) | PipelineError::Mismatch(_) | PipelineError::EmptyTrace
        )
    }
}

/// Known prompt templates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptTemplate {
    /// English instruction asking for a single-word translation.
    #[default]
    #[serde(rename = "translate-word")]
    TranslateWord,
}

impl PromptTemplate {
    pub fn id(&self) -> &'static str {
        match self {
            PromptTemplate::TranslateWord => "translate-word",
        }
    }

    pub fn from_id(id: &str) -> Result<Self, PipelineError> {
        match id {
            "translate-word" => Ok(PromptTemplate::TranslateWord),
            other => Err(PipelineError::Config(format!(
                "unknown prompt template {other:?}"
            ))),
        }
    }

    pub fn render(&self, source: &LanguageCode, target: &LanguageCode, word: &str) -> String {
        match self {
            PromptTemplate::TranslateWord => format!(
                "Translate the following word from {} to {}. Respond with a single word.\nWord: {}\nTranslation: ",
                language_name(source),
                language_name(target),
                word
            ),
        }
    }
}

/// Parses `spa_Latn:fra_Latn`.
pub fn parse_pair(s: &str) -> Result<(LanguageCode, LanguageCode), PipelineError> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| PipelineError::Config(format!("pair {s:?} is not SOURCE:TARGET")))?;
    Ok((LanguageCode::new(a.trim())?, LanguageCode::new(b.trim())?))
}

/// Every source crossed with every target, source-major. A source listed
/// among the targets pairs with itself.
pub fn pair_grid(
    sources: &[LanguageCode],
    targets: &[LanguageCode],
) -> Vec<(LanguageCode, LanguageCode)> {
    sources
        .iter()
        .flat_map(|s| targets.iter().map(move |t| (s.clone(), t.clone())))
        .collect()
}

/// The word shown in the prompt: the first form in code-point order.
pub fn source_word<'a>(concept: &'a Concept, lang: &LanguageCode) -> Option<&'a str> {
    concept
        .forms_for(lang)
        .and_then(|f| f.iter().next())
        .map(String::as_str)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub instance_id: String,
    pub concept_id: String,
    pub source: LanguageCode,
    pub target: LanguageCode,
    pub prompt: String,
}

/// One instance per usable concept and pair, pair-major. Partial concepts
/// missing either language are skipped.
pub fn build_instances(
    lexicon: &Lexicon,
    pairs: &[(LanguageCode, LanguageCode)],
    template: PromptTemplate,
    concept_limit: Option<usize>,
) -> Result<Vec<Instance>, PipelineError> {
    let mut out = Vec::new();
    for (s, t) in pairs {
        for lang in [s, t] {
            if !lexicon.has_language(lang) {
                return Err(LexiconError::LanguageNotInLexicon(lang.clone()).into());
            }
        }
        for c in lexicon
            .concepts_for_pair(s, t)
            .take(concept_limit.unwrap_or(usize::MAX))
        {
            let word = source_word(c, s).expect("concept covers source");
            out.push(Instance {
                instance_id: format!("{s}-{t}-{}", c.id),
                concept_id: c.id.clone(),
                source: s.clone(),
                target: t.clone(),
                prompt: template.render(s, t, word),
            });
        }
    }
    Ok(out)
}

pub fn prompt_tokens(tokenizer: &Tokenizer, prompt: &str) -> Vec<u32> {
    let mut v = vec![BOS];
    v.extend(tokenizer.encode(prompt));
    v
}

/// End of sequence plus every newline piece.
pub fn stop_tokens(tokenizer: &Tokenizer) -> Vec<u32> {
    let mut v = vec![EOS];
    v.extend(tokenizer.newline_ids());
    v
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| PipelineError::Workers(e.to_string()))
}

/// Decodes every instance; output order follows `instances` whatever the
/// worker count.
pub fn run_instances(
    bundle: &ModelBundle,
    instances: &[Instance],
    tracked: &TrackedLayers,
    max_steps: usize,
    workers: usize,
) -> Result<Vec<InstanceTrace>, PipelineError> {
    let stop = stop_tokens(bundle.tokenizer());
    pool(workers)?.install(|| {
        instances
            .par_iter()
            .map(|inst| {
                let tokens = prompt_tokens(bundle.tokenizer(), &inst.prompt);
                let steps = iterative_lens_decode(bundle, &tokens, tracked, max_steps, &stop)?;
                Ok(InstanceTrace {
                    instance_id: inst.instance_id.clone(),
                    concept_id: inst.concept_id.clone(),
                    source_lang: inst.source.clone(),
                    target_lang: inst.target.clone(),
                    prompt: inst.prompt.clone(),
                    steps,
                    external_tags: BTreeMap::new(),
                })
            })
            .collect()
    })
}

fn default_tracked() -> String {
    format!("last:{}", crate::logitlens::DEFAULT_TRACKED_LAST)
}

fn default_max_steps() -> usize {
    crate::logitlens::DEFAULT_MAX_STEPS
}

fn default_workers() -> usize {
    1
}

fn default_model_name() -> String {
    "refmodel".into()
}

/// Settings for [`cmd_run`]; loadable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub lexicon: PathBuf,
    /// Weight file; when absent the model is initialized from `init`.
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub init: Option<ModelConfig>,
    #[serde(default = "default_model_name")]
    pub model_name: String,
    /// `SOURCE:TARGET` entries.
    #[serde(default)]
    pub pairs: Vec<String>,
    /// Crossed with `targets` when `pairs` is empty.
    #[serde(default)]
    pub sources: Vec<String>,
    #[serde(default)]
    pub targets: Vec<String>,
    #[serde(default)]
    pub template: PromptTemplate,
    #[serde(default = "default_tracked")]
    pub tracked: String,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default)]
    pub concept_limit: Option<usize>,
    pub traces: PathBuf,
    #[serde(default)]
    pub report: Option<PathBuf>,
    #[serde(default)]
    pub lid_profiles: Option<PathBuf>,
    #[serde(default)]
    pub attribution: AttributionMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl RunConfig {
    pub fn new(lexicon: impl Into<PathBuf>, traces: impl Into<PathBuf>) -> Self {
        Self {
            lexicon: lexicon.into(),
            model: None,
            init: None,
            model_name: default_model_name(),
            pairs: Vec::new(),
            sources: Vec::new(),
            targets: Vec::new(),
            template: PromptTemplate::default(),
            tracked: default_tracked(),
            max_steps: default_max_steps(),
            concept_limit: None,
            traces: traces.into(),
            report: None,
            lid_profiles: None,
            attribution: AttributionMode::default(),
            seed: 0,
            workers: default_workers(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn resolved_pairs(&self) -> Result<Vec<(LanguageCode, LanguageCode)>, PipelineError> {
        if !self.pairs.is_empty() {
            return self.pairs.iter().map(|p| parse_pair(p)).collect();
        }
        let parse = |v: &[String]| -> Result<Vec<LanguageCode>, PipelineError> {
            v.iter().map(|s| Ok(LanguageCode::new(s)?)).collect()
        };
        let grid = pair_grid(&parse(&self.sources)?, &parse(&self.targets)?);
        if grid.is_empty() {
            return Err(PipelineError::Config("no language pairs configured".into()));
        }
        Ok(grid)
    }

    fn load_model(&self) -> Result<ModelBundle, PipelineError> {
        match (&self.model, &self.init) {
            (Some(path), _) => load_weights(path).map_err(|e| match e {
                ModelError::Io { path, source } => PipelineError::Config(format!(
                    "cannot read model {path}: {source} (create one with `model init` or `model train`)"
                )),
                e => e.into(),
            }),
            (None, Some(init)) => {
                let mut c = init.clone();
                c.seed = self.seed;
                Ok(ModelBundle::init_seeded(c)?)
            }
            (None, None) => Err(PipelineError::Config(
                "no model: set `model` to a weight file or give an `init` table".into(),
            )),
        }
    }
}

fn load_lexicon_hint(path: &Path) -> Result<Lexicon, PipelineError> {
    load_lexicon(path).map_err(|e| match e {
        LexiconError::Io { path, source } => PipelineError::Config(format!(
            "cannot read lexicon {path}: {source} (see README for the lexicon format)"
        )),
        e => e.into(),
    })
}

pub fn trace_meta(
    bundle: &ModelBundle,
    model_name: &str,
    tracked: &TrackedLayers,
    provenance: BTreeMap<String, String>,
) -> TraceMeta {
    TraceMeta {
        model_name: model_name.into(),
        n_layers: bundle.n_layers(),
        tracked_layers: tracked.clone(),
        tokenizer_id: bundle.tokenizer().id(),
        norm_kind: bundle.config().norm_kind,
        provenance,
    }
}

/// Generates the trace file described by `config` and returns its record
/// count.
pub fn cmd_run(config: &RunConfig) -> Result<usize, PipelineError> {
    let lexicon = load_lexicon_hint(&config.lexicon)?;
    let bundle = config.load_model()?;
    let tracked = TrackedLayers::parse(&config.tracked, bundle.n_layers())?;
    let pairs = config.resolved_pairs()?;
    let instances = build_instances(&lexicon, &pairs, config.template, config.concept_limit)?;
    let traces = run_instances(
        &bundle,
        &instances,
        &tracked,
        config.max_steps,
        config.workers,
    )?;
    let provenance = BTreeMap::from([
        ("template".to_string(), config.template.id().to_string()),
        ("max_steps".to_string(), config.max_steps.to_string()),
        ("tracked".to_string(), config.tracked.clone()),
        ("seed".to_string(), config.seed.to_string()),
        ("model_checksum".to_string(), bundle.checksum()),
    ]);
    let meta = trace_meta(&bundle, &config.model_name, &tracked, provenance);
    write_traces(&config.traces, &meta, &traces)?;
    Ok(traces.len())
}

/// Analysis knobs beyond the lexicon and profiles.
#[derive(Debug, Clone)]
pub struct AnalyzeOptions {
    pub label: LabelOptions,
    pub report: ReportOptions,
    pub workers: usize,
}

impl AnalyzeOptions {
    pub fn for_lexicon(lexicon: &Lexicon) -> Self {
        Self {
            label: LabelOptions::for_lexicon(lexicon),
            report: ReportOptions::default(),
            workers: 1,
        }
    }
}

fn check_fit(lexicon: &Lexicon, traces: &[InstanceTrace]) -> Result<(), PipelineError> {
    let bad: Vec<String> = traces
        .iter()
        .filter(|t| {
            lexicon
                .concept(&t.concept_id)
                .map(|c| !(c.covers(&t.source_lang) && c.covers(&t.target_lang)))
                .unwrap_or(true)
        })
        .map(|t| t.instance_id.clone())
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(PipelineError::Mismatch(bad))
    }
}

/// Labels all traces and builds the run report. Pairs appear in order of
/// first appearance in `traces`.
pub fn analyze(
    meta: &TraceMeta,
    traces: &[InstanceTrace],
    lexicon: &Lexicon,
    profiles: Option<&ProfileSet>,
    options: &AnalyzeOptions,
) -> Result<RunReport, PipelineError> {
    if traces.is_empty() {
        return Err(PipelineError::EmptyTrace);
    }
    check_fit(lexicon, traces)?;
    let labeled: Vec<LabeledTrace> = pool(options.workers)?.install(|| {
        traces
            .par_iter()
            .map(|t| label_trace(t, &meta.tracked_layers, lexicon, profiles, &options.label))
            .collect::<Result<_, _>>()
    })?;

    let mut groups: Vec<((LanguageCode, LanguageCode), Vec<LabeledTrace>)> = Vec::new();
    for l in &labeled {
        let key = (l.source_lang.clone(), l.target_lang.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(l.clone()),
            None => groups.push((key, vec![l.clone()])),
        }
    }
    let pairs = groups
        .iter()
        .map(|(_, g)| pair_report(g, &options.report))
        .collect::<Result<Vec<_>, _>>()?;
    let results: Vec<_> = labeled.iter().map(instance_tl).collect();
    let invariant_violations = pairs
        .iter()
        .flat_map(|p| p.invariant_violations())
        .collect();
    let lid = profiles.map(|p| LidSettings {
        languages: p.languages().cloned().collect(),
        max_ranks: p.max_ranks(),
        min_margin: p.min_margin,
        min_script_coverage: p.min_script_coverage,
    });
    Ok(RunReport {
        report_version: REPORT_VERSION.into(),
        meta: meta.clone(),
        settings: AnalysisSettings {
            match_mode: lexicon.mode(),
            candidate_set: options.label.candidate_set.iter().cloned().collect(),
            precedence: options.label.precedence.clone(),
            use_external_lid: options.label.use_external_lid,
            lid,
            attribution_mode: options.report.attribution_mode,
            cutoff_offset: options.report.cutoff_offset,
            switch_min_final_acc: options.report.switch_min_final_acc,
        },
        overall: Overall {
            instances: results.len(),
            final_correct: results.iter().filter(|r| r.final_correct).count(),
            intermediate_correct: results.iter().filter(|r| r.intermediate_correct).count(),
            nontarget_recall: nontarget_recall(&labeled),
        },
        aggregates: aggregate_by_source(&pairs),
        pairs,
        invariant_violations,
    })
}

/// Validates the trace file, analyzes it, and writes the report.
pub fn cmd_analyze(
    trace_path: &Path,
    lexicon: &Lexicon,
    profiles: Option<&ProfileSet>,
    options: &AnalyzeOptions,
    out: &Path,
) -> Result<RunReport, PipelineError> {
    let v = validate(trace_path);
    if !v.is_valid() {
        return Err(PipelineError::Invalid(
            v.findings
                .iter()
                .map(|f| format!("line {}: {}", f.line, f.message))
                .collect(),
        ));
    }
    let (meta, traces) = read_all(trace_path)?;
    let report = analyze(&meta, &traces, lexicon, profiles, options)?;
    report.save(out)?;
    Ok(report)
}

pub fn cmd_report(report_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let report = RunReport::load(report_path)?;
    Ok(crate::report::write_exports(&report, out_dir)?)
}

/// A (prompt, answer) training text; the answer includes its newline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainText {
    pub prompt: String,
    pub answer: String,
}

/// Prompts for every task pair and usable concept, answered with the first
/// target form. A task with equal languages is a copy task.
pub fn training_texts(
    lexicon: &Lexicon,
    tasks: &[(LanguageCode, LanguageCode)],
    template: PromptTemplate,
) -> Vec<TrainText> {
    let mut out = Vec::new();
    for (s, t) in tasks {
        for c in lexicon.concepts_for_pair(s, t) {
            let (Some(word), Some(answer)) = (source_word(c, s), source_word(c, t)) else {
                continue;
            };
            out.push(TrainText {
                prompt: template.render(s, t, word),
                answer: format!("{answer}\n"),
            });
        }
    }
    out
}

/// Learns a tokenizer whose pieces cover every training text.
pub fn train_tokenizer(texts: &[TrainText], vocab_size: usize) -> Result<Tokenizer, PipelineError> {
    let corpus: Vec<String> = texts
        .iter()
        .map(|t| format!("{}{}", t.prompt, t.answer))
        .collect();
    Ok(Tokenizer::train(&corpus, vocab_size)?)
}

/// Token sequences with the loss on the answer tokens only.
pub fn training_examples(tokenizer: &Tokenizer, texts: &[TrainText]) -> Vec<TrainExample> {
    texts
        .iter()
        .map(|t| {
            let mut tokens = prompt_tokens(tokenizer, &t.prompt);
            let loss_start = tokens.len();
            tokens.extend(tokenizer.encode(&t.answer));
            TrainExample { tokens, loss_start }
        })
        .collect()
}
