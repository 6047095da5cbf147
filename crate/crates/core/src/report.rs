//! Run reports and their flat exports.
//!
//! A report is one JSON document holding every pair report, the per-source
//! aggregates, and the settings that produced them. Exports are CSV files
//! with fixed column order:
//!
//! | file | columns |
//! |------|---------|
//! | `pairs.csv` | source, target, n, final_acc, int_acc, d_F, tl_sum, tlp, tlp_clamped, switch_layer, nontarget_recall |
//! | `layers.csv` | source, target, layer, relative_layer, total_count, labeled_count, on_target_correct, on_target_incorrect, off_target_correct, off_target_incorrect, accurate_count, target_presence, empty |
//! | `source_summary.csv` | source, n_pairs, final_mean, final_std, int_mean, int_std, tlp_mean, tlp_std, tlp_undefined_pairs |
//! | `target_tlp.csv` | target, mean_tlp, n_sources |
//! | `task_languages.csv` | source, target, language, fraction, count |
//!
//! Undefined values are empty cells.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::lexicon::{LanguageCode, MatchMode};
use crate::metrics::{AttributionMode, PairReport, SourceAggregate};
use crate::trace::TraceMeta;

pub const REPORT_VERSION: &str = "1";

pub const PAIR_COLUMNS: [&str; 11] = [
    "source",
    "target",
    "n",
    "final_acc",
    "int_acc",
    "d_F",
    "tl_sum",
    "tlp",
    "tlp_clamped",
    "switch_layer",
    "nontarget_recall",
];

pub const LAYER_COLUMNS: [&str; 13] = [
    "source",
    "target",
    "layer",
    "relative_layer",
    "total_count",
    "labeled_count",
    "on_target_correct",
    "on_target_incorrect",
    "off_target_correct",
    "off_target_incorrect",
    "accurate_count",
    "target_presence",
    "empty",
];

pub const SOURCE_SUMMARY_COLUMNS: [&str; 9] = [
    "source",
    "n_pairs",
    "final_mean",
    "final_std",
    "int_mean",
    "int_std",
    "tlp_mean",
    "tlp_std",
    "tlp_undefined_pairs",
];

pub const TARGET_TLP_COLUMNS: [&str; 3] = ["target", "mean_tlp", "n_sources"];

pub const TASK_LANGUAGE_COLUMNS: [&str; 5] = ["source", "target", "language", "fraction", "count"];

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("report is not valid JSON: {0}")]
    Parse(String),
    #[error("unsupported report version {0:?}")]
    Version(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Every analysis setting, defaults included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSettings {
    pub match_mode: MatchMode,
    pub candidate_set: Vec<LanguageCode>,
    pub precedence: Vec<LanguageCode>,
    pub use_external_lid: bool,
    /// `None` when no classifier was loaded.
    pub lid: Option<LidSettings>,
    pub attribution_mode: AttributionMode,
    pub cutoff_offset: usize,
    pub switch_min_final_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidSettings {
    pub languages: Vec<LanguageCode>,
    pub max_ranks: usize,
    pub min_margin: f64,
    pub min_script_coverage: f64,
}

/// Totals over every instance of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overall {
    pub instances: usize,
    pub final_correct: usize,
    pub intermediate_correct: usize,
    /// Final-correct instances also solved in a non-target language at
    /// some intermediate layer, over all final-correct instances.
    pub nontarget_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub report_version: String,
    pub meta: TraceMeta,
    pub settings: AnalysisSettings,
    pub overall: Overall,
    pub pairs: Vec<PairReport>,
    pub aggregates: Vec<SourceAggregate>,
    pub invariant_violations: Vec<String>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ReportError::Parse(e.to_string()))?;
        let version = raw
            .get("report_version")
            .and_then(|v| v.as_str())
            .unwrap_or("");
        if version != REPORT_VERSION {
            return Err(ReportError::Version(version.into()));
        }
        serde_json::from_value(raw).map_err(|e| ReportError::Parse(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ReportError> {
        let path = path.as_ref();
        crate::write_atomic(path, self.to_json().as_bytes()).map_err(|source| ReportError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReportError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ReportError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn to_csv(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner()
        .map_err(|e| ReportError::Csv(e.into_error().into()))
}

pub fn pairs_csv(report: &RunReport) -> Result<Vec<u8>, ReportError> {
    let rows = report
        .pairs
        .iter()
        .map(|p| {
            vec![
                p.source_lang.to_string(),
                p.target_lang.to_string(),
                p.n.to_string(),
                p.final_acc.to_string(),
                p.intermediate_acc.to_string(),
                p.d_f.to_string(),
                p.tl_sum.to_string(),
                opt(p.tlp),
                opt(p.tlp_clamped),
                opt(p.switch_layer),
                opt(p.nontarget_recall),
            ]
        })
        .collect();
    to_csv(&PAIR_COLUMNS, rows)
}

/// One row per (pair, layer).
pub fn layers_csv(report: &RunReport) -> Result<Vec<u8>, ReportError> {
    let mut rows = Vec::new();
    for p in &report.pairs {
        for r in &p.layer_profile {
            rows.push(vec![
                p.source_lang.to_string(),
                p.target_lang.to_string(),
                r.layer.to_string(),
                r.relative_layer.to_string(),
                r.total_count.to_string(),
                r.labeled_count.to_string(),
                r.on_target_correct.to_string(),
                r.on_target_incorrect.to_string(),
                r.off_target_correct.to_string(),
                r.off_target_incorrect.to_string(),
                r.accurate_count.to_string(),
                opt(r.target_presence_among_accurate),
                r.empty.to_string(),
            ]);
        }
    }
    to_csv(&LAYER_COLUMNS, rows)
}

/// Per-source mean and standard deviation, then the `Avg` row.
pub fn source_summary_csv(report: &RunReport) -> Result<Vec<u8>, ReportError> {
    let rows = report
        .aggregates
        .iter()
        .map(|a| {
            vec![
                a.source.clone(),
                a.n_pairs.to_string(),
                opt(a.final_acc.mean),
                opt(a.final_acc.std),
                opt(a.intermediate_acc.mean),
                opt(a.intermediate_acc.std),
                opt(a.tlp.mean),
                opt(a.tlp.std),
                a.tlp_undefined_pairs.to_string(),
            ]
        })
        .collect();
    to_csv(&SOURCE_SUMMARY_COLUMNS, rows)
}

/// Mean TLP per target over its sources, ascending. Targets without a
/// defined TLP come last; ties break on the target code.
pub fn target_tlp_rows(report: &RunReport) -> Vec<(LanguageCode, Option<f64>, usize)> {
    let mut by_target: BTreeMap<&LanguageCode, Vec<f64>> = BTreeMap::new();
    for p in &report.pairs {
        let e = by_target.entry(&p.target_lang).or_default();
        if let Some(t) = p.tlp {
            e.push(t);
        }
    }
    let mut rows: Vec<(LanguageCode, Option<f64>, usize)> = by_target
        .into_iter()
        .map(|(t, v)| {
            let mean = (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            (t.clone(), mean, v.len())
        })
        .collect();
    rows.sort_by(|a, b| match (a.1, b.1) {
        (Some(x), Some(y)) => x.total_cmp(&y).then_with(|| a.0.cmp(&b.0)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.0.cmp(&b.0),
    });
    rows
}

pub fn target_tlp_csv(report: &RunReport) -> Result<Vec<u8>, ReportError> {
    let rows = target_tlp_rows(report)
        .into_iter()
        .map(|(t, m, n)| vec![t.to_string(), opt(m), n.to_string()])
        .collect();
    to_csv(&TARGET_TLP_COLUMNS, rows)
}

pub fn task_languages_csv(report: &RunReport) -> Result<Vec<u8>, ReportError> {
    let mut rows = Vec::new();
    for p in &report.pairs {
        for (lang, f) in &p.lang_distribution.fractions {
            rows.push(vec![
                p.source_lang.to_string(),
                p.target_lang.to_string(),
                lang.to_string(),
                f.to_string(),
                p.lang_distribution.count.to_string(),
            ]);
        }
    }
    to_csv(&TASK_LANGUAGE_COLUMNS, rows)
}

/// Writes every export into `dir` and returns the paths in a fixed order.
pub fn write_exports(
    report: &RunReport,
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>, ReportError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let files: [(&str, Vec<u8>); 5] = [
        ("pairs.csv", pairs_csv(report)?),
        ("layers.csv", layers_csv(report)?),
        ("source_summary.csv", source_summary_csv(report)?),
        ("target_tlp.csv", target_tlp_csv(report)?),
        ("task_languages.csv", task_languages_csv(report)?),
    ];
    let mut out = Vec::new();
    for (name, bytes) in files {
        let path = dir.join(name);
        crate::write_atomic(&path, &bytes).map_err(|source| ReportError::Io {
            path: path.display().to_string(),
            source,
        })?;
        out.push(path);
    }
    Ok(out)
}
