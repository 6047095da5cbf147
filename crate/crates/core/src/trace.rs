//! Newline-delimited trace files.
//!
//! The first line is a header object `{"schema_version": "1.0", "meta": ...}`;
//! every following line is one [`InstanceTrace`]. Files whose name ends in
//! `.gz` are gzip-compressed on write; readers detect compression from the
//! magic bytes, whatever the name.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::logitlens::{InstanceTrace, TrackedLayers};
use crate::refmodel::NormKind;

pub const SCHEMA_VERSION: &str = "1.0";
const SCHEMA_MAJOR: u64 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("header: {0}")]
    Header(String),
    #[error("schema version {found} is newer than supported {SCHEMA_VERSION}")]
    UnsupportedVersion { found: String },
    #[error("line {line} (record {index}): {message}")]
    Record {
        line: usize,
        index: usize,
        message: String,
    },
    #[error("{0}")]
    Validation(String),
}

/// Model and run description shared by all records of a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub model_name: String,
    pub n_layers: usize,
    pub tracked_layers: TrackedLayers,
    pub tokenizer_id: String,
    pub norm_kind: NormKind,
    /// Free-form run settings (prompt template, max steps, seed, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provenance: BTreeMap<String, String>,
}

impl TraceMeta {
    pub fn check(&self) -> Result<(), TraceError> {
        self.tracked_layers
            .check_depth(self.n_layers)
            .map_err(|e| TraceError::Header(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: String,
    meta: TraceMeta,
}

fn major_version(v: &str) -> Option<u64> {
    let (major, minor) = v.split_once('.').unwrap_or((v, "0"));
    minor.parse::<u64>().ok()?;
    major.parse().ok()
}

/// Checks one record against the header; the message names the offending
/// field.
pub fn check_record(meta: &TraceMeta, t: &InstanceTrace) -> Result<(), String> {
    if t.instance_id.is_empty() {
        return Err("instance_id: empty".into());
    }
    let layers = meta.tracked_layers.layers();
    let output = meta.tracked_layers.output_layer();
    for (i, step) in t.steps.iter().enumerate() {
        if step.step_index != i {
            return Err(format!(
                "steps[{i}].step_index: expected {i}, found {}",
                step.step_index
            ));
        }
        if let Some(l) = step
            .per_layer
            .keys()
            .find(|l| !meta.tracked_layers.contains(**l))
        {
            return Err(format!(
                "steps[{i}].per_layer: layer {l} outside tracked_layers"
            ));
        }
        if let Some(l) = layers.iter().find(|l| !step.per_layer.contains_key(l)) {
            return Err(format!("steps[{i}].per_layer: tracked layer {l} missing"));
        }
        if step.per_layer[&output].token != step.final_token {
            return Err(format!(
                "steps[{i}].final_token: {} differs from layer {output} token {}",
                step.final_token, step.per_layer[&output].token
            ));
        }
        if let Some((l, tok)) = step
            .per_layer
            .iter()
            .find(|(_, tok)| !(tok.prob.is_finite() && (0.0..=1.0).contains(&tok.prob)))
        {
            return Err(format!(
                "steps[{i}].per_layer.{l}.prob: {} outside [0, 1]",
                tok.prob
            ));
        }
    }
    if let Some(l) = t
        .external_tags
        .keys()
        .find(|l| !meta.tracked_layers.contains(**l))
    {
        return Err(format!("external_tags: layer {l} outside tracked_layers"));
    }
    Ok(())
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> TraceError + '_ {
    move |source| TraceError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn is_gz_path(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

/// Serializes a whole file to bytes, uncompressed.
pub fn encode_traces(meta: &TraceMeta, traces: &[InstanceTrace]) -> Result<Vec<u8>, TraceError> {
    meta.check()?;
    let mut seen = HashSet::new();
    for (index, t) in traces.iter().enumerate() {
        let fail = |message: String| TraceError::Record {
            line: index + 2,
            index,
            message,
        };
        check_record(meta, t).map_err(fail)?;
        if !seen.insert(t.instance_id.as_str()) {
            return Err(fail(format!("instance_id: duplicate {:?}", t.instance_id)));
        }
    }
    let mut out = Vec::new();
    let header = Header {
        schema_version: SCHEMA_VERSION.into(),
        meta: meta.clone(),
    };
    serde_json::to_writer(&mut out, &header).expect("header serializes");
    out.push(b'\n');
    for t in traces {
        serde_json::to_writer(&mut out, t).expect("trace serializes");
        out.push(b'\n');
    }
    Ok(out)
}

/// Writes `traces` after validating them against `meta`. The file appears
/// atomically; equal inputs give byte-identical files.
pub fn write_traces(
    path: impl AsRef<Path>,
    meta: &TraceMeta,
    traces: &[InstanceTrace],
) -> Result<(), TraceError> {
    let path = path.as_ref();
    let bytes = encode_traces(meta, traces)?;
    let io = io_err(path);
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(&io)?;
    if is_gz_path(path) {
        let mut gz = GzEncoder::new(tmp.as_file_mut(), Compression::default());
        gz.write_all(&bytes).map_err(&io)?;
        gz.finish().map_err(&io)?;
    } else {
        tmp.write_all(&bytes).map_err(&io)?;
    }
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn BufRead>, TraceError> {
    let io = io_err(path);
    let mut reader = BufReader::new(File::open(path).map_err(&io)?);
    let head = reader.fill_buf().map_err(&io)?;
    if head.starts_with(&[0x1f, 0x8b]) {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(reader))))
    } else {
        Ok(Box::new(reader))
    }
}

/// Streaming reader: holds one line at a time.
pub struct TraceReader {
    meta: TraceMeta,
    lines: io::Lines<Box<dyn BufRead>>,
    line: usize,
    index: usize,
}

impl TraceReader {
    pub fn meta(&self) -> &TraceMeta {
        &self.meta
    }

    fn from_reader(reader: Box<dyn BufRead>) -> Result<Self, TraceError> {
        let mut lines = reader.lines();
        let first = match lines.next() {
            None => return Err(TraceError::Header("empty file".into())),
            Some(l) => l.map_err(|e| TraceError::Header(e.to_string()))?,
        };
        let raw: serde_json::Value =
            serde_json::from_str(&first).map_err(|e| TraceError::Header(e.to_string()))?;
        let version = raw
            .get("schema_version")
            .and_then(|v| v.as_str())
            .ok_or_else(|| TraceError::Header("missing schema_version".into()))?;
        match major_version(version) {
            None => {
                return Err(TraceError::Header(format!(
                    "bad schema_version {version:?}"
                )))
            }
            Some(m) if m > SCHEMA_MAJOR => {
                return Err(TraceError::UnsupportedVersion {
                    found: version.into(),
                })
            }
            Some(_) => {}
        }
        let header: Header =
            serde_json::from_value(raw).map_err(|e| TraceError::Header(e.to_string()))?;
        header.meta.check()?;
        Ok(Self {
            meta: header.meta,
            lines,
            line: 1,
            index: 0,
        })
    }
}

impl Iterator for TraceReader {
    type Item = Result<InstanceTrace, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line += 1;
            let (line_no, index) = (self.line, self.index);
            let fail = move |message: String| TraceError::Record {
                line: line_no,
                index,
                message,
            };
            let text = match line {
                Ok(t) => t,
                Err(e) => {
                    self.index += 1;
                    return Some(Err(fail(e.to_string())));
                }
            };
            if text.trim().is_empty() {
                continue;
            }
            let result = serde_json::from_str::<InstanceTrace>(&text)
                .map_err(|e| fail(e.to_string()))
                .and_then(|t| check_record(&self.meta, &t).map(|_| t).map_err(fail));
            self.index += 1;
            return Some(result);
        }
    }
}

/// Opens a trace file and reads its header. Records stream from the
/// returned reader; duplicates are only caught by [`validate`].
pub fn read_traces(path: impl AsRef<Path>) -> Result<TraceReader, TraceError> {
    TraceReader::from_reader(open_maybe_gz(path.as_ref())?)
}

/// Reads a whole file from memory.
pub fn decode_traces(bytes: &[u8]) -> Result<TraceReader, TraceError> {
    let owned = bytes.to_vec();
    let reader: Box<dyn BufRead> = if owned.starts_with(&[0x1f, 0x8b]) {
        Box::new(BufReader::new(MultiGzDecoder::new(io::Cursor::new(owned))))
    } else {
        Box::new(io::Cursor::new(owned))
    };
    TraceReader::from_reader(reader)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Finding {
    /// 1-based line; 0 when the problem concerns the whole file.
    pub line: usize,
    pub record: Option<usize>,
    pub message: String,
    /// Analysis must not proceed.
    pub fatal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub records: usize,
    pub meta: Option<TraceMeta>,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Scans a whole file and lists every violation.
pub fn validate(path: impl AsRef<Path>) -> ValidationReport {
    match read_traces(path) {
        Ok(reader) => validate_reader(reader),
        Err(e) => ValidationReport {
            records: 0,
            meta: None,
            findings: vec![Finding {
                line: if matches!(e, TraceError::Io { .. }) {
                    0
                } else {
                    1
                },
                record: None,
                message: e.to_string(),
                fatal: true,
            }],
        },
    }
}

fn validate_reader(mut reader: TraceReader) -> ValidationReport {
    let meta = reader.meta().clone();
    let mut findings = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut records = 0;
    for item in reader.by_ref() {
        records += 1;
        match item {
            Ok(t) => {
                if !seen.insert(t.instance_id.clone()) {
                    findings.push(Finding {
                        line: 0,
                        record: Some(records - 1),
                        message: format!("instance_id: duplicate {:?}", t.instance_id),
                        fatal: false,
                    });
                }
            }
            Err(TraceError::Record {
                line,
                index,
                message,
            }) => findings.push(Finding {
                line,
                record: Some(index),
                message,
                fatal: false,
            }),
            Err(e) => findings.push(Finding {
                line: 0,
                record: Some(records - 1),
                message: e.to_string(),
                fatal: false,
            }),
        }
    }
    // duplicate findings have no line of their own; point at the record's
    // line, which is its index plus the header line plus one
    for f in findings.iter_mut().filter(|f| f.line == 0) {
        f.line = f.record.map_or(0, |r| r + 2);
    }
    ValidationReport {
        records,
        meta: Some(meta),
        findings,
    }
}

/// Reads the header and all records, failing on the first error or on a
/// duplicate id.
pub fn read_all(path: impl AsRef<Path>) -> Result<(TraceMeta, Vec<InstanceTrace>), TraceError> {
    let reader = read_traces(path)?;
    let meta = reader.meta().clone();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (index, t) in reader.enumerate() {
        let t = t?;
        if !seen.insert(t.instance_id.clone()) {
            return Err(TraceError::Record {
                line: index + 2,
                index,
                message: format!("instance_id: duplicate {:?}", t.instance_id),
            });
        }
        out.push(t);
    }
    Ok((meta, out))
}

/// Streams records into `sink` one at a time; used by tools that must not
/// hold a whole file.
pub fn for_each_trace(
    path: impl AsRef<Path>,
    mut sink: impl FnMut(&TraceMeta, InstanceTrace) -> Result<(), TraceError>,
) -> Result<usize, TraceError> {
    let reader = read_traces(path)?;
    let meta = reader.meta().clone();
    let mut n = 0;
    for t in reader {
        sink(&meta, t?)?;
        n += 1;
    }
    Ok(n)
}
