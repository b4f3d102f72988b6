//! Labeled log-probability traces and dataset manifests.
//!
//! A trace file is UTF-8 JSON lines, one response per line:
//!
//! ```text
//! {"id":"r1","cluster":"qa","label":1,"logprobs":[[-0.1, -2.3, ...20 values], ...],"meta":{"k":"v"}}
//! ```
//!
//! Position 0 of every step is the selected token, positions 1..19 are the
//! strongest alternatives in non-increasing order.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HaltError, Result};

/// Number of log-probabilities recorded per decoding step.
pub const TOP_K: usize = 20;

/// Split names accepted in a manifest.
pub const SPLITS: [&str; 3] = ["train", "validation", "test"];

/// One decoding step: the selected token's log-prob followed by 19 alternatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogProbStep([f64; TOP_K]);

impl LogProbStep {
    /// Validates a raw vector of log-probabilities.
    ///
    /// The error string names the violated constraint; callers attach the
    /// record context.
    pub fn new(values: &[f64]) -> std::result::Result<Self, String> {
        if values.len() != TOP_K {
            return Err(format!("expected {TOP_K} log-probs, got {}", values.len()));
        }
        let mut out = [0.0; TOP_K];
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(format!("entry {i} is not finite"));
            }
            if v > 0.0 {
                return Err(format!("entry {i} is positive ({v}); log-probs must be <= 0"));
            }
            out[i] = v;
        }
        for i in 2..TOP_K {
            if out[i] > out[i - 1] {
                return Err(format!(
                    "alternatives not sorted non-increasing at position {i} ({} > {})",
                    out[i],
                    out[i - 1]
                ));
            }
        }
        Ok(LogProbStep(out))
    }

    /// Builds a step without the sign / ordering checks. Used by shift-invariance
    /// tests, where adding a constant may push entries above zero.
    pub fn from_raw_unchecked(values: [f64; TOP_K]) -> Self {
        LogProbStep(values)
    }

    pub fn values(&self) -> &[f64; TOP_K] {
        &self.0
    }

    pub fn selected(&self) -> f64 {
        self.0[0]
    }

    pub fn alternatives(&self) -> &[f64] {
        &self.0[1..]
    }
}

/// A labeled LLM response as a T x 20 log-probability sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseTrace {
    pub id: String,
    pub cluster: String,
    /// 1 = hallucinated, 0 = faithful.
    pub label: u8,
    pub steps: Vec<LogProbStep>,
    pub meta: BTreeMap<String, String>,
}

impl ResponseTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn is_hallucinated(&self) -> bool {
        self.label == 1
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    cluster: String,
    label: i64,
    logprobs: Vec<Vec<f64>>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    cluster: &'a str,
    label: u8,
    logprobs: Vec<&'a [f64]>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    meta: &'a BTreeMap<String, String>,
}

fn validate_record(raw: RawRecord) -> Result<ResponseTrace> {
    let invalid = |field: &str, message: String| HaltError::Validation {
        id: raw.id.clone(),
        field: field.to_string(),
        message,
    };
    if raw.id.is_empty() {
        return Err(invalid("id", "empty id".into()));
    }
    let label = match raw.label {
        0 => 0,
        1 => 1,
        other => return Err(invalid("label", format!("expected 0 or 1, got {other}"))),
    };
    if raw.logprobs.is_empty() {
        return Err(invalid("logprobs", "trace has no steps (T >= 1 required)".into()));
    }
    let mut steps = Vec::with_capacity(raw.logprobs.len());
    for (t, row) in raw.logprobs.iter().enumerate() {
        let step = LogProbStep::new(row).map_err(|m| invalid("logprobs", format!("step {t}: {m}")))?;
        steps.push(step);
    }
    Ok(ResponseTrace {
        id: raw.id,
        cluster: raw.cluster,
        label,
        steps,
        meta: raw.meta,
    })
}

/// Parses trace records from an in-memory JSON-lines document.
///
/// `origin` is only used in error messages. Blank lines are skipped.
pub fn parse_traces(text: &str, origin: &Path) -> Result<Vec<ResponseTrace>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| HaltError::Parse {
            path: origin.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        let trace = validate_record(raw)?;
        if !seen.insert(trace.id.clone()) {
            return Err(HaltError::Validation {
                id: trace.id,
                field: "id".into(),
                message: "duplicate id within file".into(),
            });
        }
        out.push(trace);
    }
    Ok(out)
}

/// Loads every record of a trace file, in file order. Fails without partial
/// results on the first malformed or invalid record.
pub fn load_traces(path: impl AsRef<Path>) -> Result<Vec<ResponseTrace>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| HaltError::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| HaltError::io(path, e))?;
        text.push_str(&line);
        text.push('\n');
    }
    parse_traces(&text, path)
}

/// Loads several trace files concurrently; output follows input order.
pub fn load_many(paths: &[PathBuf]) -> Result<Vec<Arc<Vec<ResponseTrace>>>> {
    paths
        .par_iter()
        .map(|p| load_traces(p).map(Arc::new))
        .collect()
}

/// Canonical JSON-lines encoding of traces.
pub fn format_traces(traces: &[ResponseTrace]) -> String {
    let mut out = String::new();
    for t in traces {
        let rec = RecordOut {
            id: &t.id,
            cluster: &t.cluster,
            label: t.label,
            logprobs: t.steps.iter().map(|s| &s.values()[..]).collect(),
            meta: &t.meta,
        };
        out.push_str(&serde_json::to_string(&rec).expect("trace records always serialize"));
        out.push('\n');
    }
    out
}

pub fn write_traces(path: impl AsRef<Path>, traces: &[ResponseTrace]) -> Result<()> {
    write_atomic(path.as_ref(), format_traces(traces).as_bytes())
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| HaltError::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| HaltError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| HaltError::io(path, e))
}

/// Stated per-cluster inventory entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub count: usize,
    pub hallucination_ratio: f64,
}

/// Train / validation / test file lists plus an optional cluster inventory.
///
/// Split names are kept verbatim so that unknown names can be reported by
/// [`validate_manifest`] instead of failing the parse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub splits: BTreeMap<String, Vec<PathBuf>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub clusters: BTreeMap<String, ClusterStats>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| HaltError::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| HaltError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    /// Resolved paths of a split, or an empty list if the split is absent.
    pub fn split_paths(&self, split: &str) -> Vec<PathBuf> {
        self.splits
            .get(split)
            .map(|v| v.iter().map(|p| self.base_dir.join(p)).collect())
            .unwrap_or_default()
    }

    pub fn has_split(&self, split: &str) -> bool {
        self.splits.contains_key(split)
    }

    /// All traces of one split, concatenated in manifest order.
    pub fn load_split(&self, split: &str) -> Result<Vec<ResponseTrace>> {
        let files = load_many(&self.split_paths(split))?;
        Ok(files.iter().flat_map(|f| f.iter().cloned()).collect())
    }
}

/// One manifest invariant violation.
#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostic {
    UnknownSplit(String),
    MissingSplit(&'static str),
    UnreadableFile { path: PathBuf, reason: String },
    CountMismatch { cluster: String, stated: usize, actual: usize },
    RatioMismatch { cluster: String, stated: f64, actual: f64 },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::UnknownSplit(s) => write!(f, "unknown split `{s}`"),
            Diagnostic::MissingSplit(s) => write!(f, "missing split `{s}`"),
            Diagnostic::UnreadableFile { path, reason } => {
                write!(f, "cannot load {}: {reason}", path.display())
            }
            Diagnostic::CountMismatch {
                cluster,
                stated,
                actual,
            } => write!(f, "cluster `{cluster}`: stated count {stated}, actual {actual}"),
            Diagnostic::RatioMismatch {
                cluster,
                stated,
                actual,
            } => write!(
                f,
                "cluster `{cluster}`: stated hallucination ratio {stated}, actual {actual}"
            ),
        }
    }
}

const RATIO_TOLERANCE: f64 = 1e-9;

/// Checks split names, that every referenced file loads, and that the stated
/// cluster inventory matches the traces. Returns one diagnostic per violation.
pub fn validate_manifest(manifest: &DatasetManifest) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    for name in manifest.splits.keys() {
        if !SPLITS.contains(&name.as_str()) {
            diags.push(Diagnostic::UnknownSplit(name.clone()));
        }
    }
    for s in SPLITS {
        if !manifest.has_split(s) {
            diags.push(Diagnostic::MissingSplit(s));
        }
    }

    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (name, files) in &manifest.splits {
        if !SPLITS.contains(&name.as_str()) {
            continue;
        }
        for rel in files {
            let path = manifest.base_dir.join(rel);
            match load_traces(&path) {
                Ok(traces) => {
                    for t in &traces {
                        let e = counts.entry(t.cluster.clone()).or_default();
                        e.0 += 1;
                        e.1 += t.label as usize;
                    }
                }
                Err(e) => diags.push(Diagnostic::UnreadableFile {
                    path,
                    reason: e.to_string(),
                }),
            }
        }
    }

    for (cluster, stated) in &manifest.clusters {
        let (n, pos) = counts.get(cluster).copied().unwrap_or((0, 0));
        if n != stated.count {
            diags.push(Diagnostic::CountMismatch {
                cluster: cluster.clone(),
                stated: stated.count,
                actual: n,
            });
        }
        let actual = if n == 0 { 0.0 } else { pos as f64 / n as f64 };
        if (actual - stated.hallucination_ratio).abs() > RATIO_TOLERANCE {
            diags.push(Diagnostic::RatioMismatch {
                cluster: cluster.clone(),
                stated: stated.hallucination_ratio,
                actual,
            });
        }
    }
    diags
}
