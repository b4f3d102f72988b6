//! Per-token uncertainty features.
//!
//! Every step of a trace becomes a 25-vector laid out as
//! `[entropy_overall, entropy_alts, avg_logprob, rank_proxy, dec_entropy_delta,
//! logprob_1 .. logprob_20]`. The five engineered statistics are computed from
//! the truncated top-20 distribution; the raw log-probabilities are copied
//! through unchanged.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HaltError, Result};
use crate::trace::{write_atomic, LogProbStep, ResponseTrace, TOP_K};

/// Number of engineered statistics preceding the raw log-probs.
pub const D_STATS: usize = 5;
/// Width of one feature row.
pub const FEATURE_DIM: usize = D_STATS + TOP_K;
/// Version of the column layout below. Bumped whenever the order changes.
pub const LAYOUT_VERSION: u32 = 1;

pub const COL_H_OVERALL: usize = 0;
pub const COL_H_ALTS: usize = 1;
pub const COL_AVG_LOGP: usize = 2;
pub const COL_RANK: usize = 3;
pub const COL_DH_DEC: usize = 4;

/// Alternative mass below which `entropy_alts` treats the alternatives as empty.
const DEGENERATE_ALT_MASS: f64 = 1e-300;

/// Column names in layout order.
pub fn column_names() -> Vec<String> {
    let mut names: Vec<String> = [
        "entropy_overall",
        "entropy_alts",
        "avg_logprob",
        "rank_proxy",
        "dec_entropy_delta",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    names.extend((1..=TOP_K).map(|i| format!("logprob_{i}")));
    names
}

pub fn column_index(name: &str) -> Option<usize> {
    column_names().iter().position(|n| n == name)
}

/// Active-column flags; a `false` column is zeroed before it reaches a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ColumnMask(pub [bool; FEATURE_DIM]);

impl Default for ColumnMask {
    fn default() -> Self {
        ColumnMask([true; FEATURE_DIM])
    }
}

impl ColumnMask {
    pub fn without(columns: &[usize]) -> Self {
        let mut m = Self::default();
        for &c in columns {
            m.0[c] = false;
        }
        m
    }

    /// Parses a comma-separated list of column names to drop.
    pub fn parse_dropped(spec: &str) -> Result<Self> {
        let mut cols = Vec::new();
        for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            cols.push(column_index(name).ok_or_else(|| HaltError::Config(format!("unknown feature column `{name}`")))?);
        }
        Ok(Self::without(&cols))
    }

    pub fn is_active(&self, col: usize) -> bool {
        self.0[col]
    }

    pub fn all_active(&self) -> bool {
        self.0.iter().all(|&b| b)
    }

    /// True if every column active here is also active in `other`.
    pub fn is_subset_of(&self, other: &ColumnMask) -> bool {
        self.0.iter().zip(other.0.iter()).all(|(&a, &b)| !a || b)
    }

    pub fn dropped_names(&self) -> Vec<String> {
        column_names()
            .into_iter()
            .zip(self.0.iter())
            .filter(|(_, &active)| !active)
            .map(|(n, _)| n)
            .collect()
    }
}

/// Top-20 probabilities renormalized over the observed support.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedDistribution(pub [f64; TOP_K]);

impl TruncatedDistribution {
    pub fn probs(&self) -> &[f64; TOP_K] {
        &self.0
    }
}

/// Max-shifted softmax over the 20 entries.
pub fn trunc_softmax(step: &LogProbStep) -> TruncatedDistribution {
    let v = step.values();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; TOP_K];
    let mut z = 0.0;
    for (pi, &l) in p.iter_mut().zip(v.iter()) {
        *pi = (l - m).exp();
        z += *pi;
    }
    for pi in &mut p {
        *pi /= z;
    }
    TruncatedDistribution(p)
}

pub fn avg_logp(step: &LogProbStep) -> f64 {
    step.values().iter().sum::<f64>() / TOP_K as f64
}

/// 1 + number of alternatives strictly more likely than the selected token.
pub fn rank_proxy(step: &LogProbStep) -> u32 {
    let sel = step.selected();
    1 + step.alternatives().iter().filter(|&&a| a > sel).count() as u32
}

fn shannon(probs: impl Iterator<Item = f64>) -> f64 {
    -probs.filter(|&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

pub fn entropy_overall(dist: &TruncatedDistribution) -> f64 {
    shannon(dist.0.iter().copied())
}

/// Entropy of the alternatives after renormalizing them among themselves.
pub fn entropy_alts(dist: &TruncatedDistribution) -> f64 {
    let alts = &dist.0[1..];
    let mass: f64 = alts.iter().sum();
    if mass < DEGENERATE_ALT_MASS {
        return 0.0;
    }
    shannon(alts.iter().map(|&p| p / mass))
}

/// Binary entropy of `sigmoid(margin)`, in a form that stays accurate for
/// large `|margin|`.
pub fn binary_entropy_of_margin(margin: f64) -> f64 {
    let a = margin.abs();
    let e = (-a).exp();
    // sigmoid(-a) = e / (1 + e)
    e.ln_1p() + a * (e / (1.0 + e))
}

/// Binary entropy between the selected token and the strongest alternative.
pub fn decision_entropy(step: &LogProbStep) -> f64 {
    let best_alt = step
        .alternatives()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    binary_entropy_of_margin(step.selected() - best_alt)
}

/// Enriched per-token feature matrix of one trace.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub trace_id: String,
    pub label: u8,
    pub rows: Vec<[f64; FEATURE_DIM]>,
    /// Columns that carry data; inactive columns hold zeros.
    pub mask: ColumnMask,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Zeroes the columns inactive in `mask` and records it.
    pub fn apply_mask(&mut self, mask: &ColumnMask) {
        for row in &mut self.rows {
            for (c, v) in row.iter_mut().enumerate() {
                if !mask.is_active(c) {
                    *v = 0.0;
                }
            }
        }
        for c in 0..FEATURE_DIM {
            self.mask.0[c] &= mask.0[c];
        }
    }
}

pub fn featurize(trace: &ResponseTrace) -> FeatureSequence {
    let mut rows = Vec::with_capacity(trace.len());
    let mut prev_dec: Option<f64> = None;
    for step in &trace.steps {
        let dist = trunc_softmax(step);
        let dec = decision_entropy(step);
        let delta = prev_dec.map_or(0.0, |p| dec - p);
        prev_dec = Some(dec);

        let mut row = [0.0; FEATURE_DIM];
        row[COL_H_OVERALL] = entropy_overall(&dist);
        row[COL_H_ALTS] = entropy_alts(&dist);
        row[COL_AVG_LOGP] = avg_logp(step);
        row[COL_RANK] = rank_proxy(step) as f64;
        row[COL_DH_DEC] = delta;
        row[D_STATS..].copy_from_slice(step.values());
        rows.push(row);
    }
    FeatureSequence {
        trace_id: trace.id.clone(),
        label: trace.label,
        rows,
        mask: ColumnMask::default(),
    }
}

pub fn featurize_all(traces: &[ResponseTrace]) -> Vec<FeatureSequence> {
    use rayon::prelude::*;
    traces.par_iter().map(featurize).collect()
}

/// Probability mass of the `k_prefix` largest entries of a step.
pub fn topk_mass(step: &LogProbStep, k_prefix: usize) -> Result<f64> {
    if !(1..=TOP_K).contains(&k_prefix) {
        return Err(HaltError::Domain(format!("k_prefix {k_prefix} outside 1..={TOP_K}")));
    }
    let mut v = *step.values();
    if v.iter().any(|&x| x > 0.0) {
        return Err(HaltError::Domain("log-prob entry > 0; mass undefined".into()));
    }
    v.sort_by(|a, b| b.total_cmp(a));
    let mass: f64 = v[..k_prefix].iter().map(|l| l.exp()).sum();
    if mass > 1.0 + 1e-9 {
        return Err(HaltError::Domain(format!(
            "entries are not true log-probabilities (mass {mass} > 1)"
        )));
    }
    Ok(mass)
}

/// Header line of a feature cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub layout_version: u32,
    pub columns: Vec<String>,
    pub mask: ColumnMask,
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    id: String,
    label: u8,
    features: Vec<Vec<f64>>,
}

/// Writes a feature cache: header line, then one record per sequence.
pub fn write_feature_cache(path: &Path, seqs: &[FeatureSequence], mask: &ColumnMask) -> Result<()> {
    let mut buf = Vec::new();
    let header = CacheHeader {
        layout_version: LAYOUT_VERSION,
        columns: column_names(),
        mask: *mask,
    };
    serde_json::to_writer(&mut buf, &header)?;
    buf.push(b'\n');
    for s in seqs {
        let rec = CacheRecord {
            id: s.trace_id.clone(),
            label: s.label,
            features: s.rows.iter().map(|r| r.to_vec()).collect(),
        };
        serde_json::to_writer(&mut buf, &rec)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn read_feature_cache(path: &Path) -> Result<(CacheHeader, Vec<FeatureSequence>)> {
    let text = std::fs::read_to_string(path).map_err(|e| HaltError::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let parse_err = |line: usize, message: String| HaltError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let (_, first) = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))?;
    let header: CacheHeader = serde_json::from_str(first).map_err(|e| parse_err(1, e.to_string()))?;
    if header.layout_version != LAYOUT_VERSION {
        return Err(HaltError::Compatibility(format!(
            "feature cache layout version {} (expected {LAYOUT_VERSION})",
            header.layout_version
        )));
    }
    let mut seqs = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CacheRecord = serde_json::from_str(line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        let mut rows = Vec::with_capacity(rec.features.len());
        for r in &rec.features {
            let row: [f64; FEATURE_DIM] = r
                .as_slice()
                .try_into()
                .map_err(|_| parse_err(i + 1, format!("row width {} != {FEATURE_DIM}", r.len())))?;
            rows.push(row);
        }
        seqs.push(FeatureSequence {
            trace_id: rec.id,
            label: rec.label,
            rows,
            mask: header.mask,
        });
    }
    Ok((header, seqs))
}
