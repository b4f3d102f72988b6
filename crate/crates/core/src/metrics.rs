//! Response-level classification metrics and per-cluster aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{HaltError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// F1 of the positive (hallucinated) class; 0 when undefined.
    pub fn f1_positive(&self) -> f64 {
        f1(self.tp, self.fp, self.fn_)
    }

    /// F1 of the negative (faithful) class; 0 when undefined.
    pub fn f1_negative(&self) -> f64 {
        f1(self.tn, self.fn_, self.fp)
    }

    pub fn macro_f1(&self) -> f64 {
        0.5 * (self.f1_positive() + self.f1_negative())
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

fn check_pair<T>(labels: &[u8], other: &[T]) -> Result<()> {
    if labels.len() != other.len() {
        return Err(HaltError::Precondition(format!(
            "length mismatch: {} labels vs {} values",
            labels.len(),
            other.len()
        )));
    }
    if labels.is_empty() {
        return Err(HaltError::Precondition("empty input".into()));
    }
    Ok(())
}

pub fn confusion(labels: &[u8], predictions: &[u8]) -> Result<Confusion> {
    check_pair(labels, predictions)?;
    let mut c = Confusion::default();
    for (&y, &p) in labels.iter().zip(predictions) {
        match (y != 0, p != 0) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// (F1 of the hallucinated class, macro-F1 over both classes).
pub fn f1_macro_f1(labels: &[u8], predictions: &[u8]) -> Result<(f64, f64)> {
    let c = confusion(labels, predictions)?;
    Ok((c.f1_positive(), c.macro_f1()))
}

pub fn accuracy(labels: &[u8], predictions: &[u8]) -> Result<f64> {
    Ok(confusion(labels, predictions)?.accuracy())
}

/// Mann-Whitney AUROC with ties counted one half, via mid-ranks (O(n log n)).
pub fn auroc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    check_pair(labels, scores)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(HaltError::Precondition("non-finite score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(HaltError::UndefinedMetric("AUROC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks are 1-based; the tied block i..=j shares the mean rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] != 0 {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Metrics of one group of responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub f1: f64,
    pub macro_f1: f64,
    /// Absent when the group holds a single class.
    pub auroc: Option<f64>,
    pub accuracy: f64,
    pub support: usize,
    pub positive_count: usize,
}

impl MetricBlock {
    pub fn compute(labels: &[u8], scores: &[f64], predictions: &[u8]) -> Result<Self> {
        let c = confusion(labels, predictions)?;
        let auroc = match auroc(labels, scores) {
            Ok(a) => Some(a),
            Err(HaltError::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(MetricBlock {
            f1: c.f1_positive(),
            macro_f1: c.macro_f1(),
            auroc,
            accuracy: c.accuracy(),
            support: labels.len(),
            positive_count: c.tp + c.fn_,
        })
    }
}

/// Per-cluster, pooled ("overall") and cluster-mean ("average") metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_cluster: BTreeMap<String, MetricBlock>,
    pub overall: MetricBlock,
    pub average: MetricBlock,
}

/// Outcome of one response under a detector.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredResponse {
    pub cluster: String,
    pub label: u8,
    pub score: f64,
    pub prediction: u8,
}

fn block_of(items: &[&ScoredResponse]) -> Result<MetricBlock> {
    let labels: Vec<u8> = items.iter().map(|r| r.label).collect();
    let scores: Vec<f64> = items.iter().map(|r| r.score).collect();
    let preds: Vec<u8> = items.iter().map(|r| r.prediction).collect();
    MetricBlock::compute(&labels, &scores, &preds)
}

pub fn aggregate(results: &[ScoredResponse]) -> Result<EvalReport> {
    if results.is_empty() {
        return Err(HaltError::Precondition("no results to aggregate".into()));
    }
    let mut groups: BTreeMap<&str, Vec<&ScoredResponse>> = BTreeMap::new();
    for r in results {
        groups.entry(r.cluster.as_str()).or_default().push(r);
    }
    let per_cluster: BTreeMap<String, MetricBlock> = groups
        .iter()
        .map(|(k, v)| block_of(v).map(|b| (k.to_string(), b)))
        .collect::<Result<_>>()?;
    let all: Vec<&ScoredResponse> = results.iter().collect();
    let overall = block_of(&all)?;

    let n = per_cluster.len() as f64;
    let mean = |f: fn(&MetricBlock) -> f64| per_cluster.values().map(f).sum::<f64>() / n;
    let aurocs: Vec<f64> = per_cluster.values().filter_map(|b| b.auroc).collect();
    let average = MetricBlock {
        f1: mean(|b| b.f1),
        macro_f1: mean(|b| b.macro_f1),
        auroc: if aurocs.is_empty() {
            None
        } else {
            Some(aurocs.iter().sum::<f64>() / aurocs.len() as f64)
        },
        accuracy: mean(|b| b.accuracy),
        support: overall.support,
        positive_count: overall.positive_count,
    };
    Ok(EvalReport {
        per_cluster,
        overall,
        average,
    })
}

/// Aligned text table of macro-F1 (x100): clusters as rows, methods as columns,
/// followed by Overall and Average rows.
pub fn render_table(methods: &[(String, EvalReport)]) -> String {
    let mut clusters: Vec<&String> = methods.iter().flat_map(|(_, r)| r.per_cluster.keys()).collect();
    clusters.sort();
    clusters.dedup();
    let first_w = clusters
        .iter()
        .map(|c| c.len())
        .chain(["Cluster".len(), "Overall".len()])
        .max()
        .unwrap_or(7);
    let col_w: Vec<usize> = methods.iter().map(|(n, _)| n.len().max(7)).collect();

    let mut out = String::new();
    let _ = write!(out, "{:<first_w$}", "Cluster");
    for ((name, _), w) in methods.iter().zip(&col_w) {
        let _ = write!(out, "  {name:>w$}");
    }
    out.push('\n');
    let rule = first_w + col_w.iter().map(|w| w + 2).sum::<usize>();
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    let mut row = |label: &str, pick: &dyn Fn(&EvalReport) -> Option<f64>| {
        let _ = write!(out, "{label:<first_w$}");
        for ((_, r), w) in methods.iter().zip(&col_w) {
            match pick(r) {
                Some(v) => {
                    let _ = write!(out, "  {:>w$.2}", v * 100.0);
                }
                None => {
                    let _ = write!(out, "  {:>w$}", "-");
                }
            }
        }
        out.push('\n');
    };
    for c in &clusters {
        row(c, &|r: &EvalReport| r.per_cluster.get(*c).map(|b| b.macro_f1));
    }
    row("Overall", &|r: &EvalReport| Some(r.overall.macro_f1));
    row("Average", &|r: &EvalReport| Some(r.average.macro_f1));
    out
}
