//! Single-statistic detectors with tuned thresholds, and trivial baselines.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{HaltError, Result};
use crate::features::{featurize, FeatureSequence, COL_DH_DEC, COL_H_ALTS, COL_H_OVERALL, COL_RANK, D_STATS};
use crate::metrics;
use crate::trace::ResponseTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Ppl,
    HOverall,
    HAlts,
    DhDec,
    RankProxy,
}

impl Statistic {
    pub const ALL: [Statistic; 5] = [
        Statistic::Ppl,
        Statistic::HOverall,
        Statistic::HAlts,
        Statistic::DhDec,
        Statistic::RankProxy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Statistic::Ppl => "ppl",
            Statistic::HOverall => "h_overall",
            Statistic::HAlts => "h_alts",
            Statistic::DhDec => "dh_dec",
            Statistic::RankProxy => "rank_proxy",
        }
    }

    /// RankProxy is reduced by its maximum, everything else by the mean.
    pub fn reduction(self) -> Reduction {
        match self {
            Statistic::RankProxy => Reduction::Max,
            _ => Reduction::Mean,
        }
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Statistic {
    type Err = HaltError;
    fn from_str(s: &str) -> Result<Self> {
        Statistic::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| HaltError::Config(format!("unknown statistic `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `score >= threshold` flags a hallucination.
    HigherIsHallucinated,
    /// `score <= threshold` flags a hallucination.
    LowerIsHallucinated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatDetector {
    pub statistic: Statistic,
    pub reduction: Reduction,
    pub direction: Direction,
    #[serde(serialize_with = "ser_threshold", deserialize_with = "de_threshold")]
    pub threshold: f64,
}

fn ser_threshold<S: Serializer>(t: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if t.is_infinite() {
        s.serialize_str(if *t > 0.0 { "inf" } else { "-inf" })
    } else {
        s.serialize_f64(*t)
    }
}

fn de_threshold<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum T {
        Num(f64),
        Str(String),
    }
    match T::deserialize(d)? {
        T::Num(v) => Ok(v),
        T::Str(s) if s == "inf" => Ok(f64::INFINITY),
        T::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
        T::Str(s) => Err(serde::de::Error::custom(format!("invalid threshold `{s}`"))),
    }
}

impl StatDetector {
    pub fn new(statistic: Statistic) -> Self {
        StatDetector {
            statistic,
            reduction: statistic.reduction(),
            direction: Direction::HigherIsHallucinated,
            threshold: 0.0,
        }
    }

    pub fn predict_score(&self, score: f64) -> u8 {
        let flagged = match self.direction {
            Direction::HigherIsHallucinated => score >= self.threshold,
            Direction::LowerIsHallucinated => score <= self.threshold,
        };
        flagged as u8
    }
}

/// Per-response scalar for `statistic` computed from an unmasked feature
/// sequence.
pub fn score_features(statistic: Statistic, seq: &FeatureSequence) -> f64 {
    let n = seq.rows.len().max(1) as f64;
    let mean = |col: usize| seq.rows.iter().map(|r| r[col]).sum::<f64>() / n;
    match statistic {
        Statistic::Ppl => (-mean(D_STATS)).exp(),
        Statistic::HOverall => mean(COL_H_OVERALL),
        Statistic::HAlts => mean(COL_H_ALTS),
        Statistic::DhDec => mean(COL_DH_DEC),
        Statistic::RankProxy => seq.rows.iter().map(|r| r[COL_RANK]).fold(0.0, f64::max),
    }
}

pub fn score(statistic: Statistic, trace: &ResponseTrace) -> f64 {
    score_features(statistic, &featurize(trace))
}

pub fn score_all(statistic: Statistic, traces: &[ResponseTrace]) -> Vec<f64> {
    traces.par_iter().map(|t| score(statistic, t)).collect()
}

/// A tuned detector together with its validation objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TunedDetector {
    #[serde(flatten)]
    pub detector: StatDetector,
    pub val_macro_f1: f64,
}

/// Exhaustive threshold and direction search maximizing macro-F1.
///
/// Candidates are `-inf`, every midpoint between consecutive distinct scores,
/// and `+inf`, in both directions. Ties go to the lower threshold, then to
/// [`Direction::HigherIsHallucinated`].
pub fn tune_threshold(statistic: Statistic, labels: &[u8], scores: &[f64]) -> Result<TunedDetector> {
    if labels.len() != scores.len() {
        return Err(HaltError::Precondition("labels and scores differ in length".into()));
    }
    if labels.is_empty() {
        return Err(HaltError::Precondition("empty validation set".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(HaltError::Precondition("NaN score".into()));
    }
    let total_pos = labels.iter().filter(|&&l| l == 1).count();
    let total_neg = labels.len() - total_pos;
    if total_pos == 0 || total_neg == 0 {
        return Err(HaltError::Precondition(
            "threshold tuning needs both classes in the validation set".into(),
        ));
    }

    // distinct values ascending with per-value class counts
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut values: Vec<f64> = Vec::new();
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for &i in &idx {
        if values.last() != Some(&scores[i]) {
            values.push(scores[i]);
            pos.push(0);
            neg.push(0);
        }
        let k = values.len() - 1;
        if labels[i] == 1 {
            pos[k] += 1;
        } else {
            neg[k] += 1;
        }
    }
    let m = values.len();

    let mf1 = |tp: usize, fp: usize| {
        let c = metrics::Confusion {
            tp,
            fp,
            tn: total_neg - fp,
            fn_: total_pos - tp,
        };
        c.macro_f1()
    };

    // Candidate j in 0..=m: j = 0 is -inf, j = m is +inf, otherwise the
    // midpoint between values[j-1] and values[j].
    let threshold_at = |j: usize, dir: Direction| -> f64 {
        if j == 0 {
            return f64::NEG_INFINITY;
        }
        if j == m {
            return f64::INFINITY;
        }
        let (a, b) = (values[j - 1], values[j]);
        let mid = a + (b - a) / 2.0;
        if mid > a && mid < b {
            mid
        } else {
            match dir {
                Direction::HigherIsHallucinated => b,
                Direction::LowerIsHallucinated => a,
            }
        }
    };

    // suffix sums: flagged by "higher" at candidate j are values[j..]
    let mut suf_pos = vec![0usize; m + 1];
    let mut suf_neg = vec![0usize; m + 1];
    for k in (0..m).rev() {
        suf_pos[k] = suf_pos[k + 1] + pos[k];
        suf_neg[k] = suf_neg[k + 1] + neg[k];
    }

    let mut best: Option<(f64, usize, Direction)> = None;
    for j in 0..=m {
        for dir in [Direction::HigherIsHallucinated, Direction::LowerIsHallucinated] {
            let (tp, fp) = match dir {
                Direction::HigherIsHallucinated => (suf_pos[j], suf_neg[j]),
                Direction::LowerIsHallucinated => (total_pos - suf_pos[j], total_neg - suf_neg[j]),
            };
            let f = mf1(tp, fp);
            // j ascends, so the first strict maximum holds the lowest threshold;
            // Higher is visited first at equal j.
            if best.is_none_or(|(bf, _, _)| f > bf) {
                best = Some((f, j, dir));
            }
        }
    }
    let (f, j, direction) = best.expect("at least two candidates");
    Ok(TunedDetector {
        detector: StatDetector {
            statistic,
            reduction: statistic.reduction(),
            direction,
            threshold: threshold_at(j, direction),
        },
        val_macro_f1: f,
    })
}

/// Macro-F1 of a fixed detector on scored data.
pub fn detector_macro_f1(det: &StatDetector, labels: &[u8], scores: &[f64]) -> Result<f64> {
    let preds: Vec<u8> = scores.iter().map(|&s| det.predict_score(s)).collect();
    Ok(metrics::f1_macro_f1(labels, &preds)?.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrivialPredictions {
    pub name: &'static str,
    pub predictions: Vec<u8>,
}

impl TrivialPredictions {
    /// Hard predictions double as scores.
    pub fn scores(&self) -> Vec<f64> {
        self.predictions.iter().map(|&p| p as f64).collect()
    }
}

/// Constant-positive, constant-negative, fair-coin and prevalence-weighted
/// coin predictions for `n` responses.
pub fn trivial_baselines(n: usize, train_prevalence: f64, seed: u64) -> Result<Vec<TrivialPredictions>> {
    if !(0.0..=1.0).contains(&train_prevalence) {
        return Err(HaltError::Precondition(format!(
            "prevalence {train_prevalence} outside [0, 1]"
        )));
    }
    let mut coin = ChaCha8Rng::seed_from_u64(crate::seeds::derive(seed, "random"));
    let mut weighted = ChaCha8Rng::seed_from_u64(crate::seeds::derive(seed, "weighted_random"));
    Ok(vec![
        TrivialPredictions {
            name: "constant_positive",
            predictions: vec![1; n],
        },
        TrivialPredictions {
            name: "constant_negative",
            predictions: vec![0; n],
        },
        TrivialPredictions {
            name: "random",
            predictions: (0..n).map(|_| coin.random_bool(0.5) as u8).collect(),
        },
        TrivialPredictions {
            name: "weighted_random",
            predictions: (0..n).map(|_| weighted.random_bool(train_prevalence) as u8).collect(),
        },
    ])
}
