//! Synthetic calibration-bias emulators.
//!
//! An emulator draws each decoding step from a 200-symbol Zipf-like
//! distribution `z_j = -s * ln(1 + j) + noise` and emits the selected token's
//! log-prob followed by the 19 strongest others. Three step kinds exist:
//!
//! * base steps, sharpness drawn from the task family (occasionally picking
//!   rank 2 or 3),
//! * burst steps, flat (`burst_sharpness`) and greedy,
//! * pivot steps, sharp (`pivot_sharpness`) with the selected token at a rank
//!   drawn from `pivot_rank`.
//!
//! Every trace carries the same multiset of burst and pivot steps whatever its
//! label. What differs is the arrangement: either each event is a contiguous
//! run of bursts closed by a pivot, or all event steps are scattered with base
//! steps between them. Which arrangement marks a hallucination follows from
//! the sign of the bias function at the burst confidence: negative bias
//! (overconfident) makes the contiguous run the hallucinated pattern. Families
//! with `level_shift` additionally lower the base sharpness of hallucinated
//! traces by `drift`, a signal visible to aggregate statistics.
//!
//! The first and last steps of every trace are base steps.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HaltError, Result};
use crate::features::{entropy_overall, featurize_all, topk_mass, trunc_softmax, FeatureSequence};
use crate::model::{HaltConfig, HaltModel};
use crate::seeds;
use crate::trace::{LogProbStep, ResponseTrace, TOP_K};
use crate::training::{self, TrainConfig};

pub const SUPPORT: usize = 200;
/// Smallest L-infinity distance accepted between the bias parameters of two
/// emulators compared in the hypothesis suite.
pub const MIN_BIAS_DISTANCE: f64 = 0.05;
pub const BIAS_KNOTS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
/// Bundled task families differ pairwise by at least this mean length ...
pub const MIN_FAMILY_LENGTH_GAP: f64 = 8.0;
/// ... and by at least this mean per-step `entropy_overall`.
pub const MIN_FAMILY_ENTROPY_GAP: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasParams {
    /// Empirical correctness minus confidence at the confidences in
    /// [`BIAS_KNOTS`], linearly interpolated in between.
    pub bias_knots: [f64; 5],
    pub burst_sharpness: f64,
    pub pivot_sharpness: f64,
    /// Inclusive rank range of the selected token at pivot steps.
    pub pivot_rank: [usize; 2],
    /// Inclusive range of burst steps per event.
    pub burst_len: [usize; 2],
    /// Base-sharpness reduction of hallucinated traces in level-shift
    /// families.
    pub drift: f64,
}

impl BiasParams {
    pub fn bias(&self, confidence: f64) -> f64 {
        let p = confidence.clamp(0.0, 1.0);
        let seg = ((p * 4.0).floor() as usize).min(3);
        let w = (p - BIAS_KNOTS[seg]) * 4.0;
        self.bias_knots[seg] * (1.0 - w) + self.bias_knots[seg + 1] * w
    }

    /// Expected top-1 probability of a noise-free burst step.
    pub fn burst_confidence(&self) -> f64 {
        let z: f64 = (0..SUPPORT).map(|j| (1.0 + j as f64).powf(-self.burst_sharpness)).sum();
        1.0 / z
    }

    pub fn contiguous_is_hallucinated(&self) -> bool {
        self.bias(self.burst_confidence()) < 0.0
    }

    fn vector(&self) -> Vec<f64> {
        let mut v = self.bias_knots.to_vec();
        v.extend([
            self.burst_sharpness,
            self.pivot_sharpness,
            self.pivot_rank[0] as f64,
            self.pivot_rank[1] as f64,
            self.burst_len[0] as f64,
            self.burst_len[1] as f64,
            self.drift,
        ]);
        v
    }

    pub fn distance(&self, other: &BiasParams) -> f64 {
        self.vector()
            .iter()
            .zip(other.vector())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn validate(&self) -> Result<()> {
        let ok = self.burst_sharpness > 0.0
            && self.pivot_sharpness > 0.0
            && self.drift >= 0.0
            && (2..=TOP_K).contains(&self.pivot_rank[0])
            && self.pivot_rank[0] <= self.pivot_rank[1]
            && self.pivot_rank[1] <= TOP_K
            && self.burst_len[0] >= 1
            && self.burst_len[0] <= self.burst_len[1];
        if !ok {
            return Err(HaltError::Config("invalid emulator bias parameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFamily {
    pub name: String,
    /// Inclusive length range, drawn uniformly.
    pub min_len: usize,
    pub max_len: usize,
    pub base_sharpness: f64,
    /// Relative standard deviation of per-step base sharpness.
    pub sharpness_jitter: f64,
    pub logit_noise: f64,
    pub nongreedy_rate: f64,
    /// One planted event per this many tokens (at least one, at most three).
    pub tokens_per_event: usize,
    #[serde(default)]
    pub level_shift: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulatorSpec {
    pub id: String,
    pub bias_params: BiasParams,
    pub task_families: Vec<TaskFamily>,
    pub seed: u64,
}

impl EmulatorSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: EmulatorSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HaltError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.bias_params.validate()?;
        if self.task_families.is_empty() {
            return Err(HaltError::Config(format!("emulator `{}` has no task families", self.id)));
        }
        for f in &self.task_families {
            if f.min_len < 8 || f.max_len > 128 || f.min_len > f.max_len {
                return Err(HaltError::Config(format!("family `{}`: lengths must lie in [8, 128]", f.name)));
            }
            if f.base_sharpness <= 0.0 || f.tokens_per_event == 0 || !(0.0..=1.0).contains(&f.nongreedy_rate) {
                return Err(HaltError::Config(format!("family `{}` has invalid parameters", f.name)));
            }
        }
        Ok(())
    }

    pub fn family(&self, name: &str) -> Result<&TaskFamily> {
        self.task_families.iter().find(|f| f.name == name).ok_or_else(|| {
            let known: Vec<&str> = self.task_families.iter().map(|f| f.name.as_str()).collect();
            HaltError::Config(format!("unknown family `{name}` (known: {})", known.join(", ")))
        })
    }
}

const FIXTURE_A: &str = include_str!("../fixtures/emulator_a.json");
const FIXTURE_B: &str = include_str!("../fixtures/emulator_b.json");

/// Frozen emulator A.
pub fn fixture_a() -> EmulatorSpec {
    EmulatorSpec::from_json(FIXTURE_A).expect("bundled fixture parses")
}

/// Frozen emulator B, the bias-inverted counterpart of A.
pub fn fixture_b() -> EmulatorSpec {
    EmulatorSpec::from_json(FIXTURE_B).expect("bundled fixture parses")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StepKind {
    Base,
    Burst,
    Pivot,
}

/// Sorted (descending) log-probabilities over the full support.
fn sample_distribution(rng: &mut ChaCha8Rng, sharpness: f64, noise: f64) -> Vec<f64> {
    let mut z: Vec<f64> = (0..SUPPORT)
        .map(|j| {
            let e: f64 = rng.sample(StandardNormal);
            -sharpness * (1.0 + j as f64).ln() + noise * e
        })
        .collect();
    z.sort_by(|a, b| b.total_cmp(a));
    let m = z[0];
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter_mut().for_each(|v| *v -= lse);
    z
}

/// Selected token at 1-based `rank`, then the 19 strongest others.
fn emit(full: &[f64], rank: usize) -> [f64; TOP_K] {
    let mut out = [0.0; TOP_K];
    out[0] = full[rank - 1];
    let mut k = 1;
    for (j, &v) in full.iter().enumerate() {
        if k == TOP_K {
            break;
        }
        if j != rank - 1 {
            out[k] = v;
            k += 1;
        }
    }
    out
}

/// Splits `free` base steps into `gaps` runs of at least one.
fn random_gaps(rng: &mut ChaCha8Rng, free: usize, gaps: usize) -> Vec<usize> {
    let mut g = vec![1; gaps];
    for _ in 0..free - gaps {
        g[rng.random_range(0..gaps)] += 1;
    }
    g
}

fn layout(rng: &mut ChaCha8Rng, family: &TaskFamily, bias: &BiasParams, len: usize, contiguous: bool) -> Vec<StepKind> {
    let n_events = (len / family.tokens_per_event).clamp(1, 3);
    let mut bursts: Vec<usize> = (0..n_events)
        .map(|_| rng.random_range(bias.burst_len[0]..=bias.burst_len[1]))
        .collect();
    // the scattered arrangement needs a base step around every event step
    loop {
        let event_steps: usize = bursts.iter().map(|b| b + 1).sum();
        if 2 * event_steps < len {
            break;
        }
        let longest = bursts.iter_mut().max().expect("at least one event");
        if *longest > 1 {
            *longest -= 1;
        } else {
            bursts.pop();
        }
    }
    let event_steps: usize = bursts.iter().map(|b| b + 1).sum();
    let mut kinds = Vec::with_capacity(len);
    if contiguous {
        let gaps = random_gaps(rng, len - event_steps, bursts.len() + 1);
        for (i, &b) in bursts.iter().enumerate() {
            kinds.extend(std::iter::repeat_n(StepKind::Base, gaps[i]));
            kinds.extend(std::iter::repeat_n(StepKind::Burst, b));
            kinds.push(StepKind::Pivot);
        }
        kinds.extend(std::iter::repeat_n(StepKind::Base, gaps[bursts.len()]));
    } else {
        let mut events: Vec<StepKind> = bursts
            .iter()
            .flat_map(|&b| std::iter::repeat_n(StepKind::Burst, b).chain([StepKind::Pivot]))
            .collect();
        events.shuffle(rng);
        let gaps = random_gaps(rng, len - event_steps, event_steps + 1);
        for (i, e) in events.into_iter().enumerate() {
            kinds.extend(std::iter::repeat_n(StepKind::Base, gaps[i]));
            kinds.push(e);
        }
        kinds.extend(std::iter::repeat_n(StepKind::Base, gaps[event_steps]));
    }
    debug_assert_eq!(kinds.len(), len);
    kinds
}

/// A generated trace together with the full distributions behind each step.
#[derive(Debug, Clone)]
pub struct DetailedTrace {
    pub trace: ResponseTrace,
    /// Per step, sorted log-probabilities over all [`SUPPORT`] symbols.
    pub full_logprobs: Vec<Vec<f64>>,
}

fn generate_one(spec: &EmulatorSpec, family: &TaskFamily, label: u8, seed: u64, id: String) -> DetailedTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = &spec.bias_params;
    let len = rng.random_range(family.min_len..=family.max_len);
    let contiguous = (label == 1) == b.contiguous_is_hallucinated();
    let kinds = layout(&mut rng, family, b, len, contiguous);
    let base = if family.level_shift && label == 1 {
        family.base_sharpness - b.drift
    } else {
        family.base_sharpness
    };

    let mut steps = Vec::with_capacity(len);
    let mut full_logprobs = Vec::with_capacity(len);
    for kind in kinds {
        let (sharpness, rank) = match kind {
            StepKind::Base => {
                let e: f64 = rng.sample(StandardNormal);
                let s = (base * (1.0 + family.sharpness_jitter * e)).max(0.3);
                let rank = if rng.random_bool(family.nongreedy_rate) {
                    rng.random_range(2..=3)
                } else {
                    1
                };
                (s, rank)
            }
            StepKind::Burst => (b.burst_sharpness, 1),
            StepKind::Pivot => (b.pivot_sharpness, rng.random_range(b.pivot_rank[0]..=b.pivot_rank[1])),
        };
        let full = sample_distribution(&mut rng, sharpness, family.logit_noise);
        steps.push(LogProbStep::from_raw_unchecked(emit(&full, rank)));
        full_logprobs.push(full);
    }
    let meta = BTreeMap::from([
        ("emulator".to_string(), spec.id.clone()),
        ("family".to_string(), family.name.clone()),
    ]);
    DetailedTrace {
        trace: ResponseTrace {
            id,
            cluster: family.name.clone(),
            label,
            steps,
            meta,
        },
        full_logprobs,
    }
}

/// Generates `n` traces with their full distributions.
pub fn generate_detailed(spec: &EmulatorSpec, family: &str, n: usize, seed: u64) -> Result<Vec<DetailedTrace>> {
    spec.validate()?;
    let fam = spec.family(family)?;
    if n == 0 {
        return Err(HaltError::Precondition("n must be >= 1".into()));
    }
    let run_seed = seeds::mix(seeds::derive(spec.seed, family), seed);
    let mut labels: Vec<u8> = (0..n).map(|i| (i < n / 2) as u8).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds::derive(run_seed, "labels")));
    Ok(labels
        .par_iter()
        .enumerate()
        .map(|(i, &label)| {
            let id = format!("{}-{}-{}-{:05}", spec.id, family, seed, i);
            generate_one(spec, fam, label, seeds::mix(run_seed, i as u64), id)
        })
        .collect())
}

/// Generates `n` labeled traces: `n / 2` (rounded down) hallucinated.
pub fn generate(spec: &EmulatorSpec, family: &str, n: usize, seed: u64) -> Result<Vec<ResponseTrace>> {
    Ok(generate_detailed(spec, family, n, seed)?.into_iter().map(|d| d.trace).collect())
}

/// Reference data written next to generated trace files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub spec: EmulatorSpec,
    pub family: String,
    pub seed: u64,
    pub n: usize,
    pub contiguous_is_hallucinated: bool,
    /// Mean over steps of the exact top-k mass of the full distribution,
    /// keyed by k.
    pub mean_topk_mass: BTreeMap<usize, f64>,
    pub mean_length: f64,
    pub mean_entropy_overall: f64,
}

pub fn sidecar(spec: &EmulatorSpec, family: &str, seed: u64, traces: &[DetailedTrace]) -> Sidecar {
    let mut sums = vec![0.0; TOP_K + 1];
    let mut steps = 0usize;
    for t in traces {
        for full in &t.full_logprobs {
            let mut acc = 0.0;
            for k in 1..=TOP_K {
                acc += full[k - 1].exp();
                sums[k] += acc;
            }
            steps += 1;
        }
    }
    let denom = steps.max(1) as f64;
    Sidecar {
        spec: spec.clone(),
        family: family.to_string(),
        seed,
        n: traces.len(),
        contiguous_is_hallucinated: spec.bias_params.contiguous_is_hallucinated(),
        mean_topk_mass: (1..=TOP_K).map(|k| (k, sums[k] / denom)).collect(),
        mean_length: steps as f64 / traces.len().max(1) as f64,
        mean_entropy_overall: traces
            .iter()
            .flat_map(|t| &t.trace.steps)
            .map(|s| entropy_overall(&trunc_softmax(s)))
            .sum::<f64>()
            / denom,
    }
}

/// Mean captured mass of the emitted top-k entries, per requested k.
pub fn mean_topk_mass(traces: &[ResponseTrace], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    let steps: Vec<&LogProbStep> = traces.iter().flat_map(|t| &t.steps).collect();
    if steps.is_empty() {
        return Err(HaltError::Precondition("no steps".into()));
    }
    for &k in ks {
        let total: f64 = steps.iter().map(|s| topk_mass(s, k)).sum::<Result<f64>>()?;
        out.insert(k, total / steps.len() as f64);
    }
    Ok(out)
}

/// Sizes and model settings of the cross-emulator experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub model: HaltConfig,
    pub train: TrainConfig,
    pub n_train_per_family: usize,
    pub n_val_per_family: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            model: desk_model_config(),
            train: desk_train_config(),
            n_train_per_family: 400,
            n_val_per_family: 100,
            n_test: 400,
            seed: 7,
        }
    }
}

/// A reduced model suited to single-core runs.
pub fn desk_model_config() -> HaltConfig {
    HaltConfig {
        proj_dim: 16,
        hidden_dim: 16,
        num_layers: 2,
        dropout_rate: 0.1,
        ..HaltConfig::default()
    }
}

pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        batch_size: 32,
        max_epochs: 30,
        early_stop_patience: 8,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub emulator_a: String,
    pub emulator_b: String,
    pub train_families: [String; 2],
    pub held_out_family: String,
    pub a_on_a: f64,
    pub a_on_b: f64,
    pub b_on_b: f64,
    pub b_on_a: f64,
    pub gap_a: f64,
    pub gap_b: f64,
    pub bias_distance: f64,
}

/// Featurized train, validation and test sets of one family, each drawn
/// under its own sub-seed of `seed`.
pub fn split_sets(
    spec: &EmulatorSpec,
    family: &str,
    sizes: [usize; 3],
    seed: u64,
) -> Result<[Vec<FeatureSequence>; 3]> {
    let gen = |n: usize, split: &str| -> Result<Vec<FeatureSequence>> {
        Ok(featurize_all(&generate(spec, family, n, seeds::derive(seed, split))?))
    };
    Ok([gen(sizes[0], "train")?, gen(sizes[1], "validation")?, gen(sizes[2], "test")?])
}

/// Train and validation sets from the first two families of `spec`.
pub fn training_sets(spec: &EmulatorSpec, cfg: &SuiteConfig) -> Result<(Vec<FeatureSequence>, Vec<FeatureSequence>)> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for fam in spec.task_families.iter().take(2) {
        train.extend(generate(spec, &fam.name, cfg.n_train_per_family, seeds::derive(cfg.seed, "train"))?);
        val.extend(generate(spec, &fam.name, cfg.n_val_per_family, seeds::derive(cfg.seed, "validation"))?);
    }
    Ok((featurize_all(&train), featurize_all(&val)))
}

/// Test set from the third family of `spec`.
pub fn held_out_set(spec: &EmulatorSpec, cfg: &SuiteConfig) -> Result<Vec<FeatureSequence>> {
    let fam = &spec.task_families[2].name;
    Ok(featurize_all(&generate(spec, fam, cfg.n_test, seeds::derive(cfg.seed, "test"))?))
}

pub fn train_on(spec: &EmulatorSpec, cfg: &SuiteConfig) -> Result<HaltModel> {
    let (train, val) = training_sets(spec, cfg)?;
    let model = HaltModel::new(cfg.model.clone(), seeds::derive(cfg.seed, "init"))?;
    let mut tc = cfg.train.clone();
    tc.seed = cfg.seed;
    let out = training::train(model, &train, &val, &tc)?;
    if let Some(f) = out.fault {
        return Err(HaltError::Numeric { stage: f });
    }
    Ok(out.best_model)
}

/// Trains on families 1 and 2 of each emulator and cross-evaluates on the
/// third family of both.
pub fn hypothesis_suite(a: &EmulatorSpec, b: &EmulatorSpec, cfg: &SuiteConfig) -> Result<SuiteReport> {
    a.validate()?;
    b.validate()?;
    let distance = a.bias_params.distance(&b.bias_params);
    if distance < MIN_BIAS_DISTANCE {
        return Err(HaltError::Config(format!(
            "emulators `{}` and `{}` have nearly identical bias parameters (distance {distance:.4} < {MIN_BIAS_DISTANCE})",
            a.id, b.id
        )));
    }
    for s in [a, b] {
        if s.task_families.len() < 3 {
            return Err(HaltError::Config(format!("emulator `{}` needs at least 3 task families", s.id)));
        }
    }
    let model_a = train_on(a, cfg)?;
    let model_b = train_on(b, cfg)?;
    let test_a = held_out_set(a, cfg)?;
    let test_b = held_out_set(b, cfg)?;
    let a_on_a = training::validation_macro_f1(&model_a, &test_a)?;
    let a_on_b = training::validation_macro_f1(&model_a, &test_b)?;
    let b_on_b = training::validation_macro_f1(&model_b, &test_b)?;
    let b_on_a = training::validation_macro_f1(&model_b, &test_a)?;
    Ok(SuiteReport {
        emulator_a: a.id.clone(),
        emulator_b: b.id.clone(),
        train_families: [a.task_families[0].name.clone(), a.task_families[1].name.clone()],
        held_out_family: a.task_families[2].name.clone(),
        a_on_a,
        a_on_b,
        b_on_b,
        b_on_a,
        gap_a: a_on_a - a_on_b,
        gap_b: b_on_b - b_on_a,
        bias_distance: distance,
    })
}
