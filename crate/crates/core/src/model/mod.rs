//! The sequence classifier: input LayerNorm, two-layer GELU projection, a
//! stacked bidirectional GRU, top-q salient-timestep pooling and a linear head.
//!
//! Parameters live in one flat `Vec<f64>` described by a [`ParamLayout`], which
//! keeps optimizer updates, gradient clipping and serialization trivial.

mod attribution;
mod io;
mod network;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HaltError, Result};
use crate::features::{ColumnMask, FeatureSequence, FEATURE_DIM, LAYOUT_VERSION};

pub use attribution::{attribute, Attribution};
pub use io::{load_model, read_model, save_model, write_model, FORMAT_VERSION, MAGIC};
pub use network::{bce_with_logits, pool_count, SequenceCache};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HaltConfig {
    pub input_dim: usize,
    pub proj_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub bidirectional: bool,
    pub dropout_rate: f64,
    pub top_q: f64,
    pub out_norm: bool,
    pub column_mask: ColumnMask,
}

impl Default for HaltConfig {
    fn default() -> Self {
        HaltConfig {
            input_dim: FEATURE_DIM,
            proj_dim: 128,
            hidden_dim: 256,
            num_layers: 5,
            bidirectional: true,
            dropout_rate: 0.4,
            top_q: 0.15,
            out_norm: false,
            column_mask: ColumnMask::default(),
        }
    }
}

impl HaltConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HaltError::Config(m));
        if self.input_dim != FEATURE_DIM {
            return bad(format!("input_dim must be {FEATURE_DIM}, got {}", self.input_dim));
        }
        if self.proj_dim == 0 || self.hidden_dim == 0 || self.num_layers == 0 {
            return bad("proj_dim, hidden_dim and num_layers must be >= 1".into());
        }
        if !(self.top_q > 0.0 && self.top_q <= 1.0) {
            return bad(format!("top_q must lie in (0, 1], got {}", self.top_q));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }

    pub fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    /// Width of the top-layer output fed to pooling.
    pub fn output_dim(&self) -> usize {
        self.hidden_dim * self.directions()
    }
}

/// Name, shape and position of one parameter array in the flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct GruOffsets {
    pub w_input: usize,
    pub w_recurrent: usize,
    pub bias: usize,
    pub input_dim: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Offsets {
    pub ln_gain: usize,
    pub ln_bias: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    /// `gru[layer][direction]`
    pub gru: Vec<Vec<GruOffsets>>,
    pub out_ln: Option<(usize, usize)>,
    pub head_w: usize,
    pub head_b: usize,
}

/// Ordered list of parameter arrays for a config.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub specs: Vec<ParamSpec>,
    pub(crate) offsets: Offsets,
    total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &HaltConfig) -> Self {
        let mut specs = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>| -> usize {
            let offset = total;
            total += shape.iter().product::<usize>();
            specs.push(ParamSpec { name, shape, offset });
            offset
        };
        let f = cfg.input_dim;
        let p = cfg.proj_dim;
        let h = cfg.hidden_dim;
        let ln_gain = push("input_norm.gain".into(), vec![f]);
        let ln_bias = push("input_norm.bias".into(), vec![f]);
        let w1 = push("proj.0.weight".into(), vec![p, f]);
        let b1 = push("proj.0.bias".into(), vec![p]);
        let w2 = push("proj.1.weight".into(), vec![p, p]);
        let b2 = push("proj.1.bias".into(), vec![p]);
        let mut gru = Vec::new();
        for layer in 0..cfg.num_layers {
            let input_dim = if layer == 0 { p } else { cfg.output_dim() };
            let mut dirs = Vec::new();
            for dir in 0..cfg.directions() {
                let tag = if dir == 0 { "fwd" } else { "bwd" };
                let w_input = push(format!("gru.{layer}.{tag}.w_input"), vec![3 * h, input_dim]);
                let w_recurrent = push(format!("gru.{layer}.{tag}.w_recurrent"), vec![3 * h, h]);
                let bias = push(format!("gru.{layer}.{tag}.bias"), vec![3 * h]);
                dirs.push(GruOffsets {
                    w_input,
                    w_recurrent,
                    bias,
                    input_dim,
                });
            }
            gru.push(dirs);
        }
        let d = cfg.output_dim();
        let out_ln = if cfg.out_norm {
            let g = push("out_norm.gain".into(), vec![d]);
            let b = push("out_norm.bias".into(), vec![d]);
            Some((g, b))
        } else {
            None
        };
        let head_w = push("head.weight".into(), vec![d]);
        let head_b = push("head.bias".into(), vec![1]);
        ParamLayout {
            specs,
            offsets: Offsets {
                ln_gain,
                ln_bias,
                w1,
                b1,
                w2,
                b2,
                gru,
                out_ln,
                head_w,
                head_b,
            },
            total,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }
}

/// Flat gradient buffer aligned with a model's parameter layout.
pub type Gradients = Vec<f64>;

/// Network weights plus the configuration and metadata needed to reuse them.
#[derive(Debug, Clone)]
pub struct HaltModel {
    pub config: HaltConfig,
    pub params: Vec<f64>,
    pub layout: ParamLayout,
    /// Free-form provenance (training clusters, weight-decay mode, ...).
    pub metadata: BTreeMap<String, String>,
}

impl HaltModel {
    /// Seeded initialization: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for
    /// every weight and bias array, LayerNorm gain 1 and bias 0.
    pub fn new(config: HaltConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![0.0; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in &layout.specs {
            let slot = &mut params[spec.range()];
            if spec.name.ends_with("norm.gain") {
                slot.fill(1.0);
                continue;
            }
            if spec.name.ends_with("norm.bias") {
                continue;
            }
            let fan_in = if spec.name.ends_with(".bias") {
                if spec.name.starts_with("gru.") {
                    config.hidden_dim
                } else if spec.name.starts_with("proj.0") {
                    config.input_dim
                } else if spec.name.starts_with("proj.1") {
                    config.proj_dim
                } else {
                    config.output_dim()
                }
            } else {
                *spec.shape.last().expect("weights have a shape")
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in slot.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        let mut metadata = BTreeMap::new();
        metadata.insert("proj_hidden_dim".into(), config.proj_dim.to_string());
        metadata.insert("feature_layout_version".into(), LAYOUT_VERSION.to_string());
        Ok(HaltModel {
            config,
            params,
            layout,
            metadata,
        })
    }

    /// Model with every parameter set to zero (LayerNorm gains included).
    pub fn zeros(config: HaltConfig) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.iter_mut().for_each(|p| *p = 0.0);
        Ok(m)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|s| &self.params[s.range()])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.layout.get(name)?.range();
        Some(&mut self.params[r])
    }

    pub fn zero_grads(&self) -> Gradients {
        vec![0.0; self.params.len()]
    }
}

/// Forward-pass mode. Dropout is active only in `Train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Inference,
    /// `seed` keys the dropout masks; example `i` of a batch draws from a
    /// stream derived from `(seed, i)`.
    Train { seed: u64 },
}

/// Zero-padded batch of feature sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `B x max_len x FEATURE_DIM`, row-major.
    pub features: Vec<f64>,
    pub lengths: Vec<usize>,
    pub labels: Vec<u8>,
    pub max_len: usize,
}

impl Batch {
    pub fn from_sequences(seqs: &[&FeatureSequence]) -> Self {
        let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        Self::with_padding(seqs, max_len)
    }

    /// Pads every sequence to `max_len` (must be at least the longest).
    pub fn with_padding(seqs: &[&FeatureSequence], max_len: usize) -> Self {
        let mut features = vec![0.0; seqs.len() * max_len * FEATURE_DIM];
        for (b, s) in seqs.iter().enumerate() {
            assert!(s.len() <= max_len, "sequence longer than padding target");
            for (t, row) in s.rows.iter().enumerate() {
                let o = (b * max_len + t) * FEATURE_DIM;
                features[o..o + FEATURE_DIM].copy_from_slice(row);
            }
        }
        Batch {
            features,
            lengths: seqs.iter().map(|s| s.len()).collect(),
            labels: seqs.iter().map(|s| s.label).collect(),
            max_len,
        }
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    /// True exactly at positions inside the sequence.
    pub fn mask(&self, b: usize, t: usize) -> bool {
        t < self.lengths[b]
    }

    /// Unpadded rows of example `b`.
    pub fn sequence(&self, b: usize) -> &[f64] {
        let o = b * self.max_len * FEATURE_DIM;
        &self.features[o..o + self.lengths[b] * FEATURE_DIM]
    }

    fn check(&self) -> Result<()> {
        for (b, &len) in self.lengths.iter().enumerate() {
            if len == 0 {
                return Err(HaltError::Precondition(format!("batch example {b} has length 0")));
            }
            if len > self.max_len {
                return Err(HaltError::Precondition(format!("batch example {b} exceeds max_len")));
            }
        }
        if self.features.len() != self.size() * self.max_len * FEATURE_DIM {
            return Err(HaltError::Precondition("feature buffer size mismatch".into()));
        }
        Ok(())
    }
}

/// Per-example forward state, kept for [`backward`].
pub struct ForwardCache {
    pub(crate) sequences: Vec<SequenceCache>,
}

impl ForwardCache {
    /// Timesteps chosen by top-q pooling for example `b`.
    pub fn selected(&self, b: usize) -> &[usize] {
        self.sequences[b].selected()
    }
}

/// Seed of the dropout stream for one example in a batch.
pub(crate) fn example_seed(seed: u64, index: usize) -> u64 {
    crate::seeds::mix(seed, index as u64)
}

fn example_mode(mode: Mode, index: usize) -> Option<u64> {
    match mode {
        Mode::Inference => None,
        Mode::Train { seed } => Some(example_seed(seed, index)),
    }
}

/// Logits for every example plus the state needed for reverse mode.
pub fn forward(model: &HaltModel, batch: &Batch, mode: Mode) -> Result<(Vec<f64>, ForwardCache)> {
    batch.check()?;
    let sequences: Vec<SequenceCache> = (0..batch.size())
        .into_par_iter()
        .map(|b| network::forward_sequence(model, batch.sequence(b), batch.lengths[b], example_mode(mode, b)))
        .collect::<Result<_>>()?;
    let logits = sequences.iter().map(|c| c.logit).collect();
    Ok((logits, ForwardCache { sequences }))
}

/// Logits only, in inference mode.
pub fn logits(model: &HaltModel, batch: &Batch) -> Result<Vec<f64>> {
    batch.check()?;
    (0..batch.size())
        .into_par_iter()
        .map(|b| network::forward_sequence(model, batch.sequence(b), batch.lengths[b], None).map(|c| c.logit))
        .collect()
}

/// Reverse-mode pass from per-example logit gradients.
///
/// Returns parameter gradients and input gradients laid out like
/// `batch.features` (padded positions stay exactly zero).
pub fn backward(model: &HaltModel, batch: &Batch, cache: &ForwardCache, dlogits: &[f64]) -> (Gradients, Vec<f64>) {
    let mut grads = model.zero_grads();
    let mut input_grads = vec![0.0; batch.features.len()];
    for (b, c) in cache.sequences.iter().enumerate() {
        let dx = network::backward_sequence(model, c, dlogits[b], &mut grads);
        let o = b * batch.max_len * FEATURE_DIM;
        input_grads[o..o + dx.len()].copy_from_slice(&dx);
    }
    (grads, input_grads)
}

/// Mean BCE-with-logits loss and its exact gradients.
#[derive(Debug, Clone)]
pub struct LossAndGrad {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub param_grads: Gradients,
    pub input_grads: Vec<f64>,
}

/// Examples per work unit; gradients are summed in this fixed grouping so the
/// result does not depend on thread scheduling.
const GRAD_CHUNK: usize = 4;
/// Work units evaluated concurrently before folding into the accumulator.
const GRAD_WAVE: usize = 8;

pub fn loss_and_grad(model: &HaltModel, batch: &Batch, mode: Mode) -> Result<LossAndGrad> {
    batch.check()?;
    let n = batch.size();
    if n == 0 {
        return Err(HaltError::Precondition("empty batch".into()));
    }
    let scale = 1.0 / n as f64;
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(GRAD_CHUNK)
        .map(|s| (s, (s + GRAD_CHUNK).min(n)))
        .collect();

    let mut grads = model.zero_grads();
    let mut input_grads = vec![0.0; batch.features.len()];
    let mut logits = vec![0.0; n];
    let mut loss_sum = 0.0;

    for wave in chunks.chunks(GRAD_WAVE) {
        let parts: Vec<(Gradients, Vec<(usize, f64, f64, Vec<f64>)>)> = wave
            .par_iter()
            .map(|&(start, end)| -> Result<_> {
                let mut g = model.zero_grads();
                let mut per_example = Vec::with_capacity(end - start);
                for b in start..end {
                    let cache = network::forward_sequence(model, batch.sequence(b), batch.lengths[b], example_mode(mode, b))?;
                    let y = batch.labels[b] as f64;
                    let (loss, dz) = bce_with_logits(cache.logit, y);
                    let dx = network::backward_sequence(model, &cache, dz * scale, &mut g);
                    per_example.push((b, cache.logit, loss, dx));
                }
                Ok((g, per_example))
            })
            .collect::<Result<_>>()?;
        for (g, per_example) in parts {
            for (acc, v) in grads.iter_mut().zip(g.iter()) {
                *acc += v;
            }
            for (b, logit, loss, dx) in per_example {
                logits[b] = logit;
                loss_sum += loss;
                let o = b * batch.max_len * FEATURE_DIM;
                input_grads[o..o + dx.len()].copy_from_slice(&dx);
            }
        }
    }
    let loss = loss_sum * scale;
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(HaltError::numeric("loss/gradient"));
    }
    Ok(LossAndGrad {
        loss,
        logits,
        param_grads: grads,
        input_grads,
    })
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Checks that a sequence can be fed to `model`.
pub fn check_compatible(model: &HaltModel, seq: &FeatureSequence) -> Result<()> {
    if let Some(v) = model.metadata.get("feature_layout_version") {
        if v != &LAYOUT_VERSION.to_string() {
            return Err(HaltError::Compatibility(format!(
                "model expects feature layout {v}, toolkit produces {LAYOUT_VERSION}"
            )));
        }
    }
    if !model.config.column_mask.is_subset_of(&seq.mask) {
        let missing: Vec<String> = model
            .config
            .column_mask
            .0
            .iter()
            .zip(seq.mask.0.iter())
            .zip(crate::features::column_names())
            .filter(|((&m, &s), _)| m && !s)
            .map(|(_, n)| n)
            .collect();
        return Err(HaltError::Compatibility(format!(
            "sequence `{}` lacks columns the model uses: {}",
            seq.trace_id,
            missing.join(", ")
        )));
    }
    Ok(())
}

/// Hallucination score and thresholded label for one sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub score: f64,
    pub label: u8,
}

/// Inference batch size for [`predict`]; results do not depend on it.
const PREDICT_BATCH: usize = 64;

pub fn predict(model: &HaltModel, seqs: &[FeatureSequence], threshold: f64) -> Result<Vec<Prediction>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(HaltError::Precondition(format!("threshold {threshold} outside [0, 1]")));
    }
    for s in seqs {
        check_compatible(model, s)?;
    }
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(PREDICT_BATCH) {
        let refs: Vec<&FeatureSequence> = chunk.iter().collect();
        let batch = Batch::from_sequences(&refs);
        for z in logits(model, &batch)? {
            let score = sigmoid(z);
            out.push(Prediction {
                score,
                label: (score >= threshold) as u8,
            });
        }
    }
    Ok(out)
}

/// Predicted scores for a set of sequences, in inference mode.
pub fn scores(model: &HaltModel, seqs: &[FeatureSequence]) -> Result<Vec<f64>> {
    Ok(predict(model, seqs, 0.5)?.into_iter().map(|p| p.score).collect())
}
