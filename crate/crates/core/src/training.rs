//! Optimization: Adam with L2 weight decay, global-norm clipping, plateau
//! learning-rate schedule, early stopping and best-checkpoint selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HaltError, Result};
use crate::features::FeatureSequence;
use crate::metrics;
use crate::model::{self, Batch, HaltModel, Mode};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub clip_max_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Apply weight decay directly to the weights (AdamW) instead of adding
    /// it to the gradient.
    pub decoupled_weight_decay: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 4.41e-4,
            weight_decay: 2.34e-6,
            batch_size: 512,
            max_epochs: 100,
            plateau_factor: 0.5,
            plateau_patience: 3,
            early_stop_patience: 15,
            clip_max_norm: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            decoupled_weight_decay: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("plateau_factor", self.plateau_factor),
            ("clip_max_norm", self.clip_max_norm),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(HaltError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(HaltError::Config("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(HaltError::Config("batch_size and max_epochs must be >= 1".into()));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(HaltError::Config("patiences must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(HaltError::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decoupled: bool,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        AdamHyper {
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
            decoupled: c.decoupled_weight_decay,
        }
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        (&TrainConfig::default()).into()
    }
}

/// One bias-corrected Adam update. With `decoupled == false` the decay is
/// added to the gradient (L2); otherwise the weights shrink by `lr * wd`.
/// Parameters are left untouched if any gradient is non-finite.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    hyper: AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(HaltError::Precondition("optimizer shape mismatch".into()));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(HaltError::numeric("optimizer: non-finite gradient"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for i in 0..params.len() {
        let mut g = grads[i];
        if !hyper.decoupled {
            g += weight_decay * params[i];
        }
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        if hyper.decoupled {
            params[i] -= lr * weight_decay * params[i];
        }
        params[i] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

pub fn global_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Reduce-on-plateau for a metric that should increase.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    factor: f64,
    patience: usize,
    best: Option<f64>,
    bad_epochs: usize,
    multiplier: f64,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            factor,
            patience,
            best: None,
            bad_epochs: 0,
            multiplier: 1.0,
        }
    }

    /// Records one epoch's metric and returns the multiplier for the next
    /// epoch. The rate is cut once more than `patience` consecutive epochs
    /// fail to beat the best value; the counter then restarts.
    pub fn step(&mut self, metric: f64) -> f64 {
        match self.best {
            Some(b) if metric <= b => {
                self.bad_epochs += 1;
                if self.bad_epochs > self.patience {
                    self.multiplier *= self.factor;
                    self.bad_epochs = 0;
                }
            }
            _ => {
                self.best = Some(metric);
                self.bad_epochs = 0;
            }
        }
        self.multiplier
    }

    pub fn multiplier(&self) -> f64 {
        self.multiplier
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopSignal {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a new best.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, metric: f64) -> StopSignal {
        match self.best {
            Some(b) if metric <= b => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    StopSignal::Stop
                } else {
                    StopSignal::Continue
                }
            }
            _ => {
                self.best = Some(metric);
                self.bad_epochs = 0;
                StopSignal::Improved
            }
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best monitored metric.
    pub best_model: HaltModel,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub log: Vec<EpochLog>,
    /// Set when training stopped on a numeric fault; `best_model` is then the
    /// last good checkpoint (or the initial model if no epoch finished).
    pub fault: Option<String>,
}

/// Validation macro-F1 at decision threshold 0.5.
pub fn validation_macro_f1(model: &HaltModel, val: &[FeatureSequence]) -> Result<f64> {
    let preds = model::predict(model, val, 0.5)?;
    let labels: Vec<u8> = val.iter().map(|s| s.label).collect();
    let p: Vec<u8> = preds.iter().map(|p| p.label).collect();
    Ok(metrics::f1_macro_f1(&labels, &p)?.1)
}

/// Writes the log as JSON lines.
pub fn format_log(log: &[EpochLog]) -> String {
    let mut s = String::new();
    for e in log {
        s.push_str(&serde_json::to_string(e).expect("log entries serialize"));
        s.push('\n');
    }
    s
}

/// Trains `model` on `train_set`, monitoring validation macro-F1.
pub fn train(model: HaltModel, train_set: &[FeatureSequence], val_set: &[FeatureSequence], config: &TrainConfig) -> Result<TrainOutcome> {
    if val_set.is_empty() {
        return Err(HaltError::Precondition("validation set is empty".into()));
    }
    for s in val_set {
        model::check_compatible(&model, s)?;
    }
    train_with_monitor(model, train_set, config, |m| validation_macro_f1(m, val_set))
}

/// Training loop with an arbitrary maximized monitor.
pub fn train_with_monitor(
    mut model: HaltModel,
    train_set: &[FeatureSequence],
    config: &TrainConfig,
    mut monitor: impl FnMut(&HaltModel) -> Result<f64>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(HaltError::Precondition("training set is empty".into()));
    }
    for s in train_set {
        model::check_compatible(&model, s)?;
        if s.is_empty() {
            return Err(HaltError::Precondition(format!("sequence `{}` is empty", s.trace_id)));
        }
    }
    model
        .metadata
        .insert("weight_decay_mode".into(), if config.decoupled_weight_decay { "decoupled" } else { "coupled" }.into());
    model
        .metadata
        .insert("adam".into(), format!("beta1={},beta2={},eps={}", config.adam_beta1, config.adam_beta2, config.adam_eps));

    let hyper = AdamHyper::from(config);
    let mut state = AdamState::new(model.param_count());
    let mut scheduler = PlateauScheduler::new(config.plateau_factor, config.plateau_patience);
    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let shuffle_seed = seeds::derive(config.seed, "shuffle");
    let dropout_seed = seeds::derive(config.seed, "dropout");

    let mut best_model = model.clone();
    let mut best_epoch = 0;
    let mut best_metric = f64::NEG_INFINITY;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut global_step: u64 = 0;

    for epoch in 1..=config.max_epochs {
        let lr = config.lr * scheduler.multiplier();
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(shuffle_seed, epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut fault = None;
        for chunk in order.chunks(config.batch_size) {
            let seqs: Vec<&FeatureSequence> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = Batch::from_sequences(&seqs);
            let mode = Mode::Train {
                seed: seeds::mix(dropout_seed, global_step),
            };
            global_step += 1;
            let step = model::loss_and_grad(&model, &batch, mode).and_then(|mut lg| {
                clip_global_norm(&mut lg.param_grads, config.clip_max_norm);
                adam_step(&mut model.params, &lg.param_grads, &mut state, lr, config.weight_decay, hyper)?;
                if model.params.iter().any(|p| !p.is_finite()) {
                    return Err(HaltError::numeric("parameter update"));
                }
                Ok(lg.loss)
            });
            match step {
                Ok(loss) => loss_sum += loss * chunk.len() as f64,
                Err(e @ HaltError::Numeric { .. }) => {
                    fault = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(f) = fault {
            return Ok(TrainOutcome {
                best_model,
                best_epoch,
                best_metric,
                log,
                fault: Some(f),
            });
        }

        let metric = monitor(&model)?;
        scheduler.step(metric);
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_macro_f1: metric,
            lr,
        });
        match stopper.observe(metric) {
            StopSignal::Improved => {
                best_model = model.clone();
                best_epoch = epoch;
                best_metric = metric;
            }
            StopSignal::Continue => {}
            StopSignal::Stop => break,
        }
    }
    best_model.metadata.insert("best_epoch".into(), best_epoch.to_string());
    Ok(TrainOutcome {
        best_model,
        best_epoch,
        best_metric,
        log,
        fault: None,
    })
}

/// One retraining with some columns removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub dropped: Vec<String>,
    pub macro_f1: f64,
    /// `macro_f1` minus the full-feature score.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub full_macro_f1: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn render(&self) -> String {
        let w = self
            .rows
            .iter()
            .map(|r| r.dropped.join(",").len() + 4)
            .chain([12])
            .max()
            .unwrap_or(12);
        let mut out = format!("{:<w$}  {:>8}  {:>8}\n", "Variant", "MacroF1", "Delta");
        out.push_str(&format!("{:<w$}  {:>8.2}  {:>8}\n", "full", self.full_macro_f1 * 100.0, "-"));
        for r in &self.rows {
            let name = format!("w/o {}", r.dropped.join(","));
            out.push_str(&format!("{name:<w$}  {:>8.2}  {:>+8.2}\n", r.macro_f1 * 100.0, r.delta * 100.0));
        }
        out
    }
}

/// Retrains with each column set masked out and compares test macro-F1 with
/// the full-feature model. Every run starts from the same init seed.
pub fn ablate(
    model_config: &crate::model::HaltConfig,
    config: &TrainConfig,
    init_seed: u64,
    sets: [&[FeatureSequence]; 3],
    column_sets: &[Vec<usize>],
) -> Result<AblationReport> {
    let [train_set, val_set, test_set] = sets;
    let run = |cfg: crate::model::HaltConfig| -> Result<f64> {
        let model = HaltModel::new(cfg, init_seed)?;
        let out = train(model, train_set, val_set, config)?;
        if let Some(f) = out.fault {
            return Err(HaltError::Numeric { stage: f });
        }
        validation_macro_f1(&out.best_model, test_set)
    };
    let full_macro_f1 = run(model_config.clone())?;
    let mut rows = Vec::with_capacity(column_sets.len());
    for cols in column_sets {
        let mut mask = model_config.column_mask;
        for &c in cols {
            if c >= crate::features::FEATURE_DIM {
                return Err(HaltError::Config(format!("column index {c} out of range")));
            }
            mask.0[c] = false;
        }
        let cfg = crate::model::HaltConfig {
            column_mask: mask,
            ..model_config.clone()
        };
        let f = run(cfg)?;
        let names = crate::features::column_names();
        rows.push(AblationRow {
            dropped: cols.iter().map(|&c| names[c].clone()).collect(),
            macro_f1: f,
            delta: f - full_macro_f1,
        });
    }
    Ok(AblationReport { full_macro_f1, rows })
}
