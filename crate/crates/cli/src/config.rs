//! Layered run configuration: preset defaults, then a JSON file, then flags.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use halt_core::{synth, ColumnMask, HaltConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Reference architecture and optimizer settings.
    Full,
    /// Small network and a shorter schedule for single-core runs.
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub preset: Preset,
    pub seed: u64,
    pub model: HaltConfig,
    pub train: TrainConfig,
    /// Names of feature columns withheld from the model.
    pub mask: Vec<String>,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model_path: Option<PathBuf>,
    pub threshold: f64,
    pub k: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::for_preset(Preset::Full)
    }
}

impl RunConfig {
    pub fn for_preset(preset: Preset) -> Self {
        let (model, train) = match preset {
            Preset::Full => (HaltConfig::default(), TrainConfig::default()),
            Preset::Desk => (synth::desk_model_config(), synth::desk_train_config()),
        };
        RunConfig {
            command: String::new(),
            preset,
            seed: 0,
            model,
            train,
            mask: Vec::new(),
            manifest: None,
            out: None,
            model_path: None,
            threshold: 0.5,
            k: (1..=20).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("run config always serializes");
        s.push('\n');
        s
    }
}

/// Values given on the command line; `None` leaves the lower layers alone.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub mask: Option<String>,
    pub max_epochs: Option<usize>,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model_path: Option<PathBuf>,
    pub threshold: Option<f64>,
    pub k: Option<Vec<usize>>,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_file(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    if !v.is_object() {
        return Err(CliError::Usage(format!("config {}: expected a JSON object", path.display())));
    }
    Ok(v)
}

/// Resolves the full configuration of one command.
pub fn resolve(command: &str, file: Option<&Path>, flags: Overrides) -> CliResult<RunConfig> {
    let file_value = file.map(read_file).transpose()?;
    let preset = flags
        .preset
        .or_else(|| {
            file_value
                .as_ref()
                .and_then(|v| v.get("preset"))
                .and_then(|p| serde_json::from_value(p.clone()).ok())
        })
        .unwrap_or(Preset::Full);

    let mut value = serde_json::to_value(RunConfig::for_preset(preset))?;
    if let Some(v) = file_value {
        merge(&mut value, v);
    }
    let mut cfg: RunConfig =
        serde_json::from_value(value).map_err(|e| CliError::Usage(format!("config: {e}")))?;

    cfg.command = command.to_string();
    cfg.preset = preset;
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(m) = flags.mask {
        cfg.mask = m.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
    }
    if let Some(e) = flags.max_epochs {
        cfg.train.max_epochs = e;
    }
    if flags.manifest.is_some() {
        cfg.manifest = flags.manifest;
    }
    if flags.out.is_some() {
        cfg.out = flags.out;
    }
    if flags.model_path.is_some() {
        cfg.model_path = flags.model_path;
    }
    if let Some(t) = flags.threshold {
        cfg.threshold = t;
    }
    if let Some(k) = flags.k {
        cfg.k = k;
    }

    let dropped = ColumnMask::parse_dropped(&cfg.mask.join(","))?;
    for (m, d) in cfg.model.column_mask.0.iter_mut().zip(dropped.0) {
        *m &= d;
    }
    cfg.mask = cfg.model.column_mask.dropped_names();
    cfg.train.seed = cfg.seed;
    cfg.model.validate()?;
    cfg.train.validate()?;
    if !(0.0..=1.0).contains(&cfg.threshold) {
        return Err(CliError::Usage(format!("threshold {} outside [0, 1]", cfg.threshold)));
    }
    Ok(cfg)
}
