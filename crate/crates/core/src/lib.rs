//! Hallucination detection from token-level top-20 log-probability traces.
//!
//! The pipeline: [`trace`] loads labeled responses, [`features`] turns each
//! decoding step into a 25-vector of uncertainty statistics plus the raw
//! log-probs, [`model`] is the bidirectional-GRU classifier with top-q pooling,
//! [`training`] fits it, [`baselines`] and [`metrics`] evaluate it, and
//! [`synth`] provides synthetic calibration-bias emulators for desk-scale
//! experiments.

pub mod baselines;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod seeds;
pub mod synth;
pub mod trace;
pub mod training;

pub use error::{ErrorKind, HaltError, Result};
pub use features::{featurize, ColumnMask, FeatureSequence, FEATURE_DIM};
pub use model::{Batch, HaltConfig, HaltModel, Mode};
pub use trace::{load_traces, DatasetManifest, LogProbStep, ResponseTrace};
pub use training::{train, TrainConfig};
