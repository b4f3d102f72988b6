//! Gradient x input attribution.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use super::{network, Batch, HaltModel};
use crate::error::Result;
use crate::features::{column_names, FEATURE_DIM};

/// Summed `|dloss/dx * x|` over unmasked positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    /// Raw per-column totals (summed over batch and time).
    pub feature_totals: [f64; FEATURE_DIM],
    /// Raw per-timestep totals (summed over batch and features).
    pub per_time: Vec<f64>,
}

impl Attribution {
    pub fn empty() -> Self {
        Attribution {
            feature_totals: [0.0; FEATURE_DIM],
            per_time: Vec::new(),
        }
    }

    /// Per-column importances normalized to sum to one (all zero if nothing
    /// contributed).
    pub fn per_feature(&self) -> [f64; FEATURE_DIM] {
        let total: f64 = self.feature_totals.iter().sum();
        if total == 0.0 {
            return [0.0; FEATURE_DIM];
        }
        self.feature_totals.map(|v| v / total)
    }

    pub fn merge(&mut self, other: &Attribution) {
        for (a, b) in self.feature_totals.iter_mut().zip(other.feature_totals.iter()) {
            *a += b;
        }
        if self.per_time.len() < other.per_time.len() {
            self.per_time.resize(other.per_time.len(), 0.0);
        }
        for (a, b) in self.per_time.iter_mut().zip(other.per_time.iter()) {
            *a += b;
        }
    }

    pub fn to_report(&self) -> AttributionReport {
        AttributionReport {
            per_feature: column_names().into_iter().zip(self.per_feature()).collect(),
            per_time: self.per_time.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AttributionReport {
    pub per_feature: BTreeMap<String, f64>,
    pub per_time: Vec<f64>,
}

/// Attribution of each example's own BCE loss to its inputs, with dropout
/// disabled.
pub fn attribute(model: &HaltModel, batch: &Batch) -> Result<Attribution> {
    batch.check()?;
    let per_example: Vec<([f64; FEATURE_DIM], Vec<f64>)> = (0..batch.size())
        .into_par_iter()
        .map(|b| -> Result<_> {
            let x = batch.sequence(b);
            let len = batch.lengths[b];
            let cache = network::forward_sequence(model, x, len, None)?;
            let (_, dz) = super::bce_with_logits(cache.logit, batch.labels[b] as f64);
            let mut scratch = model.zero_grads();
            let g = network::backward_sequence(model, &cache, dz, &mut scratch);
            let mut feat = [0.0; FEATURE_DIM];
            let mut time = vec![0.0; len];
            for t in 0..len {
                for c in 0..FEATURE_DIM {
                    let v = (g[t * FEATURE_DIM + c] * x[t * FEATURE_DIM + c]).abs();
                    feat[c] += v;
                    time[t] += v;
                }
            }
            Ok((feat, time))
        })
        .collect::<Result<_>>()?;

    let mut out = Attribution {
        feature_totals: [0.0; FEATURE_DIM],
        per_time: vec![0.0; batch.max_len],
    };
    for (feat, time) in per_example {
        for (a, b) in out.feature_totals.iter_mut().zip(feat) {
            *a += b;
        }
        for (a, b) in out.per_time.iter_mut().zip(time) {
            *a += b;
        }
    }
    Ok(out)
}
