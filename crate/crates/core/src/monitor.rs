//! Task-transition monitor.
//!
//! A client evaluates the global model's mean prediction entropy on its local
//! data every round. When the entropy jumps by at least `tau` over the
//! previous round, the client assumes its data now contains unseen classes:
//! it advances its task counter and keeps the previous round's global model
//! as the old model.

use serde::{Deserialize, Serialize};

use crate::error::{FissError, Result};
use crate::model::ModelParams;
use crate::pseudo_label::entropy;
use crate::synth_data::Image;

/// Default jump threshold for pixel-summed entropy.
pub const DEFAULT_TAU: f64 = 0.6;
/// Resolution at which [`DEFAULT_TAU`] was tuned; the normalized mode
/// divides it by this pixel count.
pub const REFERENCE_PIXELS: f64 = 512.0 * 512.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntropyMode {
    /// Per-sample entropy summed over pixels.
    #[default]
    Raw,
    /// Per-sample entropy averaged over pixels.
    PixelMean,
}

impl EntropyMode {
    pub fn default_tau(self) -> f64 {
        match self {
            EntropyMode::Raw => DEFAULT_TAU,
            EntropyMode::PixelMean => DEFAULT_TAU / REFERENCE_PIXELS,
        }
    }
}

/// Mean over samples of per-sample entropy.
pub fn average_entropy(model: &ModelParams, images: &[&Image], mode: EntropyMode) -> Result<f64> {
    if images.is_empty() {
        return Err(FissError::config(
            "shard",
            "average entropy needs at least one sample",
        ));
    }
    let mut total = 0.0;
    for image in images {
        let probs = model.forward(image)?.probs;
        let sum: f64 = (0..probs.num_pixels())
            .map(|j| entropy(probs.pixel(j)))
            .sum();
        total += match mode {
            EntropyMode::Raw => sum,
            EntropyMode::PixelMean => sum / probs.num_pixels() as f64,
        };
    }
    Ok(total / images.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyRecord {
    pub round: usize,
    pub task: usize,
    pub entropy: f64,
}

/// Entropies observed within the client's current task estimate.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntropyHistory {
    records: Vec<EntropyRecord>,
}

impl EntropyHistory {
    pub fn push(&mut self, record: EntropyRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.round <= last.round {
                return Err(FissError::Protocol(format!(
                    "entropy rounds must increase: {} after {}",
                    record.round, last.round
                )));
            }
        }
        if !(record.entropy >= 0.0 && record.entropy.is_finite()) {
            return Err(FissError::Data(format!(
                "invalid entropy {}",
                record.entropy
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn last(&self) -> Option<&EntropyRecord> {
        self.records.last()
    }

    pub fn records(&self) -> &[EntropyRecord] {
        &self.records
    }

    pub fn clear(&mut self) {
        self.records.clear();
    }
}

/// True when a previous entropy exists and `current` exceeds it by `tau`.
pub fn detect_transition(history: &EntropyHistory, current: f64, tau: f64) -> bool {
    history
        .last()
        .is_some_and(|prev| current - prev.entropy >= tau)
}

/// Per-client monitor bookkeeping.
#[derive(Clone, Debug, Default)]
pub struct MonitorState {
    pub task: usize,
    pub history: EntropyHistory,
    /// Global model broadcast in the previous round.
    pub previous_global: Option<ModelParams>,
    /// Old model captured at the last detected transition.
    pub snapshot: Option<ModelParams>,
    /// Local epochs trained since the last transition; drives `rho`.
    pub epochs_since_transition: usize,
    pub transitions: usize,
}

impl MonitorState {
    pub fn new(task: usize) -> Self {
        Self {
            task,
            ..Default::default()
        }
    }

    /// Keeps `model` as the previous-round broadcast for the next round.
    pub fn retain_broadcast(&mut self, model: &ModelParams) {
        self.previous_global = Some(model.clone());
    }

    /// Advances the task estimate and snapshots the previous-round model.
    pub fn on_transition(&mut self) -> Result<()> {
        let previous = self.previous_global.clone().ok_or_else(|| {
            FissError::Protocol("transition without a previous-round model".into())
        })?;
        self.snapshot = Some(previous);
        self.task += 1;
        self.transitions += 1;
        self.history.clear();
        self.epochs_since_transition = 0;
        Ok(())
    }

    /// Records this round's entropy and reacts to a jump. Returns whether a
    /// transition fired.
    ///
    /// The entropy that triggered a transition was measured under the old
    /// task estimate, so it is discarded with that task's history: the first
    /// comparison under the new estimate happens one round later.
    pub fn observe(&mut self, round: usize, entropy: f64, tau: f64) -> Result<bool> {
        let fired = detect_transition(&self.history, entropy, tau);
        self.history.push(EntropyRecord {
            round,
            task: self.task,
            entropy,
        })?;
        if fired {
            self.on_transition()?;
        }
        Ok(fired)
    }
}
