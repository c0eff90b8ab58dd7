//! Adaptive class-balanced pseudo labeling.
//!
//! Background pixels of the current task may hide old classes. For each old
//! class the client ranks the current model's pixel entropies over every
//! pixel the old model assigns to that class, and keeps the most confident
//! fraction `rho` of them as pseudo labels. `rho` grows with training.

use serde::{Deserialize, Serialize};

use crate::error::{FissError, Result};
use crate::model::{ModelParams, ProbMap, PROB_FLOOR};
use crate::synth_data::{ClassId, Image, LabelMap};

/// Shannon entropy `-sum p ln p` with the probability floor inside the log.
pub fn entropy(p: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|v| **v > 0.0)
        .map(|&v| -v * v.max(PROB_FLOOR).ln())
        .sum();
    h.max(0.0)
}

pub fn entropy_map(probs: &ProbMap) -> Vec<f64> {
    (0..probs.num_pixels())
        .map(|j| entropy(probs.pixel(j)))
        .collect()
}

/// Linear growth of the selection proportion per local epoch, capped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RhoSchedule {
    pub init: f64,
    pub step: f64,
    pub max: f64,
}

impl Default for RhoSchedule {
    fn default() -> Self {
        Self {
            init: 0.2,
            step: 0.1,
            max: 0.8,
        }
    }
}

impl RhoSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        let raw = self.init + self.step * epoch as f64;
        // snap to 1e-9 so decimal schedules land on their literal values
        ((raw * 1e9).round() / 1e9).min(self.max)
    }
}

/// `min(0.2 + 0.1 * epoch, 0.8)`.
pub fn rho_schedule(epoch: usize) -> f64 {
    RhoSchedule::default().at(epoch)
}

/// Entropy threshold per old class `1..=K^o`; `None` when the old model
/// predicted the class nowhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub gammas: Vec<Option<f64>>,
}

impl ThresholdTable {
    pub fn num_old(&self) -> usize {
        self.gammas.len()
    }

    pub fn get(&self, class: ClassId) -> Option<f64> {
        if class == 0 {
            return None;
        }
        self.gammas.get(class as usize - 1).copied().flatten()
    }
}

/// Quantile index used by the threshold search.
pub fn quantile_index(len: usize, rho: f64) -> usize {
    (((len as f64) * rho + 1e-9).floor() as usize).min(len.saturating_sub(1))
}

/// Threshold search over precomputed maps: `entropies[i]` from the current
/// model and `old_argmax[i]` from the old model, for every sample `i`.
/// Pixels are gathered per class in sample order, then sorted ascending.
pub fn compute_thresholds_from_maps(
    entropies: &[Vec<f64>],
    old_argmax: &[LabelMap],
    num_old: usize,
    rho: f64,
) -> Result<ThresholdTable> {
    if entropies.is_empty() {
        return Err(FissError::config(
            "dataset",
            "threshold search needs at least one sample",
        ));
    }
    if entropies.len() != old_argmax.len() {
        return Err(FissError::shape("entropy and argmax maps are not paired"));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(FissError::config(
            "rho",
            format!("must lie in (0, 1], got {rho}"),
        ));
    }
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); num_old];
    for (h, labels) in entropies.iter().zip(old_argmax) {
        if h.len() != labels.data.len() {
            return Err(FissError::shape(
                "entropy map and argmax map differ in size",
            ));
        }
        for (&value, &k) in h.iter().zip(&labels.data) {
            if k >= 1 && (k as usize) <= num_old {
                per_class[k as usize - 1].push(value);
            }
        }
    }
    let gammas = per_class
        .into_iter()
        .map(|mut values| {
            if values.is_empty() {
                return None;
            }
            values.sort_by(f64::total_cmp);
            Some(values[quantile_index(values.len(), rho)])
        })
        .collect();
    Ok(ThresholdTable { gammas })
}

/// Runs both models over `images` and searches thresholds for every class
/// of the old model.
pub fn compute_thresholds(
    images: &[&Image],
    old_model: &ModelParams,
    current_model: &ModelParams,
    rho: f64,
) -> Result<ThresholdTable> {
    if images.is_empty() {
        return Err(FissError::config(
            "dataset",
            "threshold search needs at least one sample",
        ));
    }
    let mut entropies = Vec::with_capacity(images.len());
    let mut argmaxes = Vec::with_capacity(images.len());
    for image in images {
        entropies.push(entropy_map(&current_model.forward(image)?.probs));
        argmaxes.push(old_model.forward(image)?.probs.argmax_map());
    }
    compute_thresholds_from_maps(&entropies, &argmaxes, old_model.num_classes() - 1, rho)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    /// Foreground training label kept as is.
    KeptGroundTruth,
    /// Background pixel relabeled with the old model's class.
    PseudoOld,
    Background,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelMap {
    pub labels: LabelMap,
    pub provenance: Vec<Provenance>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceCounts {
    pub kept: usize,
    pub pseudo_old: usize,
    pub background: usize,
}

impl PseudoLabelMap {
    pub fn counts(&self) -> ProvenanceCounts {
        let mut c = ProvenanceCounts::default();
        for p in &self.provenance {
            match p {
                Provenance::KeptGroundTruth => c.kept += 1,
                Provenance::PseudoOld => c.pseudo_old += 1,
                Provenance::Background => c.background += 1,
            }
        }
        c
    }
}

impl std::ops::AddAssign for ProvenanceCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.kept += rhs.kept;
        self.pseudo_old += rhs.pseudo_old;
        self.background += rhs.background;
    }
}

fn build_map(
    train_label: &LabelMap,
    old_probs: &ProbMap,
    mut select: impl FnMut(usize, ClassId) -> bool,
) -> Result<PseudoLabelMap> {
    if train_label.data.len() != old_probs.num_pixels() {
        return Err(FissError::shape(
            "training labels and old probabilities differ in size",
        ));
    }
    let mut labels = Vec::with_capacity(train_label.data.len());
    let mut provenance = Vec::with_capacity(train_label.data.len());
    for (j, &y) in train_label.data.iter().enumerate() {
        if y != 0 {
            labels.push(y);
            provenance.push(Provenance::KeptGroundTruth);
            continue;
        }
        let k = old_probs.argmax(j);
        if k != 0 && select(j, k) {
            labels.push(k);
            provenance.push(Provenance::PseudoOld);
        } else {
            labels.push(0);
            provenance.push(Provenance::Background);
        }
    }
    Ok(PseudoLabelMap {
        labels: LabelMap {
            grid: train_label.grid,
            data: labels,
        },
        provenance,
    })
}

/// Three-way relabeling: keep foreground labels; give a background pixel the
/// old model's class `k` when the current model's entropy there is at most
/// `gamma_k`; otherwise background. Classes without a threshold never
/// produce pseudo labels.
pub fn generate_pseudo_labels(
    train_label: &LabelMap,
    old_probs: &ProbMap,
    current_probs: &ProbMap,
    thresholds: &ThresholdTable,
) -> Result<PseudoLabelMap> {
    if current_probs.num_pixels() != old_probs.num_pixels() {
        return Err(FissError::shape(
            "old and current probability maps differ in size",
        ));
    }
    build_map(train_label, old_probs, |j, k| match thresholds.get(k) {
        Some(gamma) => entropy(current_probs.pixel(j)) <= gamma,
        None => false,
    })
}

/// Fixed-confidence variant: a background pixel takes the old model's class
/// when that class's old probability reaches `threshold`.
pub fn constant_threshold_pseudo_labels(
    train_label: &LabelMap,
    old_probs: &ProbMap,
    threshold: f64,
) -> Result<PseudoLabelMap> {
    build_map(train_label, old_probs, |j, k| {
        old_probs.pixel(j)[k as usize] >= threshold
    })
}
