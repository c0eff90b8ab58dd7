//! Forgetting-balanced losses.
//!
//! Every pixel gets a gradient scalar `p_y - 1` for its (pseudo) label `y`.
//! Old-class scalars are softened by an exponent that depends on how many
//! old versus new classes the client holds, then compared with the mean
//! scalar of the pixel's group (background, or the task that introduced
//! `y`). The ratio reweights the cross-entropy (semantic compensation) and,
//! aggregated per class, the prototype KL term (relation consistency).
//!
//! All statistics are batch-scoped and treated as constants when
//! differentiating.

mod objective;

pub use objective::{
    total_objective, BatchItem, FrozenTerms, LossBreakdown, ObjectiveEval, ObjectiveSpec,
    OldOutputs, PseudoLabeling, WEIGHT_BINS,
};

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{FissError, Result};
use crate::model::{ModelShape, ProbMap, PROB_FLOOR};
use crate::synth_data::{ClassId, LabelMap};

fn check_aligned(probs: &ProbMap, labels: &LabelMap) -> Result<()> {
    if probs.num_pixels() != labels.data.len() {
        return Err(FissError::shape(
            "probability map and label map differ in size",
        ));
    }
    Ok(())
}

fn check_label(label: ClassId, classes: usize) -> Result<()> {
    if label as usize >= classes {
        return Err(FissError::Data(format!(
            "label {label} outside the {classes}-class output space"
        )));
    }
    Ok(())
}

/// `-ln p` with the probability floor.
pub fn cross_entropy(p_label: f64) -> f64 {
    -p_label.max(PROB_FLOOR).ln()
}

/// Pixel-summed cross-entropy, averaged over the batch.
pub fn seg_loss(probs: &[ProbMap], labels: &[LabelMap]) -> Result<f64> {
    let ones: Vec<Vec<f64>> = labels.iter().map(|l| vec![1.0; l.data.len()]).collect();
    weighted_ce(probs, labels, &ones)
}

fn weighted_ce(probs: &[ProbMap], labels: &[LabelMap], weights: &[Vec<f64>]) -> Result<f64> {
    if probs.len() != labels.len() || probs.len() != weights.len() {
        return Err(FissError::shape("batch members differ in length"));
    }
    if probs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ((p, l), w) in probs.iter().zip(labels).zip(weights) {
        check_aligned(p, l)?;
        for (j, &y) in l.data.iter().enumerate() {
            check_label(y, p.classes)?;
            total += w[j] * cross_entropy(p.pixel(j)[y as usize]);
        }
    }
    Ok(total / probs.len() as f64)
}

/// Raw gradient scalar of a pixel whose label has probability `p`.
pub fn gradient_scalar(p: f64) -> f64 {
    p - 1.0
}

/// Class-count-aware magnitude of a raw scalar. Old classes are
/// `1..=num_old`; their magnitude is raised to `K_o / (K_o + K_t)`.
pub fn adaptive_gradient_scalar(
    gamma: f64,
    pixel_class: ClassId,
    num_old: usize,
    local_old: usize,
    local_new: usize,
) -> f64 {
    let magnitude = gamma.abs();
    let is_old = pixel_class != 0 && (pixel_class as usize) <= num_old;
    if !is_old {
        return magnitude;
    }
    let exponent = if local_old == 0 {
        0.0
    } else {
        local_old as f64 / (local_old + local_new) as f64
    };
    magnitude.powf(exponent)
}

/// Running sum and count of one pixel group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct GroupMean {
    pub sum: f64,
    pub count: usize,
}

impl GroupMean {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    /// `None` when the group is empty.
    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Batch means of the adaptive scalars per background, task and class.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientStats {
    pub background: GroupMean,
    /// Index `eta - 1` for task `eta`.
    pub tasks: Vec<GroupMean>,
    /// Indexed by class id; entry 0 mirrors `background`.
    pub classes: Vec<GroupMean>,
}

impl GradientStats {
    pub fn background_mean(&self) -> Option<f64> {
        self.background.mean()
    }

    pub fn task_mean(&self, task: usize) -> Option<f64> {
        task.checked_sub(1)
            .and_then(|i| self.tasks.get(i))
            .and_then(GroupMean::mean)
    }

    pub fn class_mean(&self, class: ClassId) -> Option<f64> {
        self.classes.get(class as usize).and_then(GroupMean::mean)
    }

    /// Mean of the group a pixel labeled `class` belongs to.
    pub fn group_mean(&self, class: ClassId, shape: &ModelShape) -> Option<f64> {
        if class == 0 {
            self.background_mean()
        } else {
            shape.task_of_class(class).and_then(|t| self.task_mean(t))
        }
    }
}

/// Groups adaptive scalars by pseudo label. Tasks follow the head layout in
/// `shape`.
pub fn gradient_means(
    scalars: &[Vec<f64>],
    labels: &[LabelMap],
    shape: &ModelShape,
) -> Result<GradientStats> {
    if scalars.len() != labels.len() {
        return Err(FissError::shape("scalars and labels differ in batch size"));
    }
    let outputs = shape.num_outputs();
    let mut stats = GradientStats {
        background: GroupMean::default(),
        tasks: vec![GroupMean::default(); shape.version()],
        classes: vec![GroupMean::default(); outputs],
    };
    for (s, l) in scalars.iter().zip(labels) {
        if s.len() != l.data.len() {
            return Err(FissError::shape("scalars and labels differ in pixel count"));
        }
        for (&v, &y) in s.iter().zip(&l.data) {
            check_label(y, outputs)?;
            stats.classes[y as usize].add(v);
            match shape.task_of_class(y) {
                None => stats.background.add(v),
                Some(t) => stats.tasks[t - 1].add(v),
            }
        }
    }
    Ok(stats)
}

/// `numerator / denominator`, or 1 when the denominator is missing or zero.
fn ratio_or_one(numerator: f64, denominator: Option<f64>) -> f64 {
    match denominator {
        Some(d) if d > 0.0 => numerator / d,
        _ => 1.0,
    }
}

/// Per-pixel semantic compensation weights for one image.
pub fn fs_weights(
    scalars: &[f64],
    labels: &LabelMap,
    stats: &GradientStats,
    shape: &ModelShape,
) -> Vec<f64> {
    scalars
        .iter()
        .zip(&labels.data)
        .map(|(&s, &y)| ratio_or_one(s, stats.group_mean(y, shape)))
        .collect()
}

/// Cross-entropy on pseudo labels with each pixel weighted by its scalar
/// relative to its group mean.
pub fn fs_loss(
    probs: &[ProbMap],
    labels: &[LabelMap],
    scalars: &[Vec<f64>],
    stats: &GradientStats,
    shape: &ModelShape,
) -> Result<f64> {
    if scalars.len() != labels.len() {
        return Err(FissError::shape("scalars and labels differ in batch size"));
    }
    let weights: Vec<Vec<f64>> = scalars
        .iter()
        .zip(labels)
        .map(|(s, l)| fs_weights(s, l, stats, shape))
        .collect();
    weighted_ce(probs, labels, &weights)
}

/// Soft target for one pixel: the old model's distribution over background
/// and old classes, plus the one-hot entry of a new-class label, normalized.
pub fn relationship_label(
    pseudo_label: ClassId,
    old_probs: &[f64],
    total_classes: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; total_classes];
    out[..old_probs.len()].copy_from_slice(old_probs);
    if (pseudo_label as usize) >= old_probs.len() {
        out[pseudo_label as usize] = 1.0;
    }
    let sum: f64 = out.iter().sum();
    if sum > 0.0 {
        out.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    /// Mean current-model distribution over the class's pixels.
    pub prob: Vec<f64>,
    /// Mean relationship label over the same pixels.
    pub label: Vec<f64>,
    pub count: usize,
}

/// Foreground classes that own at least one pixel in the batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RelationshipPrototypes {
    pub classes: BTreeMap<ClassId, Prototype>,
}

/// `relationship_labels[i]` is laid out like `probs[i].data`.
pub fn class_prototypes(
    probs: &[ProbMap],
    relationship_labels: &[Vec<f64>],
    labels: &[LabelMap],
) -> Result<RelationshipPrototypes> {
    if probs.len() != labels.len() || probs.len() != relationship_labels.len() {
        return Err(FissError::shape("batch members differ in length"));
    }
    let mut out = RelationshipPrototypes::default();
    for ((p, r), l) in probs.iter().zip(relationship_labels).zip(labels) {
        check_aligned(p, l)?;
        if r.len() != p.data.len() {
            return Err(FissError::shape(
                "relationship labels differ in size from probabilities",
            ));
        }
        let c = p.classes;
        for (j, &y) in l.data.iter().enumerate() {
            if y == 0 {
                continue;
            }
            check_label(y, c)?;
            let entry = out.classes.entry(y).or_insert_with(|| Prototype {
                prob: vec![0.0; c],
                label: vec![0.0; c],
                count: 0,
            });
            for (acc, v) in entry.prob.iter_mut().zip(p.pixel(j)) {
                *acc += v;
            }
            for (acc, v) in entry.label.iter_mut().zip(&r[j * c..(j + 1) * c]) {
                *acc += v;
            }
            entry.count += 1;
        }
    }
    for proto in out.classes.values_mut() {
        let z = proto.count as f64;
        proto.prob.iter_mut().for_each(|v| *v /= z);
        let sum: f64 = proto.label.iter().sum();
        if sum > 0.0 {
            proto.label.iter_mut().for_each(|v| *v /= sum);
        }
    }
    Ok(out)
}

fn floored_distribution(v: &[f64]) -> Vec<f64> {
    let floored: Vec<f64> = v.iter().map(|x| x.max(PROB_FLOOR)).collect();
    let sum: f64 = floored.iter().sum();
    floored.into_iter().map(|x| x / sum).collect()
}

/// `KL(p || q)` after flooring and renormalizing both arguments.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let p = floored_distribution(p);
    let q = floored_distribution(q);
    p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum()
}

/// Class weight of the relation term: class mean over its task's mean.
pub fn fr_class_weight(class: ClassId, stats: &GradientStats, shape: &ModelShape) -> f64 {
    match stats.class_mean(class) {
        Some(g) => ratio_or_one(g, stats.group_mean(class, shape)),
        None => 1.0,
    }
}

/// Weighted prototype KL summed over present classes, divided by the number
/// of foreground classes in the head.
pub fn fr_loss(
    prototypes: &RelationshipPrototypes,
    stats: &GradientStats,
    shape: &ModelShape,
) -> f64 {
    let k = shape.num_foreground().max(1) as f64;
    prototypes
        .classes
        .iter()
        .map(|(&c, p)| fr_class_weight(c, stats, shape) * kl_divergence(&p.prob, &p.label))
        .sum::<f64>()
        / k
}
