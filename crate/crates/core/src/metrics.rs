//! Confusion matrices, per-class IoU and mIoU.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{FissError, Result};
use crate::synth_data::LabelMap;

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, gt: &LabelMap, pred: &LabelMap) -> Result<()> {
        if gt.grid != pred.grid || gt.data.len() != pred.data.len() {
            return Err(FissError::shape(
                "ground truth and prediction differ in size",
            ));
        }
        for (&g, &p) in gt.data.iter().zip(&pred.data) {
            let (g, p) = (g as usize, p as usize);
            if g >= self.classes || p >= self.classes {
                return Err(FissError::Data(format!(
                    "label pair ({g}, {p}) outside a {}-class matrix",
                    self.classes
                )));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(FissError::shape("confusion matrices differ in class count"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)`; `None` when the class appears nowhere.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.get(class, class);
        let row: u64 = (0..self.classes).map(|p| self.get(class, p)).sum();
        let col: u64 = (0..self.classes).map(|g| self.get(g, class)).sum();
        let denom = row + col - tp;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes).map(|c| self.iou(c)).collect()
    }

    /// Mean IoU over present classes, background included.
    pub fn miou(&self) -> Result<f64> {
        mean_present(&self.per_class_iou())
    }
}

/// Mean of the present entries.
pub fn mean_present(values: &[Option<f64>]) -> Result<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(FissError::Evaluation(
            "no class present in the evaluation set".into(),
        ));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Evaluation of one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEvaluation {
    pub task: usize,
    /// Indexed by class id; `None` when absent.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
}

/// CSV rows `task,class,iou` with a `miou` summary row per task. Absent
/// classes leave the iou field empty.
pub fn write_metrics_csv<W: Write>(mut w: W, evaluations: &[TaskEvaluation]) -> Result<()> {
    writeln!(w, "task,class,iou")?;
    for e in evaluations {
        for (c, v) in e.iou.iter().enumerate() {
            match v {
                Some(v) => writeln!(w, "{},{},{:.6}", e.task, c, v)?,
                None => writeln!(w, "{},{},", e.task, c)?,
            }
        }
        writeln!(w, "{},miou,{:.6}", e.task, e.miou)?;
    }
    Ok(())
}
