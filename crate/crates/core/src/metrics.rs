//! Confusion matrices and intersection-over-union scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[gt][pred]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_count: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> Self {
        Self {
            class_count,
            counts: vec![vec![0; class_count]; class_count],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.class_count != self.class_count {
            return Err(Error::invalid("confusion matrices differ in class count"));
        }
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in row.iter_mut().zip(orow) {
                *a += b;
            }
        }
        Ok(())
    }
}

pub fn confusion(pred: &[u32], gt: &[u32], class_count: usize) -> Result<ConfusionMatrix> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground-truth labels",
            pred.len(),
            gt.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(class_count);
    for (&p, &g) in pred.iter().zip(gt) {
        if p as usize >= class_count || g as usize >= class_count {
            return Err(Error::invalid(format!("label pair ({g}, {p}) outside {class_count} classes")));
        }
        cm.counts[g as usize][p as usize] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouScores {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn iou_scores(cm: &ConfusionMatrix) -> IouScores {
    let n = cm.class_count;
    let per_class: Vec<Option<f64>> = (0..n)
        .map(|c| {
            let tp = cm.counts[c][c];
            let fp = (0..n).map(|r| cm.counts[r][c]).sum::<u64>() - tp;
            let fn_ = cm.counts[c].iter().sum::<u64>() - tp;
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    IouScores { per_class, miou }
}
