use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::data::Raster;
use crate::error::{Error, Result};

/// Pixel counts of the binary confusion matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// No positive pixel in either prediction or label.
    pub fn is_degenerate(&self) -> bool {
        self.tp == 0 && self.fp == 0 && self.fn_ == 0
    }

    pub fn f1_iou(&self) -> (f64, f64) {
        f1_iou(self)
    }
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: ConfusionCounts) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = ConfusionCounts>>(iter: I) -> Self {
        iter.fold(ConfusionCounts::default(), Add::add)
    }
}

/// Binarises `pred` at `threshold` (values `>= threshold` are positive) and
/// counts agreement with `label`.
pub fn confusion(pred: &Raster, label: &Raster, threshold: f32) -> Result<ConfusionCounts> {
    if (pred.channels, pred.height, pred.width) != (label.channels, label.height, label.width) {
        return Err(Error::Argument(format!(
            "confusion: prediction {}x{}x{} and label {}x{}x{} differ",
            pred.channels, pred.height, pred.width, label.channels, label.height, label.width
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in pred.data.iter().zip(&label.data) {
        match (p >= threshold, y >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// F1 = TP / (TP + (FP + FN) / 2) and IoU = TP / (TP + FP + FN). Both are 1
/// when TP, FP and FN are all zero.
pub fn f1_iou(c: &ConfusionCounts) -> (f64, f64) {
    if c.is_degenerate() {
        return (1.0, 1.0);
    }
    let tp = c.tp as f64;
    let err = (c.fp + c.fn_) as f64;
    (tp / (tp + 0.5 * err), tp / (tp + err))
}
