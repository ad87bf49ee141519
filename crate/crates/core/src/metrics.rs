//! Voxel confusion counts and overlap metrics.

use serde::{Deserialize, Serialize};

use crate::data::SegMask;
use crate::error::{data_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub dsc: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

pub fn confusion(pred: &SegMask, gt: &SegMask) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(data_err(format!("prediction {:?} and ground truth {:?} differ in shape", pred.shape(), gt.shape())));
    }
    pred.check_binary()?;
    gt.check_binary()?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// `num / den`, with `0 / 0` scored 1 when both masks are empty and 0
/// otherwise.
fn ratio(num: u64, den: u64, both_empty: bool) -> f64 {
    if den == 0 {
        if both_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let empty = c.tp + c.fp + c.fn_ == 0;
    Metrics {
        dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, empty),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_, empty),
        precision: ratio(c.tp, c.tp + c.fp, empty),
        recall: ratio(c.tp, c.tp + c.fn_, empty),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub id: String,
    #[serde(flatten)]
    pub metrics: Metrics,
    #[serde(flatten)]
    pub counts: ConfusionCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
    /// Per-case mean of each metric.
    pub mean: Metrics,
}

pub fn evaluate_cases(pairs: &[(String, &SegMask, &SegMask)]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(data_err("no cases to evaluate"));
    }
    let cases = pairs
        .iter()
        .map(|(id, pred, gt)| {
            let counts = confusion(pred, gt)?;
            Ok(CaseMetrics { id: id.clone(), metrics: metrics(&counts), counts })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport { mean: mean_metrics(cases.iter().map(|c| &c.metrics)), cases })
}

pub fn mean_metrics<'a>(items: impl IntoIterator<Item = &'a Metrics>) -> Metrics {
    let mut sum = [0.0; 4];
    let mut n = 0usize;
    for m in items {
        for (s, v) in sum.iter_mut().zip([m.dsc, m.iou, m.precision, m.recall]) {
            *s += v;
        }
        n += 1;
    }
    let n = n.max(1) as f64;
    Metrics { dsc: sum[0] / n, iou: sum[1] / n, precision: sum[2] / n, recall: sum[3] / n }
}
