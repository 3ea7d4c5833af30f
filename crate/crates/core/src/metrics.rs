//! Masked RMSE / MAE / MAPE.
//!
//! NaN ground-truth entries are dropped from every metric. MAPE additionally
//! drops entries with `|y| < ε` and is reported in percent; when no entry
//! survives that mask it is `None` rather than a misleading zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// Near-zero threshold for the MAPE index set.
pub const MAPE_EPSILON: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction has {pred} entries, ground truth has {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("prediction shape {pred:?} differs from ground truth {truth:?}")]
    ShapeMismatch { pred: Vec<usize>, truth: Vec<usize> },
    #[error("prediction entry {0} is not finite")]
    NonFinitePrediction(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// NaN when no ground-truth entry is valid.
    pub rmse: f64,
    pub mae: f64,
    pub mape_percent: Option<f64>,
    /// Entries excluded because the ground truth is NaN.
    pub masked_count: usize,
    pub total_count: usize,
    /// Size of the MAPE index set.
    pub mape_count: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_node: Option<PerNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerNode {
    pub rmse: Vec<f64>,
    pub mae: Vec<f64>,
    pub mape_percent: Vec<Option<f64>>,
}

impl MetricReport {
    pub fn valid_count(&self) -> usize {
        self.total_count - self.masked_count
    }
}

#[derive(Default)]
struct Accumulator {
    sq: f64,
    abs: f64,
    pct: f64,
    valid: usize,
    mape: usize,
    total: usize,
}

impl Accumulator {
    fn push(&mut self, pred: f64, truth: f64) {
        self.total += 1;
        if truth.is_nan() {
            return;
        }
        let err = truth - pred;
        self.valid += 1;
        self.sq += err * err;
        self.abs += err.abs();
        if truth.abs() >= MAPE_EPSILON {
            self.mape += 1;
            self.pct += (err / truth).abs();
        }
    }

    fn finish(self) -> MetricReport {
        let n = self.valid as f64;
        MetricReport {
            rmse: if self.valid == 0 { f64::NAN } else { (self.sq / n).sqrt() },
            mae: if self.valid == 0 { f64::NAN } else { self.abs / n },
            mape_percent: (self.mape > 0).then(|| 100.0 * self.pct / self.mape as f64),
            masked_count: self.total - self.valid,
            total_count: self.total,
            mape_count: self.mape,
            per_node: None,
        }
    }
}

fn check_finite(pred: &[f64]) -> Result<(), MetricsError> {
    match pred.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(MetricsError::NonFinitePrediction(i)),
        None => Ok(()),
    }
}

pub fn masked_metrics(pred: &[f64], truth: &[f64]) -> Result<MetricReport, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    check_finite(pred)?;
    let mut acc = Accumulator::default();
    for (&p, &t) in pred.iter().zip(truth) {
        acc.push(p, t);
    }
    Ok(acc.finish())
}

/// One report per node over all batch and horizon entries of `B×H'×N` tensors.
pub fn per_node_metrics(pred: &Tensor, truth: &Tensor) -> Result<Vec<MetricReport>, MetricsError> {
    if pred.shape() != truth.shape() || pred.rank() == 0 {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.shape().to_vec(),
            truth: truth.shape().to_vec(),
        });
    }
    check_finite(pred.data())?;
    let n = *pred.shape().last().unwrap();
    let mut accs: Vec<Accumulator> = (0..n).map(|_| Accumulator::default()).collect();
    for (i, (&p, &t)) in pred.data().iter().zip(truth.data()).enumerate() {
        accs[i % n].push(p, t);
    }
    Ok(accs.into_iter().map(Accumulator::finish).collect())
}

/// Aggregate report over all entries plus the per-node breakdown.
pub fn report_with_nodes(pred: &Tensor, truth: &Tensor) -> Result<MetricReport, MetricsError> {
    let nodes = per_node_metrics(pred, truth)?;
    let mut report = masked_metrics(pred.data(), truth.data())?;
    report.per_node = Some(PerNode {
        rmse: nodes.iter().map(|r| r.rmse).collect(),
        mae: nodes.iter().map(|r| r.mae).collect(),
        mape_percent: nodes.iter().map(|r| r.mape_percent).collect(),
    });
    Ok(report)
}
