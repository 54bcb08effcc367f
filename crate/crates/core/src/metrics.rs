//! Forecast error metrics: masked MAE / RMSE / MAPE, reported per forecast
//! step and pooled over the horizon.

use crate::error::{CoreError, Result};
use crate::io::MetricsRow;
use crate::tensor::Tensor;

/// Targets below this magnitude are excluded from MAPE so near-zero flows
/// cannot blow up the percentage.
pub const MAPE_FLOOR: f64 = 1.0;

/// The forecast steps (1-based) broken out in reports: 15, 30, 60 minutes.
pub const REPORT_HORIZONS: [usize; 3] = [3, 6, 12];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValues {
    pub mae: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
}

/// Streaming error sums; masked entries never enter.
#[derive(Debug, Clone, Copy, Default)]
pub struct Accumulator {
    abs_sum: f64,
    sq_sum: f64,
    count: usize,
    ape_sum: f64,
    ape_count: usize,
}

impl Accumulator {
    pub fn push(&mut self, pred: f64, target: f64) {
        if !target.is_finite() {
            return;
        }
        let err = pred - target;
        self.abs_sum += err.abs();
        self.sq_sum += err * err;
        self.count += 1;
        if target.abs() >= MAPE_FLOOR {
            self.ape_sum += (err / target).abs();
            self.ape_count += 1;
        }
    }

    pub fn merge(&mut self, other: &Accumulator) {
        self.abs_sum += other.abs_sum;
        self.sq_sum += other.sq_sum;
        self.count += other.count;
        self.ape_sum += other.ape_sum;
        self.ape_count += other.ape_count;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// `None` when nothing was accumulated.
    pub fn finish(&self) -> Option<MetricValues> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        Some(MetricValues {
            mae: self.abs_sum / n,
            rmse: (self.sq_sum / n).sqrt(),
            mape: if self.ape_count == 0 {
                0.0
            } else {
                100.0 * self.ape_sum / self.ape_count as f64
            },
        })
    }
}

/// One-shot metrics over paired slices; non-finite targets are skipped.
pub fn compute(preds: &[f64], targets: &[f64]) -> Option<MetricValues> {
    let mut acc = Accumulator::default();
    for (&p, &t) in preds.iter().zip(targets) {
        acc.push(p, t);
    }
    acc.finish()
}

/// Per-forecast-step error accumulation over many windows.
#[derive(Debug, Clone)]
pub struct HorizonAccumulator {
    per_step: Vec<Accumulator>,
}

impl HorizonAccumulator {
    pub fn new(t_p: usize) -> Self {
        HorizonAccumulator {
            per_step: vec![Accumulator::default(); t_p],
        }
    }

    pub fn t_p(&self) -> usize {
        self.per_step.len()
    }

    /// Adds one window of time-major `[T_p·N × 1]` predictions and targets.
    pub fn add_window(&mut self, pred: &Tensor, target: &Tensor) -> Result<()> {
        let t_p = self.per_step.len();
        if pred.shape() != target.shape() || pred.shape()[0] % t_p != 0 {
            return Err(CoreError::shape(
                "metrics",
                format!(
                    "window {:?} vs target {:?} with T_p = {t_p}",
                    pred.shape(),
                    target.shape()
                ),
            ));
        }
        let n = pred.shape()[0] / t_p;
        for (tau, acc) in self.per_step.iter_mut().enumerate() {
            for j in 0..n {
                let r = tau * n + j;
                acc.push(pred.data()[r], target.data()[r]);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &HorizonAccumulator) {
        for (a, b) in self.per_step.iter_mut().zip(&other.per_step) {
            a.merge(b);
        }
    }

    /// Metrics at a 1-based forecast step.
    pub fn step(&self, step: usize) -> Option<MetricValues> {
        self.per_step.get(step.checked_sub(1)?)?.finish()
    }

    /// Metrics pooled over every step of the horizon.
    pub fn pooled(&self) -> Option<MetricValues> {
        let mut all = Accumulator::default();
        for acc in &self.per_step {
            all.merge(acc);
        }
        all.finish()
    }

    /// Report rows: one per breakout step that exists, then the pooled
    /// average.
    pub fn rows(&self, variant: &str) -> Vec<MetricsRow> {
        let mut out = Vec::new();
        for h in REPORT_HORIZONS {
            if h > self.t_p() {
                continue;
            }
            if let Some(v) = self.step(h) {
                out.push(MetricsRow {
                    variant: variant.to_string(),
                    horizon: h.to_string(),
                    mae: v.mae,
                    rmse: v.rmse,
                    mape: v.mape,
                });
            }
        }
        if let Some(v) = self.pooled() {
            out.push(MetricsRow {
                variant: variant.to_string(),
                horizon: "average".to_string(),
                mae: v.mae,
                rmse: v.rmse,
                mape: v.mape,
            });
        }
        out
    }
}
