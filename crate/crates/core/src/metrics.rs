//! Evaluation metrics and the round-to-target statistic.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use core::fmt;

use thiserror::Error;

use crate::fl::RoundRecord;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("predictions ({predictions}) and labels ({labels}) differ in length")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("no values to evaluate")]
    Empty,
    #[error("class index {index} is not below {n_classes}")]
    ClassOutOfRange { index: usize, n_classes: usize },
}

fn check_lengths(predictions: &[usize], labels: &[usize]) -> Result<(), MetricError> {
    if predictions.len() != labels.len() {
        return Err(MetricError::LengthMismatch { predictions: predictions.len(), labels: labels.len() });
    }
    if labels.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, MetricError> {
    check_lengths(predictions, labels)?;
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Unweighted mean of per-class F1. A class with `P + R = 0` scores 0; a class
/// absent from both predictions and labels is left out of the mean.
pub fn macro_f1(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<f64, MetricError> {
    check_lengths(predictions, labels)?;
    let mut tp = vec![0usize; n_classes];
    let mut predicted = vec![0usize; n_classes];
    let mut actual = vec![0usize; n_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        for index in [p, l] {
            if index >= n_classes {
                return Err(MetricError::ClassOutOfRange { index, n_classes });
            }
        }
        predicted[p] += 1;
        actual[l] += 1;
        if p == l {
            tp[p] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..n_classes {
        if predicted[c] == 0 && actual[c] == 0 {
            continue;
        }
        present += 1;
        let precision = if predicted[c] > 0 { tp[c] as f64 / predicted[c] as f64 } else { 0.0 };
        let recall = if actual[c] > 0 { tp[c] as f64 / actual[c] as f64 } else { 0.0 };
        if precision + recall > 0.0 {
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(sum / present as f64)
}

/// Mean and sample standard deviation over trials.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Renders fractions as `avg. (std.)%`, e.g. `88.62 (0.51)%`.
impl fmt::Display for MetricSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ({:.2})%", 100.0 * self.mean, 100.0 * self.std)
    }
}

/// Arithmetic mean and `n - 1` standard deviation (0 for a single value).
pub fn summarize(values: &[f64]) -> Result<MetricSummary, MetricError> {
    if values.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n == 1 {
        0.0
    } else {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        libm::sqrt(ss / (n - 1) as f64)
    };
    Ok(MetricSummary { mean, std, n })
}

/// `treatment.mean - baseline.mean`.
pub fn delta_metric(baseline: &MetricSummary, treatment: &MetricSummary) -> f64 {
    treatment.mean - baseline.mean
}

/// `↓27.12 (2.11)%` style: magnitude of the delta in percentage points with
/// the treatment's standard deviation.
pub fn render_delta(baseline: &MetricSummary, treatment: &MetricSummary) -> String {
    let d = delta_metric(baseline, treatment);
    let arrow = if d < 0.0 { "↓" } else { "↑" };
    format!("{arrow}{:.2} ({:.2})%", 100.0 * d.abs(), 100.0 * treatment.std)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MetricKind {
    Accuracy,
    F1,
}

impl MetricKind {
    pub fn of(&self, r: &RoundRecord) -> f64 {
        match self {
            MetricKind::Accuracy => r.test_accuracy,
            MetricKind::F1 => r.test_macro_f1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::F1 => "macro_f1",
        }
    }
}

/// Rounds needed to reach a target, optionally against a baseline run.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RoundToTarget {
    pub target: f64,
    /// 1-based round count; `None` when the target was never reached.
    pub rounds: Option<usize>,
    pub baseline_rounds: Option<usize>,
    pub ratio: Option<f64>,
}

impl RoundToTarget {
    pub fn with_baseline(mut self, baseline_rounds: Option<usize>) -> Self {
        self.baseline_rounds = baseline_rounds;
        self.ratio = match (self.rounds, baseline_rounds) {
            (Some(r), Some(b)) if b > 0 => Some(r as f64 / b as f64),
            _ => None,
        };
        self
    }

    /// `910 (1.52×)`, `910`, or `>5000` when the target was missed within
    /// `total_rounds`.
    pub fn render(&self, total_rounds: usize) -> String {
        match (self.rounds, self.ratio) {
            (Some(r), Some(x)) => format!("{r} ({x:.2}×)"),
            (Some(r), None) => format!("{r}"),
            (None, _) => format!(">{total_rounds}"),
        }
    }
}

/// First round (1-based) whose metric reaches `target`.
pub fn round_to_target(records: &[RoundRecord], target: f64, metric: MetricKind) -> RoundToTarget {
    let rounds = records.iter().position(|r| metric.of(r) >= target).map(|i| i + 1);
    RoundToTarget { target, rounds, baseline_rounds: None, ratio: None }
}
