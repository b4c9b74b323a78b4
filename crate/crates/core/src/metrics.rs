//! Regression scores and cross-dataset summaries.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("prediction length {pred} does not match target length {target}")]
    LengthMismatch { target: usize, pred: usize },
    #[error("targets are constant, R² is undefined")]
    ConstantTarget,
    #[error("cannot aggregate an empty score list")]
    Empty,
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r2(y: &[f64], y_hat: &[f64]) -> Result<f64, MetricError> {
    if y.len() != y_hat.len() {
        return Err(MetricError::LengthMismatch { target: y.len(), pred: y_hat.len() });
    }
    if y.len() < 2 {
        return Err(MetricError::TooFewSamples(y.len()));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(MetricError::ConstantTarget);
    }
    let ss_res: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Normalized Nash-Sutcliffe efficiency, `1 / (2 - r2)`, mapping `(-inf, 1]` onto `(0, 1]`.
pub fn nnse(r2: f64) -> f64 {
    1.0 / (2.0 - r2)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard deviation with `n - ddof` in the denominator; zero when undefined.
pub fn std_dev(xs: &[f64], ddof: usize) -> f64 {
    if xs.len() <= ddof {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - ddof) as f64).sqrt()
}

/// Quantile by linear interpolation between order statistics.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// Per-seed R² values of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub dataset: String,
    pub r2: Vec<f64>,
}

impl DatasetScore {
    pub fn new(dataset: impl Into<String>, r2: Vec<f64>) -> Self {
        DatasetScore { dataset: dataset.into(), r2 }
    }

    pub fn mean(&self) -> f64 {
        mean(&self.r2)
    }

    /// Sample standard deviation over seeds.
    pub fn std(&self) -> f64 {
        std_dev(&self.r2, 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub iqr: f64,
    pub mean: f64,
    /// Population standard deviation over dataset means.
    pub std: f64,
}

/// Central tendency and spread of the per-dataset mean scores.
pub fn aggregate(scores: &[DatasetScore]) -> Result<Summary, MetricError> {
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    let means: Vec<f64> = scores.iter().map(DatasetScore::mean).collect();
    Ok(Summary {
        median: quantile(&means, 0.5),
        iqr: quantile(&means, 0.75) - quantile(&means, 0.25),
        mean: mean(&means),
        std: std_dev(&means, 0),
    })
}

/// Plain-text table of per-dataset scores followed by the summary row.
pub struct Report<'a> {
    pub model: &'a str,
    pub scores: &'a [DatasetScore],
}

impl fmt::Display for Report<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<32} {:>10} {:>10} {:>6}", "dataset", "mean_r2", "std_r2", "seeds")?;
        for s in self.scores {
            writeln!(f, "{:<32} {:>10.4} {:>10.4} {:>6}", s.dataset, s.mean(), s.std(), s.r2.len())?;
        }
        writeln!(f)?;
        writeln!(f, "{:<16} {:>10} {:>10} {:>10} {:>10}", "model", "median", "iqr", "mean", "std")?;
        match aggregate(self.scores) {
            Ok(s) => writeln!(f, "{:<16} {:>10.4} {:>10.4} {:>10.4} {:>10.4}", self.model, s.median, s.iqr, s.mean, s.std),
            Err(e) => writeln!(f, "{:<16} {e}", self.model),
        }
    }
}
