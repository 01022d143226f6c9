//! Evaluation records, communication amplitude and final-window summaries.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use super::TrainError;

/// Smoothing constant used for the amplitude curve.
pub const AMPLITUDE_EWMA_ALPHA: f64 = 5e-5;

pub const METRICS_HEADER: &str = "iteration,mean_eval_return,return_std,comm_amplitude,amplitude_ewma";

/// One evaluation point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Training iterations completed when the evaluation ran.
    pub iteration: usize,
    pub mean_eval_return: f64,
    /// Population standard deviation of the evaluation returns.
    pub return_std: f64,
    /// Mean train-mode amplitude over the iterations since the previous point.
    pub comm_amplitude: f64,
    /// EWMA of the per-iteration amplitude, taken at this iteration.
    pub amplitude_ewma: f64,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.iteration, self.mean_eval_return, self.return_std, self.comm_amplitude, self.amplitude_ewma
        )
    }
}

pub fn write_metrics_csv<W: Write>(out: &mut W, records: &[MetricsRecord]) -> io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Parses a metrics CSV written by [`write_metrics_csv`].
pub fn read_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>, TrainError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        other => {
            return Err(TrainError::Format(format!(
                "metrics header mismatch: {other:?}"
            )))
        }
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(TrainError::Format(format!("row {}: expected 5 fields", i + 1)));
            }
            let num = |k: usize| {
                f[k].trim()
                    .parse::<f64>()
                    .map_err(|e| TrainError::Format(format!("row {}: {e}", i + 1)))
            };
            Ok(MetricsRecord {
                iteration: f[0]
                    .trim()
                    .parse()
                    .map_err(|e| TrainError::Format(format!("row {}: {e}", i + 1)))?,
                mean_eval_return: num(1)?,
                return_std: num(2)?,
                comm_amplitude: num(3)?,
                amplitude_ewma: num(4)?,
            })
        })
        .collect()
}

/// Mean absolute value of the discretizer inputs.
pub fn communication_amplitude(logits: &[f64]) -> Result<f64, TrainError> {
    if logits.is_empty() {
        return Err(TrainError::Config("amplitude of an empty logit set".into()));
    }
    Ok(logits.iter().map(|x| x.abs()).sum::<f64>() / logits.len() as f64)
}

/// `s_t = alpha x_t + (1 - alpha) s_{t-1}` with `s_0 = x_0`.
pub fn ewma(series: &[f64], alpha: f64) -> Result<Vec<f64>, TrainError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(TrainError::Config(format!("ewma alpha must lie in (0, 1], got {alpha}")));
    }
    let mut out = Vec::with_capacity(series.len());
    let mut s = None;
    for &x in series {
        let next = match s {
            None => x,
            Some(prev) => alpha * x + (1.0 - alpha) * prev,
        };
        s = Some(next);
        out.push(next);
    }
    Ok(out)
}

/// Running form of [`ewma`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ewma {
    pub alpha: f64,
    pub value: Option<f64>,
}

impl Ewma {
    pub fn new(alpha: f64) -> Self {
        Self { alpha, value: None }
    }

    pub fn push(&mut self, x: f64) -> f64 {
        let v = match self.value {
            None => x,
            Some(prev) => self.alpha * x + (1.0 - self.alpha) * prev,
        };
        self.value = Some(v);
        v
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalSummary {
    pub mean: f64,
    pub std: f64,
    /// Evaluation points inside the window.
    pub points: usize,
}

/// Mean and population std of `mean_eval_return` over the last 10% of the
/// evaluation points (at least one). `None` for an empty history.
pub fn final_summary(history: &[MetricsRecord]) -> Option<FinalSummary> {
    if history.is_empty() {
        return None;
    }
    let k = ((history.len() as f64) * 0.1).ceil().max(1.0) as usize;
    let window: Vec<f64> = history[history.len() - k..]
        .iter()
        .map(|r| r.mean_eval_return)
        .collect();
    let (mean, std) = mean_std(&window);
    Some(FinalSummary {
        mean,
        std,
        points: k,
    })
}

/// First evaluation iteration whose return reaches `threshold`.
pub fn first_reaching(history: &[MetricsRecord], threshold: f64) -> Option<usize> {
    history
        .iter()
        .find(|r| r.mean_eval_return >= threshold)
        .map(|r| r.iteration)
}
