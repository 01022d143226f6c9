use serde::{Deserialize, Serialize};

use super::{GradError, ParamSet, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    /// Per-parameter running average of squared gradients.
    Rms,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Gradient-descent optimizer over one or more parameter sets, with optional
/// global-norm clipping applied before the update.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub clip_norm: Option<f64>,
    pub decay: f64,
    pub eps: f64,
    sq_avg: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            clip_norm: Some(10.0),
            decay: 0.99,
            eps: 1e-5,
            sq_avg: Vec::new(),
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate).with_clip(None)
    }

    pub fn with_clip(mut self, clip_norm: Option<f64>) -> Self {
        self.clip_norm = clip_norm;
        self
    }

    /// Applies one update from the accumulated gradients, then clears them.
    /// A non-finite gradient aborts before any parameter is touched.
    pub fn step(&mut self, sets: &mut [&mut ParamSet]) -> Result<StepStats> {
        for set in sets.iter() {
            for p in set.iter() {
                if p.grad.iter().any(|g| !g.is_finite()) {
                    return Err(GradError::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        let grad_norm = sets.iter().map(|s| s.grad_sq_norm()).sum::<f64>().sqrt();
        let scale = match self.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };

        let n_params: usize = sets.iter().map(|s| s.len()).sum();
        if self.kind == OptimizerKind::Rms && self.sq_avg.len() != n_params {
            if !self.sq_avg.is_empty() {
                return Err(GradError::ParamMismatch(
                    "optimizer state does not match parameter layout".into(),
                ));
            }
            self.sq_avg = sets
                .iter()
                .flat_map(|s| s.iter().map(|p| vec![0.0; p.value.len()]))
                .collect();
        }

        let lr = self.learning_rate;
        let mut slot = 0;
        for set in sets.iter_mut() {
            for p in set.iter_mut() {
                match self.kind {
                    OptimizerKind::Sgd => {
                        for (w, g) in p.value.data_mut().iter_mut().zip(&p.grad) {
                            *w -= lr * g * scale;
                        }
                    }
                    OptimizerKind::Rms => {
                        let sq = &mut self.sq_avg[slot];
                        for ((w, g), s) in p.value.data_mut().iter_mut().zip(&p.grad).zip(sq) {
                            let g = g * scale;
                            *s = self.decay * *s + (1.0 - self.decay) * g * g;
                            *w -= lr * g / (s.sqrt() + self.eps);
                        }
                    }
                }
                slot += 1;
            }
            set.zero_grad();
        }
        Ok(StepStats {
            grad_norm,
            clipped: scale < 1.0,
        })
    }
}
