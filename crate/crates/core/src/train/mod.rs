//! Training: masked-window sampling, log-space MSE, linear-warmup/cosine
//! schedule and momentum SGD with global-norm clipping.

mod sampling;
mod trainer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ForecasterState, ModelError};

pub use sampling::{chunk_series, sample_example, sample_masked_window, Chunk, TrainingExample, WindowSource};
pub use trainer::{train, train_from, EpochReport, LossCurve, TrainData};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("log transform needs positive input, found {value} at index {index}")]
    NonPositiveInput { index: usize, value: f64 },
    #[error("series of {len} points is shorter than the required {need}")]
    SeriesTooShort { len: usize, need: usize },
    #[error("every position is masked")]
    AllMasked,
    #[error("prediction/target shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("no training windows: {0}")]
    NoData(String),
    #[error("epoch {epoch}, step {step}: {source}")]
    Step {
        epoch: usize,
        step: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Optimization and sampling hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub peak_lr: f64,
    pub momentum: f64,
    pub grad_clip_max_norm: f64,
    pub batch_size: usize,
    pub min_context: usize,
    pub max_context: usize,
    pub output_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 25,
            total_epochs: 100,
            peak_lr: 5e-4,
            momentum: 0.9,
            grad_clip_max_norm: 1.0,
            batch_size: 1024,
            min_context: 128,
            max_context: 512,
            output_len: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.warmup_epochs >= self.total_epochs {
            return bad(format!(
                "warmup_epochs ({}) must be less than total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            ));
        }
        if self.min_context == 0 || self.min_context > self.max_context {
            return bad(format!(
                "need 0 < min_context ({}) <= max_context ({})",
                self.min_context, self.max_context
            ));
        }
        if self.batch_size == 0 || self.output_len == 0 {
            return bad("batch_size and output_len must be positive".into());
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr ({}) must be finite and nonnegative", self.peak_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum ({}) must lie in [0, 1)", self.momentum));
        }
        if self.grad_clip_max_norm.is_nan() || self.grad_clip_max_norm <= 0.0 {
            return bad(format!("grad_clip_max_norm ({}) must be positive", self.grad_clip_max_norm));
        }
        Ok(())
    }
}

/// Element-wise natural log.
pub fn log_transform(prices: &[f64]) -> Result<Vec<f64>, TrainError> {
    prices
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            if value > 0.0 && value.is_finite() {
                Ok(value.ln())
            } else {
                Err(TrainError::NonPositiveInput { index, value })
            }
        })
        .collect()
}

/// Element-wise exponential; inverse of [`log_transform`].
pub fn exp_transform(log_values: &[f64]) -> Vec<f64> {
    log_values.iter().map(|v| v.exp()).collect()
}

/// Mean over unmasked positions of the per-position MSE between predicted and
/// true log values. `mask[j] == true` excludes position `j`.
pub fn loss(predictions: &[Vec<f64>], targets: &[Vec<f64>], mask: &[bool]) -> Result<f64, TrainError> {
    if predictions.len() != targets.len() || predictions.len() != mask.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} predictions, {} targets, {} mask entries",
            predictions.len(),
            targets.len(),
            mask.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, t), &masked) in predictions.iter().zip(targets).zip(mask) {
        if masked {
            continue;
        }
        if p.len() != t.len() || p.is_empty() {
            return Err(TrainError::ShapeMismatch(format!("position of {} vs {} values", p.len(), t.len())));
        }
        sum += p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        n += 1;
    }
    if n == 0 {
        return Err(TrainError::AllMasked);
    }
    Ok(sum / n as f64)
}

/// Linear warmup from 0 to `peak_lr` over `warmup_epochs`, then cosine decay
/// to 0 at `total_epochs`; 0 afterwards.
pub fn lr_at(step: usize, steps_per_epoch: usize, config: &TrainConfig) -> f64 {
    let epoch = step as f64 / steps_per_epoch.max(1) as f64;
    let warmup = config.warmup_epochs as f64;
    let total = config.total_epochs as f64;
    if epoch < warmup {
        return config.peak_lr * epoch / warmup;
    }
    let progress = ((epoch - warmup) / (total - warmup)).min(1.0);
    0.5 * config.peak_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales `grad` in place so its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

/// Heavy-ball momentum buffers: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct MomentumSgd {
    momentum: f64,
    max_norm: f64,
    velocity: Vec<f64>,
}

impl MomentumSgd {
    pub fn new(num_params: usize, config: &TrainConfig) -> Self {
        Self { momentum: config.momentum, max_norm: config.grad_clip_max_norm, velocity: vec![0.0; num_params] }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    /// Clips `grad`, updates the momentum buffer and applies the step.
    /// Returns the pre-clip gradient norm.
    pub fn step(&mut self, state: &mut ForecasterState, grad: &mut [f64], lr: f64) -> Result<f64, TrainError> {
        sgd_step(state.params_mut(), grad, lr, self)
    }
}

/// Momentum-SGD update on a raw parameter slice.
pub fn sgd_step(params: &mut [f64], grad: &mut [f64], lr: f64, opt: &mut MomentumSgd) -> Result<f64, TrainError> {
    if grad.len() != params.len() || opt.velocity.len() != params.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} gradients for {} parameters",
            grad.len(),
            params.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient);
    }
    let norm = clip_grad_norm(grad, opt.max_norm);
    for ((p, v), g) in params.iter_mut().zip(opt.velocity.iter_mut()).zip(grad.iter()) {
        *v = opt.momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(norm)
}
