//! Patched decoder-only forecaster.
//!
//! A context of log prices is left-padded to a whole number of input patches,
//! normalized by the statistics of the real values in its first non-empty patch,
//! embedded patch-by-patch with a residual MLP, run through pre-norm causal
//! transformer blocks and mapped by a residual MLP head to one output patch of
//! future values per input position.

mod checkpoint;
mod layout;
pub(crate) mod linalg;
mod network;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use layout::{ParamLayout, TensorSpec};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("context of {len} points exceeds max_context {max}")]
    ContextTooLong { len: usize, max: usize },
    #[error("context is empty")]
    EmptyContext,
    #[error("non-finite activation in {stage}")]
    NonFiniteActivation { stage: &'static str },
    #[error("target window of {len} points is shorter than output_patch_len {need}")]
    TargetTooShort { len: usize, need: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_patch_len: usize,
    pub output_patch_len: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub max_context: usize,
}

impl Default for ModelConfig {
    /// Desk-scale configuration: 4 layers, hidden size 128.
    fn default() -> Self {
        Self::with_size(4, 128)
    }
}

impl ModelConfig {
    /// Default patching (32 in, 128 out, context 512) at a chosen depth and width.
    pub fn with_size(num_layers: usize, hidden_dim: usize) -> Self {
        Self {
            input_patch_len: 32,
            output_patch_len: 128,
            num_layers,
            hidden_dim,
            num_heads: default_heads(hidden_dim),
            max_context: 512,
        }
    }

    /// The full-scale 20-layer, 1280-wide configuration.
    pub fn full_scale() -> Self {
        Self::with_size(20, 1280)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.input_patch_len == 0
            || self.output_patch_len == 0
            || self.num_layers == 0
            || self.hidden_dim == 0
            || self.num_heads == 0
            || self.max_context == 0
        {
            return bad("all sizes must be positive".into());
        }
        if self.output_patch_len <= self.input_patch_len {
            return bad(format!(
                "output_patch_len ({}) must exceed input_patch_len ({})",
                self.output_patch_len, self.input_patch_len
            ));
        }
        if !self.max_context.is_multiple_of(self.input_patch_len) {
            return bad(format!(
                "max_context ({}) must be divisible by input_patch_len ({})",
                self.max_context, self.input_patch_len
            ));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "num_heads ({}) must divide hidden_dim ({})",
                self.num_heads, self.hidden_dim
            ));
        }
        Ok(())
    }

    pub fn max_patches(&self) -> usize {
        self.max_context / self.input_patch_len
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.hidden_dim
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// One head per 64 hidden units, at least one.
pub fn default_heads(hidden_dim: usize) -> usize {
    (hidden_dim / 64).max(1)
}

/// A context cut into input patches.
///
/// The first `leading_pad` values (all inside the leading patches) are
/// padding. `mask[j]` is true when patch `j` holds no real value; such patches
/// are excluded from attention and from the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub patches: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
    pub leading_pad: usize,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patch_len(&self) -> usize {
        self.patches.first().map_or(0, Vec::len)
    }

    pub fn is_padding(&self, patch: usize, offset: usize) -> bool {
        patch * self.patch_len() + offset < self.leading_pad
    }

    /// Concatenated real (non-padding) values.
    pub fn unpadded(&self) -> Vec<f64> {
        self.patches.iter().flatten().skip(self.leading_pad).copied().collect()
    }

    /// Number of real values up to and including patch `j`.
    pub fn real_len_through(&self, j: usize) -> usize {
        ((j + 1) * self.patch_len()).saturating_sub(self.leading_pad)
    }

    fn first_real_patch(&self) -> usize {
        self.leading_pad / self.patch_len().max(1)
    }
}

/// Left-pads `z` to a multiple of the input patch length.
pub fn patchify(z: &[f64], config: &ModelConfig) -> Result<PatchSequence, ModelError> {
    let patches = z.len().div_ceil(config.input_patch_len);
    patchify_to(z, config, patches)
}

/// Left-pads `z` to exactly `num_patches` patches; the extra leading patches
/// are fully masked.
pub fn patchify_to(z: &[f64], config: &ModelConfig, num_patches: usize) -> Result<PatchSequence, ModelError> {
    if z.is_empty() {
        return Err(ModelError::EmptyContext);
    }
    if z.len() > config.max_context {
        return Err(ModelError::ContextTooLong { len: z.len(), max: config.max_context });
    }
    let li = config.input_patch_len;
    let total = num_patches * li;
    if total < z.len() || num_patches > config.max_patches() {
        return Err(ModelError::ContextTooLong { len: z.len(), max: total.min(config.max_context) });
    }
    let leading_pad = total - z.len();
    let mut flat = vec![0.0; leading_pad];
    flat.extend_from_slice(z);
    let patches: Vec<Vec<f64>> = flat.chunks(li).map(<[f64]>::to_vec).collect();
    let mask = (0..num_patches).map(|j| (j + 1) * li <= leading_pad).collect();
    Ok(PatchSequence { patches, mask, leading_pad })
}

/// Model parameters plus the config that determines their layout.
#[derive(Debug, Clone)]
pub struct ForecasterState {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<f64>,
    init_seed: u64,
}

impl ForecasterState {
    /// Deterministic scaled-normal initialization.
    pub fn init_random(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        let mut params = vec![0.0; layout.num_params()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let residual_scale = 1.0 / (2.0 * config.num_layers as f64).sqrt();
        let residual_outputs: Vec<usize> =
            layout.blocks.iter().flat_map(|b| [b.o.w.start, b.ff_out.w.start]).collect();
        for lin in layout.linears() {
            let mut std = 1.0 / (lin.fan_in as f64).sqrt();
            if residual_outputs.contains(&lin.w.start) {
                std *= residual_scale;
            }
            let normal = Normal::new(0.0, std).expect("positive std");
            for p in &mut params[lin.w.clone()] {
                *p = normal.sample(&mut rng);
            }
        }
        let pos_normal = Normal::new(0.0, 0.02).expect("positive std");
        for p in &mut params[layout.pos.clone()] {
            *p = pos_normal.sample(&mut rng);
        }
        for norm in layout.norms() {
            params[norm.gain.clone()].fill(1.0);
        }
        Ok(Self { config: config.clone(), layout, params, init_seed: seed })
    }

    /// Rebuilds a state from a flat parameter vector in layout order.
    pub fn from_params(config: &ModelConfig, params: Vec<f64>, init_seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        if params.len() != layout.num_params() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.num_params(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(ModelError::Checkpoint("non-finite parameter".into()));
        }
        Ok(Self { config: config.clone(), layout, params, init_seed })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|t| &self.params[t.range()])
    }

    /// One `output_patch_len` prediction (log space) per input patch position.
    pub fn forward(&self, patches: &PatchSequence) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut out = network::forward_batch(self, &[patches])?;
        Ok(out.pop().expect("one sequence in, one out"))
    }

    /// Forecasts `horizon` log values after `context` by repeatedly feeding
    /// the final position's output patch back in. No masking is applied.
    pub fn autoregressive_forecast(&self, context: &[f64], horizon: usize) -> Result<Vec<f64>, ModelError> {
        if context.is_empty() {
            return Err(ModelError::EmptyContext);
        }
        let max = self.config.max_context;
        let mut working: Vec<f64> = context[context.len().saturating_sub(max)..].to_vec();
        let mut generated = Vec::with_capacity(horizon + self.config.output_patch_len);
        while generated.len() < horizon {
            let seq = patchify(&working, &self.config)?;
            let outputs = self.forward(&seq)?;
            let last = outputs.last().expect("at least one patch");
            generated.extend_from_slice(last);
            working.extend_from_slice(last);
            if working.len() > max {
                working.drain(..working.len() - max);
            }
        }
        generated.truncate(horizon);
        Ok(generated)
    }

    /// Number of forward passes `autoregressive_forecast` makes for `horizon`.
    pub fn decode_steps(&self, horizon: usize) -> usize {
        horizon.div_ceil(self.config.output_patch_len)
    }

    /// Mean log-space loss over `windows` of `(context, target)` pairs.
    pub fn loss(&self, windows: &[(&[f64], &[f64])]) -> Result<f64, ModelError> {
        network::batch_loss(self, windows, 1.0 / windows.len() as f64)
    }

    /// Mean log-space loss over `windows` and its gradient in layout order.
    pub fn loss_and_gradient(&self, windows: &[(&[f64], &[f64])]) -> Result<(f64, Vec<f64>), ModelError> {
        let mut grad = vec![0.0; self.num_params()];
        let loss = network::accumulate_gradient(self, windows, 1.0 / windows.len() as f64, &mut grad)?;
        Ok((loss, grad))
    }

    /// Adds `weight * Σ loss_i` gradients into `grad` and returns `weight * Σ loss_i`.
    pub fn accumulate_gradient(
        &self,
        windows: &[(&[f64], &[f64])],
        weight: f64,
        grad: &mut [f64],
    ) -> Result<f64, ModelError> {
        network::accumulate_gradient(self, windows, weight, grad)
    }

    /// `weight * Σ loss_i` over `windows`, forward only.
    pub fn weighted_loss(&self, windows: &[(&[f64], &[f64])], weight: f64) -> Result<f64, ModelError> {
        network::batch_loss(self, windows, weight)
    }
}

/// Per-position target windows for a context/target pair: for each unmasked
/// patch `j`, the `output_patch_len` values following the patch's last real
/// value in `context ++ target`.
pub fn position_targets(
    seq: &PatchSequence,
    context: &[f64],
    target: &[f64],
    output_patch_len: usize,
) -> Result<Vec<Option<Vec<f64>>>, ModelError> {
    if target.len() < output_patch_len {
        return Err(ModelError::TargetTooShort { len: target.len(), need: output_patch_len });
    }
    Ok((0..seq.len())
        .map(|j| {
            (!seq.mask[j]).then(|| {
                let end = seq.real_len_through(j);
                (end..end + output_patch_len)
                    .map(|i| if i < context.len() { context[i] } else { target[i - context.len()] })
                    .collect()
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_patch_len: 4,
            output_patch_len: 8,
            num_layers: 2,
            hidden_dim: 16,
            num_heads: 2,
            max_context: 32,
        }
    }

    #[test]
    fn config_invariants() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::full_scale().validate().is_ok());
        let mut c = tiny();
        c.output_patch_len = 4;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.max_context = 30;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.num_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_head_count() {
        assert_eq!(ModelConfig::default().num_heads, 2);
        assert_eq!(ModelConfig::full_scale().num_heads, 20);
        assert_eq!(default_heads(8), 1);
    }

    #[test]
    fn init_is_deterministic() {
        let a = ForecasterState::init_random(&tiny(), 1).unwrap();
        let b = ForecasterState::init_random(&tiny(), 1).unwrap();
        let c = ForecasterState::init_random(&tiny(), 2).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn patchify_exact_multiple() {
        let z: Vec<f64> = (0..64).map(f64::from).collect();
        let seq = patchify(&z, &ModelConfig::default()).unwrap();
        assert_eq!(seq.len(), 2);
        assert_eq!(seq.leading_pad, 0);
        assert!(seq.mask.iter().all(|m| !m));
    }

    #[test]
    fn patchify_pads_on_the_left() {
        let z: Vec<f64> = (0..40).map(|i| i as f64 + 1.0).collect();
        let seq = patchify(&z, &ModelConfig::default()).unwrap();
        assert_eq!(seq.len(), 2);
        assert_eq!(seq.leading_pad, 24);
        assert!((0..24).all(|o| seq.is_padding(0, o)));
        assert!(!seq.is_padding(0, 24));
        // rebuild from the unpadded positions
        let rebuilt: Vec<f64> = (0..seq.len())
            .flat_map(|j| (0..32).map(move |o| (j, o)))
            .filter(|&(j, o)| !seq.is_padding(j, o))
            .map(|(j, o)| seq.patches[j][o])
            .collect();
        assert_eq!(rebuilt, z);
        assert_eq!(seq.unpadded(), z);
        assert_eq!(seq.patches[1][31], 40.0);
    }

    #[test]
    fn patchify_rejects_long_context() {
        let z = vec![1.0; 513];
        assert!(matches!(
            patchify(&z, &ModelConfig::default()),
            Err(ModelError::ContextTooLong { len: 513, max: 512 })
        ));
    }

    #[test]
    fn patchify_to_masks_extra_patches() {
        let cfg = tiny();
        let seq = patchify_to(&[1.0; 6], &cfg, 4).unwrap();
        assert_eq!(seq.mask, vec![true, true, false, false]);
        assert_eq!(seq.leading_pad, 10);
    }

    #[test]
    fn position_targets_follow_each_patch() {
        let cfg = tiny();
        let ctx: Vec<f64> = (0..6).map(f64::from).collect();
        let tgt: Vec<f64> = (6..20).map(f64::from).collect();
        let seq = patchify(&ctx, &cfg).unwrap();
        let t = position_targets(&seq, &ctx, &tgt, 8).unwrap();
        // patch 0 holds values 0..2 (after 2 pads), patch 1 holds 2..6
        assert_eq!(t[0].as_ref().unwrap(), &(2..10).map(f64::from).collect::<Vec<_>>());
        assert_eq!(t[1].as_ref().unwrap(), &(6..14).map(f64::from).collect::<Vec<_>>());
    }
}
