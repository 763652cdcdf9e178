use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{chunk_series, log_transform, lr_at, sample_example, Chunk, MomentumSgd, TrainConfig, TrainError, TrainingExample};
use crate::data::{PriceSeries, SeriesSplit};
use crate::model::{ForecasterState, ModelConfig};

/// Windows per stacked forward/backward pass. Fixed so that gradient sums do
/// not depend on the number of worker threads.
const MICRO_BATCH: usize = 32;
const VALIDATION_STREAM: u64 = 0x7a11_da7e_5eed;

/// Log-space chunks for training and validation.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<Chunk>,
    pub validation: Vec<Chunk>,
}

impl TrainData {
    pub fn from_split(split: &SeriesSplit, config: &TrainConfig) -> Result<Self, TrainError> {
        Self::from_series(&split.train, &split.validation, config)
    }

    pub fn from_series(
        train: &[PriceSeries],
        validation: &[PriceSeries],
        config: &TrainConfig,
    ) -> Result<Self, TrainError> {
        let chunks = |set: &[PriceSeries]| -> Result<Vec<Chunk>, TrainError> {
            let mut out = Vec::new();
            for s in set {
                let z = log_transform(s.values())?;
                let c = chunk_series(s.instrument_id(), &z, config);
                if c.is_empty() {
                    log::warn!("{}: {} points is too short for a training window", s.instrument_id(), s.len());
                }
                out.extend(c);
            }
            Ok(out)
        };
        let data = Self { train: chunks(train)?, validation: chunks(validation)? };
        if data.train.is_empty() {
            return Err(TrainError::NoData("training set has no usable chunk".into()));
        }
        if data.validation.is_empty() {
            return Err(TrainError::NoData("validation set has no usable chunk".into()));
        }
        Ok(data)
    }

    pub fn steps_per_epoch(&self, config: &TrainConfig) -> usize {
        self.train.len().div_ceil(config.batch_size)
    }
}

/// Per-epoch train and validation loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossCurve {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

impl LossCurve {
    pub fn len(&self) -> usize {
        self.train_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_loss.is_empty()
    }

    /// `epoch,train_loss,val_loss`, epochs numbered from 1.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "epoch,train_loss,val_loss")?;
        for (i, (t, v)) in self.train_loss.iter().zip(&self.val_loss).enumerate() {
            writeln!(out, "{},{},{}", i + 1, t, v)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub last_lr: f64,
    pub mean_grad_norm: f64,
    pub steps: usize,
}

/// Trains a freshly initialized model on the split's train set.
pub fn train(
    split: &SeriesSplit,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<(ForecasterState, LossCurve), TrainError> {
    let data = TrainData::from_split(split, config)?;
    let state = ForecasterState::init_random(model_config, config.seed)?;
    train_from(state, &data, config, &mut |_, _| Ok(()))
}

fn batch_gradient(
    state: &ForecasterState,
    examples: &[TrainingExample],
) -> Result<(f64, Vec<f64>), TrainError> {
    let weight = 1.0 / examples.len() as f64;
    let windows: Vec<(&[f64], &[f64])> =
        examples.iter().map(|e| (e.context.as_slice(), e.target.as_slice())).collect();
    let parts: Vec<Result<(f64, Vec<f64>), TrainError>> = windows
        .par_chunks(MICRO_BATCH)
        .map(|mb| {
            let mut g = vec![0.0; state.num_params()];
            let l = state.accumulate_gradient(mb, weight, &mut g)?;
            Ok((l, g))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; state.num_params()];
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((loss, grad))
}

fn mean_loss(state: &ForecasterState, examples: &[TrainingExample]) -> Result<f64, TrainError> {
    let weight = 1.0 / examples.len() as f64;
    let windows: Vec<(&[f64], &[f64])> =
        examples.iter().map(|e| (e.context.as_slice(), e.target.as_slice())).collect();
    let parts: Vec<Result<f64, TrainError>> = windows
        .par_chunks(MICRO_BATCH)
        .map(|mb| Ok(state.weighted_loss(mb, weight)?))
        .collect();
    parts.into_iter().sum()
}

/// Continues training `state` for `config.total_epochs` epochs. `on_epoch`
/// runs after every epoch (checkpointing, progress reporting).
pub fn train_from(
    mut state: ForecasterState,
    data: &TrainData,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochReport, &ForecasterState) -> Result<(), TrainError>,
) -> Result<(ForecasterState, LossCurve), TrainError> {
    config.validate()?;
    let mc = state.config().clone();
    if config.output_len < mc.output_patch_len {
        return Err(TrainError::InvalidConfig(format!(
            "output_len ({}) must be at least output_patch_len ({})",
            config.output_len, mc.output_patch_len
        )));
    }
    if config.max_context > mc.max_context {
        return Err(TrainError::InvalidConfig(format!(
            "train max_context ({}) exceeds the model's max_context ({})",
            config.max_context, mc.max_context
        )));
    }

    let mut val_rng = ChaCha8Rng::seed_from_u64(config.seed ^ VALIDATION_STREAM);
    let val_examples = data
        .validation
        .iter()
        .map(|c| sample_example(c, &mut val_rng, config))
        .collect::<Result<Vec<_>, _>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let steps_per_epoch = data.steps_per_epoch(config);
    let mut opt = MomentumSgd::new(state.num_params(), config);
    let mut curve = LossCurve::default();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut global_step = 0usize;

    for epoch in 1..=config.total_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut norm_sum = 0.0;
        let mut lr = 0.0;
        for (step, batch_idx) in order.chunks(config.batch_size).enumerate() {
            let wrap = |e: TrainError| TrainError::Step { epoch, step, source: Box::new(e) };
            let examples = batch_idx
                .iter()
                .map(|&i| sample_example(&data.train[i], &mut rng, config))
                .collect::<Result<Vec<_>, _>>()
                .map_err(wrap)?;
            let (loss, mut grad) = batch_gradient(&state, &examples).map_err(wrap)?;
            global_step += 1;
            lr = lr_at(global_step, steps_per_epoch, config);
            norm_sum += opt.step(&mut state, &mut grad, lr).map_err(wrap)?;
            epoch_loss += loss * examples.len() as f64;
        }
        let train_loss = epoch_loss / data.train.len() as f64;
        let val_loss = mean_loss(&state, &val_examples)
            .map_err(|e| TrainError::Step { epoch, step: steps_per_epoch, source: Box::new(e) })?;
        curve.train_loss.push(train_loss);
        curve.val_loss.push(val_loss);
        let report = EpochReport {
            epoch,
            train_loss,
            val_loss,
            last_lr: lr,
            mean_grad_norm: norm_sum / steps_per_epoch as f64,
            steps: steps_per_epoch,
        };
        log::info!(
            "epoch {epoch}: train {train_loss:.6e} val {val_loss:.6e} lr {lr:.3e} |g| {:.3e}",
            report.mean_grad_norm
        );
        on_epoch(&report, &state)?;
    }
    Ok((state, curve))
}
