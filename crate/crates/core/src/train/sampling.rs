use rand::Rng;

use super::{TrainConfig, TrainError};

/// Where a training window came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSource {
    pub instrument_id: String,
    /// Offset of the chunk inside the full log series.
    pub chunk_offset: usize,
    pub t_start: usize,
    pub t_end: usize,
}

/// A masked context and the `output_len` log values that follow it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub context: Vec<f64>,
    pub target: Vec<f64>,
    pub source: WindowSource,
}

/// A contiguous piece of one instrument's log series.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub instrument_id: String,
    pub offset: usize,
    pub values: Vec<f64>,
}

/// Cuts a log series into non-overlapping chunks of `max_context +
/// output_len` points. A trailing remainder survives only if it still holds
/// `min_context + output_len` points.
pub fn chunk_series(instrument_id: &str, log_values: &[f64], config: &TrainConfig) -> Vec<Chunk> {
    let full = config.max_context + config.output_len;
    let min = config.min_context + config.output_len;
    log_values
        .chunks(full)
        .enumerate()
        .filter(|(_, c)| c.len() >= min)
        .map(|(i, c)| Chunk { instrument_id: instrument_id.to_string(), offset: i * full, values: c.to_vec() })
        .collect()
}

/// Draws `t_end` uniformly from `[min_context, max_context]`, then `t_start`
/// uniformly from `[0, t_end - min_context]`; the context is
/// `series[t_start..t_end]` and the target the next `output_len` points.
///
/// Chunks shorter than `max_context + output_len` cap `t_end` at
/// `len - output_len`.
pub fn sample_masked_window<R: Rng + ?Sized>(
    series: &[f64],
    rng: &mut R,
    config: &TrainConfig,
) -> Result<(usize, usize), TrainError> {
    let need = config.min_context + config.output_len;
    if series.len() < need {
        return Err(TrainError::SeriesTooShort { len: series.len(), need });
    }
    let hi = config.max_context.min(series.len() - config.output_len);
    let t_end = rng.random_range(config.min_context..=hi);
    let t_start = rng.random_range(0..=t_end - config.min_context);
    Ok((t_start, t_end))
}

/// Samples a window from `chunk` and materializes it.
pub fn sample_example<R: Rng + ?Sized>(
    chunk: &Chunk,
    rng: &mut R,
    config: &TrainConfig,
) -> Result<TrainingExample, TrainError> {
    let (t_start, t_end) = sample_masked_window(&chunk.values, rng, config)?;
    Ok(TrainingExample {
        context: chunk.values[t_start..t_end].to_vec(),
        target: chunk.values[t_end..t_end + config.output_len].to_vec(),
        source: WindowSource {
            instrument_id: chunk.instrument_id.clone(),
            chunk_offset: chunk.offset,
            t_start,
            t_end,
        },
    })
}
