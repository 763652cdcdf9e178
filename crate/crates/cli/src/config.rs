//! Run configuration: a flat TOML file whose keys mirror the model, training,
//! evaluation and backtest parameters. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use finpatch::backtest::Strategy;
use finpatch::baselines::Ar1Options;
use finpatch::data::date_to_timestamp;
use finpatch::eval::{EvalProtocol, TieRule};
use finpatch::model::{default_heads, ModelConfig};
use finpatch::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Every documented key with its default.
///
/// `max_context` sets both the model's longest context and the longest
/// sampled training window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root that manifest paths are relative to; defaults to the manifest's directory.
    pub data_root: Option<PathBuf>,
    /// Train/test boundary: `YYYY-MM-DD` or epoch seconds.
    pub cutoff: String,
    pub val_fraction: f64,
    pub seed: u64,

    pub input_patch_len: usize,
    pub output_patch_len: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    /// Defaults to one head per 64 hidden units.
    pub num_heads: Option<usize>,
    pub max_context: usize,

    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub peak_lr: f64,
    pub momentum: f64,
    pub grad_clip_max_norm: f64,
    pub batch_size: usize,
    pub min_context: usize,
    pub output_len: usize,
    /// Save a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,

    pub context_len: usize,
    pub total_horizon: usize,
    pub horizons: Vec<usize>,
    pub tie_rule: TieRule,

    pub backtest_horizons: Vec<usize>,
    pub strategy: Strategy,
    /// First decision day; defaults to the cutoff.
    pub start: Option<String>,
    /// Checkpoint for the `model` predictor.
    pub checkpoint: Option<PathBuf>,
    /// Externally produced checkpoint for the `import` predictor.
    pub import_checkpoint: Option<PathBuf>,
    pub ar1_intercept: bool,
    pub ar1_log_differences: bool,
    /// Which period the chance guesser's up ratio is estimated on.
    pub chance_period: ChancePeriod,
    /// Also run the ratio-matched guesser over the evaluation windows and
    /// report its sampled accuracy next to the analytic rate.
    pub simulate_chance: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChancePeriod {
    /// Points before the cutoff; cannot see the scored period.
    #[default]
    Train,
    /// Points at or after the cutoff, i.e. the scored period itself.
    Test,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let e = EvalProtocol::default();
        Self {
            data_root: None,
            cutoff: "2023-01-01".into(),
            val_fraction: 0.1,
            seed: t.seed,
            input_patch_len: m.input_patch_len,
            output_patch_len: m.output_patch_len,
            num_layers: m.num_layers,
            hidden_dim: m.hidden_dim,
            num_heads: None,
            max_context: m.max_context,
            warmup_epochs: t.warmup_epochs,
            total_epochs: t.total_epochs,
            peak_lr: t.peak_lr,
            momentum: t.momentum,
            grad_clip_max_norm: t.grad_clip_max_norm,
            batch_size: t.batch_size,
            min_context: t.min_context,
            output_len: t.output_len,
            checkpoint_every: 0,
            context_len: e.context_len,
            total_horizon: e.total_horizon,
            horizons: e.horizons.clone(),
            tie_rule: e.tie_rule,
            backtest_horizons: e.horizons,
            strategy: Strategy::Neutral,
            start: None,
            checkpoint: None,
            import_checkpoint: None,
            ar1_intercept: true,
            ar1_log_differences: false,
            chance_period: ChancePeriod::Train,
            simulate_chance: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            input_patch_len: self.input_patch_len,
            output_patch_len: self.output_patch_len,
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads.unwrap_or_else(|| default_heads(self.hidden_dim)),
            max_context: self.max_context,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.total_epochs,
            peak_lr: self.peak_lr,
            momentum: self.momentum,
            grad_clip_max_norm: self.grad_clip_max_norm,
            batch_size: self.batch_size,
            min_context: self.min_context,
            max_context: self.max_context,
            output_len: self.output_len,
            seed: self.seed,
        }
    }

    pub fn protocol(&self, horizons: Option<&[usize]>) -> EvalProtocol {
        EvalProtocol {
            context_len: self.context_len,
            total_horizon: self.total_horizon,
            horizons: horizons.map_or_else(|| self.horizons.clone(), <[usize]>::to_vec),
            tie_rule: self.tie_rule,
        }
    }

    pub fn ar1(&self) -> Ar1Options {
        Ar1Options { intercept: self.ar1_intercept, log_differences: self.ar1_log_differences }
    }

    pub fn cutoff_ts(&self) -> Result<i64, CliError> {
        parse_time("cutoff", &self.cutoff)
    }

    pub fn start_ts(&self) -> Result<i64, CliError> {
        match &self.start {
            Some(s) => parse_time("start", s),
            None => self.cutoff_ts(),
        }
    }

    /// Checks every key; messages name the keys involved.
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: String| Err(CliError::Config(e));
        self.model().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.protocol(None).validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.output_len < self.output_patch_len {
            return cfg(format!(
                "output_len ({}) must be at least output_patch_len ({})",
                self.output_len, self.output_patch_len
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return cfg(format!("val_fraction ({}) must lie in (0, 1)", self.val_fraction));
        }
        if self.backtest_horizons.iter().any(|&h| h < 2) {
            return cfg("backtest_horizons must all be at least 2".into());
        }
        self.cutoff_ts()?;
        self.start_ts()?;
        Ok(())
    }
}

/// `YYYY-MM-DD` (midnight UTC) or integer epoch seconds.
pub fn parse_time(key: &str, text: &str) -> Result<i64, CliError> {
    if let Ok(ts) = text.trim().parse::<i64>() {
        return Ok(ts);
    }
    NaiveDate::parse_from_str(text.trim(), "%Y-%m-%d")
        .map(date_to_timestamp)
        .map_err(|_| CliError::Config(format!("{key} ({text}) is neither YYYY-MM-DD nor epoch seconds")))
}
