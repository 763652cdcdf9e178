//! Forecasting-and-trading laboratory built around a patched decoder-only
//! time-series transformer trained on log prices.
//!
//! * [`data`]: CSV ingestion, cutoff and train/validation splits.
//! * [`model`]: the forecaster, its parameter layout and checkpoint archive.
//! * [`train`]: masked-window sampling, log-space loss, momentum SGD.
//! * [`baselines`]: chance-rate and AR(1)-on-differences reference predictors.
//! * [`eval`]: stepwise directional evaluation, accuracy and macro F1.
//! * [`backtest`]: basic and market-neutral mock trading with a metric report.
//! * [`forecast`]: the predictor interface shared by evaluation and backtests.
//! * [`synthetic`]: seeded synthetic markets.

pub mod backtest;
pub mod baselines;
pub mod data;
pub mod eval;
pub mod forecast;
pub mod model;
pub mod synthetic;
pub mod train;
