//! A common face for every predictor the evaluation and backtest drive.

use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::{ar1_forecast, chance_predict, Ar1Options, Ar1Params, BaselineError, ChanceModel};
use crate::data::PriceSeries;
use crate::eval::Direction;
use crate::model::{ForecasterState, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum ForecastError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("non-positive price {0} in context")]
    NonPositive(f64),
    #[error("no ground truth for {instrument} beyond index {available}")]
    FutureUnavailable { instrument: String, available: usize },
    #[error("unknown instrument {0}")]
    UnknownInstrument(String),
}

/// Everything a predictor may see at a decision point: ground-truth prices
/// up to (and including) index `origin - 1` of the instrument's series.
#[derive(Debug, Clone, Copy)]
pub struct ForecastQuery<'a> {
    pub instrument_id: &'a str,
    /// Trailing ground-truth prices; the last element sits at `origin - 1`.
    pub history: &'a [f64],
    /// Index of the first point to predict.
    pub origin: usize,
    pub horizon: usize,
}

/// Produces `horizon` future prices.
pub trait Forecaster: Sync {
    fn name(&self) -> &str;
    fn forecast(&self, query: &ForecastQuery<'_>) -> Result<Vec<f64>, ForecastError>;
}

/// The transformer, run on log prices.
pub struct ModelForecaster {
    pub state: ForecasterState,
    pub name: String,
}

impl ModelForecaster {
    pub fn new(state: ForecasterState) -> Self {
        Self { state, name: "model".into() }
    }
}

impl Forecaster for ModelForecaster {
    fn name(&self) -> &str {
        &self.name
    }

    fn forecast(&self, q: &ForecastQuery<'_>) -> Result<Vec<f64>, ForecastError> {
        if let Some(&bad) = q.history.iter().find(|v| v.is_nan() || **v <= 0.0) {
            return Err(ForecastError::NonPositive(bad));
        }
        let z: Vec<f64> = q.history.iter().map(|v| v.ln()).collect();
        Ok(self.state.autoregressive_forecast(&z, q.horizon)?.into_iter().map(f64::exp).collect())
    }
}

/// A ratio-matched guesser: draws a direction, then emits a strictly
/// monotone path in that direction so that every comparison against the
/// last price or the first forecast agrees with the draw.
///
/// Draws depend on `(seed, instrument, origin)` only, so results do not
/// depend on call order or thread count.
pub struct ChanceForecaster {
    pub model: ChanceModel,
}

impl ChanceForecaster {
    fn rng_for(&self, q: &ForecastQuery<'_>) -> ChaCha8Rng {
        let mut h = DefaultHasher::new();
        (self.model.seed, q.instrument_id, q.origin).hash(&mut h);
        ChaCha8Rng::seed_from_u64(h.finish())
    }
}

impl Forecaster for ChanceForecaster {
    fn name(&self) -> &str {
        "chance"
    }

    fn forecast(&self, q: &ForecastQuery<'_>) -> Result<Vec<f64>, ForecastError> {
        let last = *q.history.last().ok_or(BaselineError::ShortContext(0))?;
        let sign = match chance_predict(&self.model, &mut self.rng_for(q)) {
            Direction::Up => 1.0,
            Direction::Down => -1.0,
        };
        Ok((1..=q.horizon).map(|j| last * (1.0 + sign * 1e-6 * j as f64)).collect())
    }
}

/// Per-instrument AR(1) on differences. Instruments without a usable fit
/// fall back to a flat random-walk forecast.
pub struct Ar1Forecaster {
    params: HashMap<String, Ar1Params>,
    options: Ar1Options,
}

impl Ar1Forecaster {
    /// Fits every series on its points before `cutoff`; failures are logged
    /// and replaced by the flat fallback.
    pub fn fit(series: &[PriceSeries], cutoff: i64, options: Ar1Options) -> Self {
        let params = series
            .iter()
            .map(|s| {
                let p = crate::baselines::fit_ar1(s, cutoff, options).unwrap_or_else(|e| {
                    log::warn!("AR(1) falls back to a flat forecast: {e}");
                    Ar1Params::random_walk(s.instrument_id(), options)
                });
                (s.instrument_id().to_string(), p)
            })
            .collect();
        Self { params, options }
    }

    pub fn params(&self) -> Vec<Ar1Params> {
        let mut v: Vec<Ar1Params> = self.params.values().cloned().collect();
        v.sort_by(|a, b| a.instrument_id.cmp(&b.instrument_id));
        v
    }
}

impl Forecaster for Ar1Forecaster {
    fn name(&self) -> &str {
        "ar1"
    }

    fn forecast(&self, q: &ForecastQuery<'_>) -> Result<Vec<f64>, ForecastError> {
        let fallback;
        let p = match self.params.get(q.instrument_id) {
            Some(p) => p,
            None => {
                fallback = Ar1Params::random_walk(q.instrument_id, self.options);
                &fallback
            }
        };
        Ok(ar1_forecast(p, q.history, q.horizon)?)
    }
}

/// Perfect foresight: returns the true future. Only for harness
/// self-tests; it necessarily looks ahead.
pub struct OracleForecaster {
    truth: HashMap<String, Vec<f64>>,
}

impl OracleForecaster {
    pub fn new(series: &[PriceSeries]) -> Self {
        Self { truth: series.iter().map(|s| (s.instrument_id().to_string(), s.values().to_vec())).collect() }
    }
}

impl Forecaster for OracleForecaster {
    fn name(&self) -> &str {
        "oracle"
    }

    fn forecast(&self, q: &ForecastQuery<'_>) -> Result<Vec<f64>, ForecastError> {
        let v = self.truth.get(q.instrument_id).ok_or_else(|| ForecastError::UnknownInstrument(q.instrument_id.into()))?;
        v.get(q.origin..q.origin + q.horizon).map(<[f64]>::to_vec).ok_or(ForecastError::FutureUnavailable {
            instrument: q.instrument_id.into(),
            available: v.len(),
        })
    }
}

/// Where one query's history sat inside the audited ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessRecord {
    pub instrument_id: String,
    pub origin: usize,
    /// Half-open index range of the history inside the registered buffer,
    /// or `None` if the history was not a view of it.
    pub range: Option<(usize, usize)>,
}

impl AccessRecord {
    /// The history ends exactly at the query origin, so nothing at or after
    /// the first predicted index was reachable.
    pub fn is_causal(&self) -> bool {
        self.range.is_some_and(|(_, end)| end == self.origin)
    }
}

/// Wraps a predictor and logs, from slice bounds, which ground-truth
/// indices each query could reach.
pub struct AccessAudit<'a, F> {
    inner: F,
    truth: HashMap<String, &'a [f64]>,
    log: Mutex<Vec<AccessRecord>>,
}

impl<'a, F: Forecaster> AccessAudit<'a, F> {
    pub fn new(inner: F, series: &'a [PriceSeries]) -> Self {
        Self {
            inner,
            truth: series.iter().map(|s| (s.instrument_id().to_string(), s.values())).collect(),
            log: Mutex::new(Vec::new()),
        }
    }

    /// Records sorted by instrument and origin.
    pub fn records(&self) -> Vec<AccessRecord> {
        let mut v = self.log.lock().expect("audit log").clone();
        v.sort_by(|a, b| (&a.instrument_id, a.origin).cmp(&(&b.instrument_id, b.origin)));
        v
    }

    fn locate(&self, q: &ForecastQuery<'_>) -> Option<(usize, usize)> {
        let buf = self.truth.get(q.instrument_id)?;
        let size = std::mem::size_of::<f64>();
        let base = buf.as_ptr() as usize;
        let start = q.history.as_ptr() as usize;
        if start < base || !(start - base).is_multiple_of(size) {
            return None;
        }
        let first = (start - base) / size;
        let end = first + q.history.len();
        (end <= buf.len()).then_some((first, end))
    }
}

impl<F: Forecaster> Forecaster for AccessAudit<'_, F> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn forecast(&self, q: &ForecastQuery<'_>) -> Result<Vec<f64>, ForecastError> {
        let record = AccessRecord { instrument_id: q.instrument_id.to_string(), origin: q.origin, range: self.locate(q) };
        self.log.lock().expect("audit log").push(record);
        self.inner.forecast(q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn query<'a>(history: &'a [f64], origin: usize, horizon: usize) -> ForecastQuery<'a> {
        ForecastQuery { instrument_id: "a", history, origin, horizon }
    }

    #[test]
    fn chance_paths_are_monotone_and_reproducible() {
        let f = ChanceForecaster { model: ChanceModel { up_ratio: 0.5, seed: 3 } };
        let h = [10.0, 11.0, 12.0];
        let mut ups = 0;
        for origin in 3..403 {
            let p = f.forecast(&query(&h, origin, 5)).unwrap();
            assert_eq!(p, f.forecast(&query(&h, origin, 5)).unwrap());
            let up = p[0] > 12.0;
            ups += up as usize;
            assert!(p.windows(2).all(|w| (w[1] > w[0]) == up && w[1] != w[0]));
        }
        assert!((150..250).contains(&ups));
    }

    #[test]
    fn oracle_returns_the_future() {
        let s = PriceSeries::new("a", crate::data::Granularity::Daily, (0..6).collect(), vec![1., 2., 3., 4., 5., 6.])
            .unwrap();
        let o = OracleForecaster::new(&[s]);
        assert_eq!(o.forecast(&query(&[1., 2.], 2, 3)).unwrap(), vec![3., 4., 5.]);
        assert!(o.forecast(&query(&[1., 2.], 5, 3)).is_err());
    }

    #[test]
    fn model_forecaster_works_in_price_space() {
        let cfg = ModelConfig { input_patch_len: 4, output_patch_len: 8, num_layers: 1, hidden_dim: 8, num_heads: 1, max_context: 16 };
        let state = ForecasterState::init_random(&cfg, 1).unwrap();
        let z: Vec<f64> = (0..10).map(|i| 3.0 + 0.01 * i as f64).collect();
        let expected: Vec<f64> = state.autoregressive_forecast(&z, 5).unwrap().into_iter().map(f64::exp).collect();
        let prices: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let got = ModelForecaster::new(state).forecast(&query(&prices, 10, 5)).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12 * b);
        }
    }

    #[test]
    fn audit_locates_views_and_flags_copies() {
        let s = PriceSeries::new("a", crate::data::Granularity::Daily, (0..6).collect(), vec![1., 2., 3., 4., 5., 6.])
            .unwrap();
        let set = [s];
        let audit = AccessAudit::new(ChanceForecaster { model: ChanceModel { up_ratio: 0.5, seed: 0 } }, &set);
        let v = set[0].values();
        audit.forecast(&query(&v[1..4], 4, 1)).unwrap();
        audit.forecast(&query(&v[1..4], 3, 1)).unwrap();
        let copy = v[..2].to_vec();
        audit.forecast(&query(&copy, 2, 1)).unwrap();
        let r = audit.records();
        assert_eq!(r[0].range, None);
        assert_eq!(r[1].range, Some((1, 4)));
        assert!(!r[1].is_causal());
        assert!(r[2].is_causal());
    }

    #[test]
    fn ar1_falls_back_for_unknown_instruments() {
        let f = Ar1Forecaster::fit(&[], 0, Ar1Options::default());
        assert_eq!(f.forecast(&query(&[4.0, 5.0], 2, 2)).unwrap(), vec![5.0, 5.0]);
    }
}
