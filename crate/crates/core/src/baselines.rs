//! Reference predictors: a ratio-matched chance guesser and a per-series
//! AR(1) fitted on price differences.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PriceSeries;
use crate::eval::Direction;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum BaselineError {
    #[error("no nonzero price change to estimate an up ratio from")]
    NoChanges,
    #[error("{instrument}: {points} training points, need at least {need}")]
    InsufficientData { instrument: String, points: usize, need: usize },
    #[error("{instrument}: lagged differences have no variance")]
    DegenerateFit { instrument: String },
    #[error("context needs at least 2 prices, got {0}")]
    ShortContext(usize),
}

/// Guesses "up" with probability `up_ratio`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChanceModel {
    pub up_ratio: f64,
    pub seed: u64,
}

impl ChanceModel {
    /// The deterministic draw stream for this model's seed.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Up ratio over every single-step change in `series`; zero changes are
/// left out of both counts.
pub fn fit_chance(series: &[PriceSeries], seed: u64) -> Result<ChanceModel, BaselineError> {
    let (mut up, mut nonzero) = (0usize, 0usize);
    for s in series {
        for w in s.values().windows(2) {
            if w[1] > w[0] {
                up += 1;
            }
            if w[1] != w[0] {
                nonzero += 1;
            }
        }
    }
    if nonzero == 0 {
        return Err(BaselineError::NoChanges);
    }
    Ok(ChanceModel { up_ratio: up as f64 / nonzero as f64, seed })
}

/// One Bernoulli(`up_ratio`) direction.
pub fn chance_predict<R: Rng + ?Sized>(model: &ChanceModel, rng: &mut R) -> Direction {
    if rng.random_bool(model.up_ratio.clamp(0.0, 1.0)) {
        Direction::Up
    } else {
        Direction::Down
    }
}

/// Variant switches for the AR(1) fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ar1Options {
    pub intercept: bool,
    /// Fit on differences of log prices instead of raw prices.
    pub log_differences: bool,
}

impl Default for Ar1Options {
    fn default() -> Self {
        Self { intercept: true, log_differences: false }
    }
}

/// `ΔP_t = intercept + phi·ΔP_{t-1}` fitted by least squares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ar1Params {
    pub instrument_id: String,
    pub phi: f64,
    pub intercept: f64,
    /// Standard error of `phi`; `None` when the fit has no residual degrees of freedom.
    pub phi_se: Option<f64>,
    pub observations: usize,
    pub options: Ar1Options,
}

impl Ar1Params {
    /// The random-walk fallback: flat forecasts.
    pub fn random_walk(instrument_id: &str, options: Ar1Options) -> Self {
        Self { instrument_id: instrument_id.into(), phi: 0.0, intercept: 0.0, phi_se: None, observations: 0, options }
    }
}

/// Fits on the points dated strictly before `cutoff`.
pub fn fit_ar1(series: &PriceSeries, cutoff: i64, options: Ar1Options) -> Result<Ar1Params, BaselineError> {
    let n = series.first_index_at_or_after(cutoff);
    if n < 4 {
        return Err(BaselineError::InsufficientData { instrument: series.instrument_id().into(), points: n, need: 4 });
    }
    let level: Vec<f64> = if options.log_differences {
        series.values()[..n].iter().map(|v| v.ln()).collect()
    } else {
        series.values()[..n].to_vec()
    };
    let d: Vec<f64> = level.windows(2).map(|w| w[1] - w[0]).collect();
    let (x, y) = (&d[..d.len() - 1], &d[1..]);
    let m = x.len() as f64;
    let degenerate = || BaselineError::DegenerateFit { instrument: series.instrument_id().into() };
    let scale = x.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let tiny = (f64::EPSILON * scale).powi(2) * m;

    let (phi, intercept, sxx) = if options.intercept {
        let (mx, my) = (x.iter().sum::<f64>() / m, y.iter().sum::<f64>() / m);
        let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
        if sxx <= tiny || scale == 0.0 {
            return Err(degenerate());
        }
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let phi = sxy / sxx;
        (phi, my - phi * mx, sxx)
    } else {
        let sxx: f64 = x.iter().map(|v| v * v).sum();
        if sxx == 0.0 {
            return Err(degenerate());
        }
        (x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / sxx, 0.0, sxx)
    };

    let dof = x.len() as isize - if options.intercept { 2 } else { 1 };
    let phi_se = (dof > 0).then(|| {
        let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - phi * a).powi(2)).sum();
        (rss / dof as f64 / sxx).sqrt()
    });
    Ok(Ar1Params { instrument_id: series.instrument_id().into(), phi, intercept, phi_se, observations: x.len(), options })
}

/// Iterates the fitted difference recurrence `horizon` steps from the last
/// observed difference and accumulates onto the last price.
pub fn ar1_forecast(params: &Ar1Params, context: &[f64], horizon: usize) -> Result<Vec<f64>, BaselineError> {
    if context.len() < 2 {
        return Err(BaselineError::ShortContext(context.len()));
    }
    let tf = |v: f64| if params.options.log_differences { v.ln() } else { v };
    let (prev, last) = (tf(context[context.len() - 2]), tf(context[context.len() - 1]));
    let mut d = last - prev;
    let mut level = last;
    Ok((0..horizon)
        .map(|_| {
            d = params.intercept + params.phi * d;
            level += d;
            if params.options.log_differences {
                level.exp()
            } else {
                level
            }
        })
        .collect())
}

/// `instrument_id,phi,intercept` for audit.
pub fn write_ar1_csv<W: Write>(params: &[Ar1Params], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["instrument_id", "phi", "intercept"])?;
    for p in params {
        w.write_record([p.instrument_id.clone(), p.phi.to_string(), p.intercept.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Granularity;

    fn series(values: Vec<f64>) -> PriceSeries {
        PriceSeries::new("x", Granularity::Daily, (0..values.len() as i64).collect(), values).unwrap()
    }

    #[test]
    fn chance_ratio_examples() {
        let rising = series((1..20).map(f64::from).collect());
        assert_eq!(fit_chance(&[rising], 0).unwrap().up_ratio, 1.0);
        let alternating = series((0..21).map(|i| if i % 2 == 0 { 10.0 } else { 11.0 }).collect());
        assert_eq!(fit_chance(&[alternating], 0).unwrap().up_ratio, 0.5);
        let mut v = vec![100.0];
        for i in 0..100 {
            let last = *v.last().unwrap();
            v.push(if i < 53 { last + 1.0 } else { last - 1.0 });
        }
        assert!((fit_chance(&[series(v)], 0).unwrap().up_ratio - 0.53).abs() < 1e-15);
        assert_eq!(fit_chance(&[series(vec![5.0; 10])], 0), Err(BaselineError::NoChanges));
    }

    #[test]
    fn chance_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let always = ChanceModel { up_ratio: 1.0, seed: 0 };
        let never = ChanceModel { up_ratio: 0.0, seed: 0 };
        assert!((0..1000).all(|_| chance_predict(&always, &mut rng) == Direction::Up));
        assert!((0..1000).all(|_| chance_predict(&never, &mut rng) == Direction::Down));
        let m = ChanceModel { up_ratio: 0.53, seed: 7 };
        let mut r = m.rng();
        let ups = (0..100_000).filter(|_| chance_predict(&m, &mut r) == Direction::Up).count();
        assert!((ups as f64 / 1e5 - 0.53).abs() < 0.005);
        let (mut a, mut b) = (m.rng(), m.rng());
        assert!((0..100).all(|_| chance_predict(&m, &mut a) == chance_predict(&m, &mut b)));
    }

    #[test]
    fn constant_series_is_degenerate() {
        let err = fit_ar1(&series(vec![7.0; 30]), 100, Ar1Options::default()).unwrap_err();
        assert!(matches!(err, BaselineError::DegenerateFit { .. }));
        let err = fit_ar1(&series(vec![1.0, 2.0, 3.0]), 100, Ar1Options::default()).unwrap_err();
        assert!(matches!(err, BaselineError::InsufficientData { points: 3, .. }));
    }

    #[test]
    fn cutoff_limits_the_fit() {
        // before index 20 the differences follow phi = 0.5; afterwards something else
        let mut v = vec![100.0, 101.0];
        for t in 2..40 {
            let d = v[t - 1] - v[t - 2];
            v.push(v[t - 1] + if t < 20 { 0.5 * d } else { -d + 0.3 });
        }
        let p = fit_ar1(&series(v), 20, Ar1Options::default()).unwrap();
        assert!((p.phi - 0.5).abs() < 1e-9);
        assert_eq!(p.observations, 18);
    }

    #[test]
    fn forecast_unrolls() {
        let opts = Ar1Options::default();
        let flat = Ar1Params::random_walk("a", opts);
        assert_eq!(ar1_forecast(&flat, &[10.0, 12.0], 3).unwrap(), vec![12.0; 3]);
        let unit = Ar1Params { phi: 1.0, ..flat.clone() };
        assert_eq!(ar1_forecast(&unit, &[10.0, 12.0], 3).unwrap(), vec![14.0, 16.0, 18.0]);
        let half = Ar1Params { phi: 0.5, ..flat.clone() };
        assert_eq!(ar1_forecast(&half, &[10.0, 12.0], 3).unwrap(), vec![13.0, 13.5, 13.75]);
        assert_eq!(ar1_forecast(&half, &[10.0], 3), Err(BaselineError::ShortContext(1)));
    }

    #[test]
    fn forecast_increments_shrink_geometrically() {
        let p = Ar1Params { phi: -0.7, ..Ar1Params::random_walk("a", Ar1Options::default()) };
        let f = ar1_forecast(&p, &[50.0, 53.0], 30).unwrap();
        let inc: Vec<f64> = std::iter::once(f[0] - 53.0).chain(f.windows(2).map(|w| w[1] - w[0])).collect();
        for w in inc.windows(2) {
            assert!((w[1].abs() - 0.7 * w[0].abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn log_variant_round_trips_through_exp() {
        let opts = Ar1Options { intercept: false, log_differences: true };
        let mut v: Vec<f64> = vec![100.0, 110.0];
        for t in 2..30 {
            let r = (v[t - 1] / v[t - 2]).ln();
            v.push(v[t - 1] * (0.25 * r).exp());
        }
        let p = fit_ar1(&series(v.clone()), 1000, opts).unwrap();
        assert!((p.phi - 0.25).abs() < 1e-9);
        let f = ar1_forecast(&p, &v, 1).unwrap();
        let r_last = (v[29] / v[28]).ln();
        assert!((f[0] - v[29] * (0.25 * r_last).exp()).abs() < 1e-9);
    }

    #[test]
    fn csv_export() {
        let p = Ar1Params { phi: 0.5, intercept: -0.25, ..Ar1Params::random_walk("AAPL", Ar1Options::default()) };
        let mut buf = Vec::new();
        write_ar1_csv(&[p], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "instrument_id,phi,intercept\nAAPL,0.5,-0.25\n");
    }
}
