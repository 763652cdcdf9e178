//! Seeded synthetic markets for tests, demos and smoke runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Granularity, PriceSeries};

/// First timestamp of every generated series (2015-01-01T00:00:00Z).
pub const EPOCH_START: i64 = 1_420_070_400;
const DAY: i64 = 86_400;

fn daily_timestamps(n: usize) -> Vec<i64> {
    (0..n as i64).map(|i| EPOCH_START + i * DAY).collect()
}

fn series_from_log(id: String, log_prices: Vec<f64>) -> PriceSeries {
    let n = log_prices.len();
    PriceSeries::new(id, Granularity::Daily, daily_timestamps(n), log_prices.into_iter().map(f64::exp).collect())
        .expect("generated prices are positive and timestamps increasing")
}

/// Geometric random walks whose log increments are `N(drift_i, vol²)`,
/// with a per-series drift drawn from `N(0, drift_scale²)`.
pub fn drifting_walks(count: usize, len: usize, vol: f64, drift_scale: f64, seed: u64) -> Vec<PriceSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drift_dist = Normal::new(0.0, drift_scale).expect("finite scale");
    let noise = Normal::new(0.0, vol).expect("finite vol");
    (0..count)
        .map(|i| {
            let drift = drift_dist.sample(&mut rng);
            let mut z = 4.0 + noise.sample(&mut rng) * 10.0;
            let path = (0..len)
                .map(|_| {
                    let v = z;
                    z += drift + noise.sample(&mut rng);
                    v
                })
                .collect();
            series_from_log(format!("walk{i:03}"), path)
        })
        .collect()
}

/// Markets whose log returns follow `r_t = phi·r_{t-1} + ε_t`,
/// `ε_t ~ N(0, vol²)`, started from the stationary distribution.
pub fn ar1_market(count: usize, len: usize, phi: f64, vol: f64, seed: u64) -> Vec<PriceSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, vol).expect("finite vol");
    let stationary = Normal::new(0.0, vol / (1.0 - phi * phi).sqrt()).expect("|phi| < 1");
    (0..count)
        .map(|i| {
            let mut r = stationary.sample(&mut rng);
            let mut z = 4.0;
            let path = (0..len)
                .map(|_| {
                    let v = z;
                    r = phi * r + noise.sample(&mut rng);
                    z += r;
                    v
                })
                .collect();
            series_from_log(format!("ar{i:03}"), path)
        })
        .collect()
}

/// Prices following `ΔP_t = intercept + phi·ΔP_{t-1} + ε_t` on a high base
/// level so they stay positive.
pub fn ar1_price_differences(len: usize, phi: f64, intercept: f64, noise_sd: f64, seed: u64) -> PriceSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sd.max(f64::MIN_POSITIVE)).expect("finite sd");
    let mut p = 10_000.0;
    let mut d = 1.0;
    let values: Vec<f64> = (0..len)
        .map(|_| {
            let v = p;
            d = intercept + phi * d + if noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            p += d;
            v
        })
        .collect();
    PriceSeries::new("ar1", Granularity::Daily, daily_timestamps(len), values).expect("positive level")
}
