//! Stepwise directional evaluation.
//!
//! From a ground-truth context ending at `y_{c+(k-1)h}`, the predictor
//! forecasts `h` points; the step is scored by comparing the sign of
//! `ŷ_{c+kh} − y_{c+(k-1)h}` with that of `y_{c+kh} − y_{c+(k-1)h}`. The
//! context is re-anchored to ground truth before every step.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PriceSeries;
use crate::forecast::{ForecastError, ForecastQuery, Forecaster};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{instrument}: {len} points, need at least {need} for one window")]
    SeriesTooShort { instrument: String, len: usize, need: usize },
    #[error("no outcomes to score")]
    EmptyOutcomes,
    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),
    #[error("{instrument}: forecast returned {got} points, expected {expected}")]
    ShortForecast { instrument: String, got: usize, expected: usize },
    #[error("{instrument}: {source}")]
    Forecast { instrument: String, source: ForecastError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Up,
    Down,
}

/// How zero price changes are classified.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieRule {
    /// A zero change counts as "down".
    #[default]
    Down,
    /// Outcomes with a zero predicted or actual change are dropped.
    Exclude,
}

impl TieRule {
    pub fn classify(self, change: f64) -> Option<Direction> {
        if change > 0.0 {
            Some(Direction::Up)
        } else if change < 0.0 || self == TieRule::Down {
            Some(Direction::Down)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    /// Ground-truth points fed to the predictor before each step.
    pub context_len: usize,
    /// Total horizon `H` covered by one window.
    pub total_horizon: usize,
    /// Step horizons `h` to sweep.
    pub horizons: Vec<usize>,
    pub tie_rule: TieRule,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self { context_len: 512, total_horizon: 128, horizons: vec![2, 4, 8, 16, 32, 64, 128], tie_rule: TieRule::Down }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.context_len == 0 || self.total_horizon == 0 {
            return Err(EvalError::InvalidProtocol("context_len and total_horizon must be positive".into()));
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(EvalError::InvalidProtocol("horizons must be a non-empty set of positive integers".into()));
        }
        Ok(())
    }

    /// `K = ⌈H/h⌉`.
    pub fn steps(&self, h: usize) -> usize {
        self.total_horizon.div_ceil(h)
    }

    /// Points after the window origin that one window of step `h` consumes.
    pub fn span(&self, h: usize) -> usize {
        self.steps(h) * h
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionalOutcome {
    pub instrument_id: String,
    pub horizon: usize,
    /// 1-based step index `k` inside the window.
    pub step: usize,
    /// Series index of the anchor `y_{c+(k-1)h}`.
    pub anchor: usize,
    pub predicted: Direction,
    pub actual: Direction,
}

impl DirectionalOutcome {
    pub fn correct(&self) -> bool {
        self.predicted == self.actual
    }
}

/// One window: the first prediction targets index `origin`, which needs
/// `origin ≥ context_len` and `origin + K·h ≤ len`.
pub fn stepwise_eval(
    forecaster: &dyn Forecaster,
    series: &PriceSeries,
    origin: usize,
    h: usize,
    protocol: &EvalProtocol,
) -> Result<Vec<DirectionalOutcome>, EvalError> {
    let y = series.values();
    let id = series.instrument_id();
    let need = origin.max(protocol.context_len) + protocol.span(h);
    if origin < protocol.context_len || need > y.len() {
        return Err(EvalError::SeriesTooShort { instrument: id.into(), len: y.len(), need });
    }
    let mut out = Vec::with_capacity(protocol.steps(h));
    for k in 1..=protocol.steps(h) {
        let known = origin + (k - 1) * h;
        let history = &y[known - protocol.context_len..known];
        let query = ForecastQuery { instrument_id: id, history, origin: known, horizon: h };
        let forecast = forecaster
            .forecast(&query)
            .map_err(|source| EvalError::Forecast { instrument: id.into(), source })?;
        if forecast.len() < h {
            return Err(EvalError::ShortForecast { instrument: id.into(), got: forecast.len(), expected: h });
        }
        // scoring reads the future only after the forecast exists
        let anchor = y[known - 1];
        let predicted = protocol.tie_rule.classify(forecast[h - 1] - anchor);
        let actual = protocol.tie_rule.classify(y[known + h - 1] - anchor);
        if let (Some(predicted), Some(actual)) = (predicted, actual) {
            out.push(DirectionalOutcome { instrument_id: id.into(), horizon: h, step: k, anchor: known - 1, predicted, actual });
        }
    }
    Ok(out)
}

/// Window origins for one series: non-overlapping windows whose first
/// target is at or after `first_target` (typically the cutoff index).
pub fn window_origins(len: usize, first_target: usize, h: usize, protocol: &EvalProtocol) -> Vec<usize> {
    let span = protocol.span(h).max(protocol.total_horizon);
    let mut origin = first_target.max(protocol.context_len);
    let mut out = Vec::new();
    while origin + protocol.span(h) <= len {
        out.push(origin);
        origin += span;
    }
    out
}

/// Up/down confusion counts, "up" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_up: usize,
    pub false_up: usize,
    pub true_down: usize,
    pub false_down: usize,
}

impl Confusion {
    pub fn from_outcomes(outcomes: &[DirectionalOutcome]) -> Self {
        let mut c = Self::default();
        for o in outcomes {
            match (o.predicted, o.actual) {
                (Direction::Up, Direction::Up) => c.true_up += 1,
                (Direction::Up, Direction::Down) => c.false_up += 1,
                (Direction::Down, Direction::Down) => c.true_down += 1,
                (Direction::Down, Direction::Up) => c.false_down += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.true_up + self.false_up + self.true_down + self.false_down
    }

    pub fn accuracy(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| (self.true_up + self.true_down) as f64 / n as f64)
    }

    /// Mean of the per-class F1 scores. A class that never occurs in either
    /// predictions or labels is left out of the mean.
    pub fn macro_f1(&self) -> Option<f64> {
        if self.total() == 0 {
            return None;
        }
        let f1 = |tp: usize, fp: usize, fn_: usize| {
            let denom = 2 * tp + fp + fn_;
            (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
        };
        let scores: Vec<f64> = [
            f1(self.true_up, self.false_up, self.false_down),
            f1(self.true_down, self.false_down, self.false_up),
        ]
        .into_iter()
        .flatten()
        .collect();
        Some(scores.iter().sum::<f64>() / scores.len() as f64)
    }

    /// Fraction of outcomes whose actual direction is up.
    pub fn actual_up_fraction(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| (self.true_up + self.false_down) as f64 / n as f64)
    }
}

pub fn accuracy(outcomes: &[DirectionalOutcome]) -> Result<f64, EvalError> {
    Confusion::from_outcomes(outcomes).accuracy().ok_or(EvalError::EmptyOutcomes)
}

pub fn macro_f1(outcomes: &[DirectionalOutcome]) -> Result<f64, EvalError> {
    Confusion::from_outcomes(outcomes).macro_f1().ok_or(EvalError::EmptyOutcomes)
}

/// Expected accuracy `p·q + (1−p)(1−q)` of a guesser saying "up" with
/// probability `p = up_ratio` on labels whose up fraction is `q`.
pub fn chance_rate_from_fraction(up_ratio: f64, actual_up: f64) -> f64 {
    up_ratio * actual_up + (1.0 - up_ratio) * (1.0 - actual_up)
}

pub fn chance_rate(outcomes: &[DirectionalOutcome], up_ratio: f64) -> Result<f64, EvalError> {
    let q = Confusion::from_outcomes(outcomes).actual_up_fraction().ok_or(EvalError::EmptyOutcomes)?;
    Ok(chance_rate_from_fraction(up_ratio, q))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub horizon: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub chance_rate: f64,
    pub n_outcomes: usize,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<HorizonRow>,
    /// Instruments too short for even one window.
    pub skipped: Vec<String>,
}

impl EvalReport {
    /// `horizon,accuracy,macro_f1,chance_rate,n_outcomes`
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["horizon", "accuracy", "macro_f1", "chance_rate", "n_outcomes"])?;
        for r in &self.rows {
            w.write_record([
                r.horizon.to_string(),
                r.accuracy.to_string(),
                r.macro_f1.to_string(),
                r.chance_rate.to_string(),
                r.n_outcomes.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Long-format `metric,horizon,value` rows for accuracy/F1-vs-horizon charts.
    pub fn write_plot_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "horizon", "value"])?;
        for (metric, get) in [
            ("accuracy", (|r: &HorizonRow| r.accuracy) as fn(&HorizonRow) -> f64),
            ("macro_f1", |r| r.macro_f1),
            ("chance_rate", |r| r.chance_rate),
        ] {
            for r in &self.rows {
                w.write_record([metric.to_string(), r.horizon.to_string(), get(r).to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Pools outcomes over every series and window for each horizon. Windows
/// start at `first_target(series)`, e.g. the series' cutoff index, so that
/// scored points are never earlier than it.
pub fn evaluate(
    forecaster: &dyn Forecaster,
    series: &[PriceSeries],
    protocol: &EvalProtocol,
    up_ratio: f64,
    first_target: &(dyn Fn(&PriceSeries) -> usize + Sync),
) -> Result<EvalReport, EvalError> {
    protocol.validate()?;
    let mut skipped = Vec::new();
    let mut rows = Vec::new();
    for &h in &protocol.horizons {
        let per_series: Vec<Result<Option<Vec<DirectionalOutcome>>, EvalError>> = series
            .par_iter()
            .map(|s| {
                let origins = window_origins(s.len(), first_target(s), h, protocol);
                if origins.is_empty() {
                    return Ok(None);
                }
                let mut out = Vec::new();
                for o in origins {
                    out.extend(stepwise_eval(forecaster, s, o, h, protocol)?);
                }
                Ok(Some(out))
            })
            .collect();
        let mut outcomes = Vec::new();
        for (s, r) in series.iter().zip(per_series) {
            match r? {
                Some(o) => outcomes.extend(o),
                None => {
                    if !skipped.contains(&s.instrument_id().to_string()) {
                        skipped.push(s.instrument_id().to_string());
                    }
                }
            }
        }
        let confusion = Confusion::from_outcomes(&outcomes);
        let (Some(acc), Some(f1), Some(q)) = (confusion.accuracy(), confusion.macro_f1(), confusion.actual_up_fraction())
        else {
            return Err(EvalError::EmptyOutcomes);
        };
        rows.push(HorizonRow {
            horizon: h,
            accuracy: acc,
            macro_f1: f1,
            chance_rate: chance_rate_from_fraction(up_ratio, q),
            n_outcomes: confusion.total(),
            confusion,
        });
    }
    Ok(EvalReport { rows, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Granularity;
    use crate::forecast::OracleForecaster;

    fn outcome(p: Direction, a: Direction) -> DirectionalOutcome {
        DirectionalOutcome { instrument_id: "x".into(), horizon: 1, step: 1, anchor: 0, predicted: p, actual: a }
    }

    fn many(n: usize, p: Direction, a: Direction) -> Vec<DirectionalOutcome> {
        vec![outcome(p, a); n]
    }

    use Direction::{Down, Up};

    #[test]
    fn macro_f1_of_the_always_up_predictor() {
        let mut o = many(90, Up, Up);
        o.extend(many(10, Up, Down));
        let f1 = macro_f1(&o).unwrap();
        assert!((f1 - 0.474).abs() < 0.001, "{f1}");
        assert_eq!(accuracy(&o).unwrap(), 0.9);
    }

    #[test]
    fn metric_examples() {
        let mut o = many(5, Up, Up);
        o.extend(many(5, Down, Down));
        assert_eq!(accuracy(&o).unwrap(), 1.0);
        assert_eq!(macro_f1(&o).unwrap(), 1.0);
        assert_eq!(macro_f1(&many(4, Up, Up)).unwrap(), 1.0);
        let mut half = many(5, Up, Down);
        half.extend(many(5, Up, Up));
        assert_eq!(accuracy(&half).unwrap(), 0.5);
        let mut o = many(530, Up, Up);
        o.extend(many(470, Up, Down));
        assert_eq!(accuracy(&o).unwrap(), 0.53);
        assert!(matches!(accuracy(&[]), Err(EvalError::EmptyOutcomes)));
        assert!(matches!(macro_f1(&[]), Err(EvalError::EmptyOutcomes)));
    }

    #[test]
    fn chance_rate_examples() {
        assert!((chance_rate_from_fraction(0.53, 0.53) - 0.5018).abs() < 1e-12);
        for p in [0.0, 0.3, 0.9] {
            assert!((chance_rate_from_fraction(p, 0.5) - 0.5).abs() < 1e-15);
        }
        assert_eq!(chance_rate(&many(3, Down, Up), 1.0).unwrap(), 1.0);
    }

    #[test]
    fn tie_rules() {
        assert_eq!(TieRule::Down.classify(0.0), Some(Down));
        assert_eq!(TieRule::Exclude.classify(0.0), None);
        assert_eq!(TieRule::Exclude.classify(-1.0), Some(Down));
        assert_eq!(TieRule::Down.classify(1e-300), Some(Up));
    }

    struct Flat;
    impl Forecaster for Flat {
        fn name(&self) -> &str {
            "flat"
        }
        fn forecast(&self, q: &ForecastQuery<'_>) -> Result<Vec<f64>, ForecastError> {
            Ok(vec![*q.history.last().unwrap(); q.horizon])
        }
    }

    fn rising(n: usize) -> PriceSeries {
        PriceSeries::new("r", Granularity::Daily, (0..n as i64).collect(), (1..=n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn protocol_examples() {
        let p = EvalProtocol { context_len: 16, ..EvalProtocol::default() };
        let s = rising(16 + 128);
        let oracle = OracleForecaster::new(std::slice::from_ref(&s));
        let o = stepwise_eval(&oracle, &s, 16, 32, &p).unwrap();
        assert_eq!(o.len(), 4);
        assert_eq!(accuracy(&o).unwrap(), 1.0);
        let flat = stepwise_eval(&Flat, &s, 16, 8, &p).unwrap();
        assert!(flat.iter().all(|x| x.predicted == Down && x.actual == Up));
        assert_eq!(accuracy(&flat).unwrap(), 0.0);
        let excl = EvalProtocol { tie_rule: TieRule::Exclude, ..p.clone() };
        assert!(stepwise_eval(&Flat, &s, 16, 8, &excl).unwrap().is_empty());
        assert!(matches!(stepwise_eval(&Flat, &s, 17, 8, &p), Err(EvalError::SeriesTooShort { .. })));
    }

    #[test]
    fn windows_do_not_overlap() {
        let p = EvalProtocol { context_len: 10, total_horizon: 20, ..EvalProtocol::default() };
        assert_eq!(window_origins(70, 0, 4, &p), vec![10, 30, 50]);
        assert_eq!(window_origins(70, 25, 4, &p), vec![25, 45]);
        // h = 3 needs K·h = 21 points per window
        assert_eq!(window_origins(52, 0, 3, &p), vec![10, 31]);
        assert!(window_origins(29, 0, 4, &p).is_empty());
    }

    #[test]
    fn pooled_report_and_csv() {
        let p = EvalProtocol { context_len: 8, total_horizon: 16, horizons: vec![2, 16], tie_rule: TieRule::Down };
        let long = rising(8 + 32);
        let short = PriceSeries::new("s", Granularity::Daily, vec![0, 1, 2], vec![1.0, 2.0, 3.0]).unwrap();
        let set = [long, short];
        let oracle = OracleForecaster::new(&set);
        let report = evaluate(&oracle, &set, &p, 0.5, &|_| 0).unwrap();
        assert_eq!(report.skipped, vec!["s".to_string()]);
        assert_eq!(report.rows[0].n_outcomes, 16);
        assert_eq!(report.rows[1].n_outcomes, 2);
        assert!(report.rows.iter().all(|r| r.accuracy == 1.0 && r.chance_rate == 0.5));
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "horizon,accuracy,macro_f1,chance_rate,n_outcomes");
        assert_eq!(text.lines().nth(1).unwrap(), "2,1,1,0.5,16");
        let mut buf = Vec::new();
        report.write_plot_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 7);
    }
}
