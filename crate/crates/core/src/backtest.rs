//! Mock trading on h-step forecasts.
//!
//! On decision day `i` the predictor sees prices up to day `i` and
//! forecasts `P̂_{i+1..i+h}`. If `P̂_{i+h} > P̂_{i+1}` a buy of
//! `1/((h−1)T)` of capital opens on day `i+1` and is sold on day `i+h`
//! (the mirror image for `<`; no order on a tie). The order is held over
//! days `i+1..i+h−1`, each contributing `size · (P_{d+1} − P_d)/P_d`.

use std::io::{Read, Write};

use chrono::DateTime;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Granularity, PriceSeries};
use crate::forecast::{ForecastError, ForecastQuery, Forecaster};

#[derive(Debug, thiserror::Error)]
pub enum BacktestError {
    #[error("horizon {0} is too short; trading needs h ≥ 2")]
    HorizonTooShort(usize),
    #[error("missing or invalid price for asset {asset} on day {day}")]
    MissingPrice { day: usize, asset: usize },
    #[error("{0}")]
    Shape(String),
    #[error("{0} return observations, need at least 2")]
    TooFewReturns(usize),
    #[error("market has no instruments")]
    EmptyMarket,
    #[error("no common trading day leaves room for a {h}-day trade after the start")]
    NoTradingDays { h: usize },
    #[error("{instrument}: {have} points before the first traded day, need {need}")]
    InsufficientHistory { instrument: String, have: usize, need: usize },
    #[error("mixed granularities in one market")]
    MixedGranularity,
    #[error("{instrument} on day {day}: {source}")]
    Forecast { instrument: String, day: usize, source: ForecastError },
    #[error("{instrument} on day {day}: forecast has {got} points, need {need}")]
    ShortForecast { instrument: String, day: usize, got: usize, need: usize },
    #[error("report table: {0}")]
    Table(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Basic,
    Neutral,
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "basic" => Ok(Strategy::Basic),
            "neutral" => Ok(Strategy::Neutral),
            other => Err(format!("unknown strategy '{other}' (expected basic or neutral)")),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Basic => "basic",
            Strategy::Neutral => "neutral",
        })
    }
}

/// Days × assets grid of signed capital fractions. Row `d` is held from
/// the close of day `d` to the close of day `d+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionMatrix {
    pub weights: Vec<Vec<f64>>,
}

impl PositionMatrix {
    pub fn zeros(days: usize, assets: usize) -> Self {
        Self { weights: vec![vec![0.0; assets]; days] }
    }

    pub fn days(&self) -> usize {
        self.weights.len()
    }

    pub fn assets(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn row_sum(&self, day: usize) -> f64 {
        self.weights[day].iter().sum()
    }

    pub fn gross(&self, day: usize) -> f64 {
        self.weights[day].iter().map(|w| w.abs()).sum()
    }

    pub fn max_abs_row_sum(&self) -> f64 {
        (0..self.days()).map(|d| self.row_sum(d).abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Buy,
    Sell,
}

impl Side {
    pub fn sign(self) -> f64 {
        match self {
            Side::Buy => 1.0,
            Side::Sell => -1.0,
        }
    }
}

/// One round-trip order: `side` at `open_day`, reversed at `close_day`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub decision_day: usize,
    pub asset: usize,
    pub side: Side,
    pub size: f64,
    pub open_day: usize,
    pub close_day: usize,
}

/// Forecast paths per decision day: `paths[j][a]` is asset `a`'s
/// `P̂_{i+1..}` made on day `i = first_day + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DailyForecasts {
    pub first_day: usize,
    pub paths: Vec<Vec<Vec<f64>>>,
}

/// Positions and ledger of the basic strategy over a `days`-long calendar.
pub fn basic_positions(
    forecasts: &DailyForecasts,
    h: usize,
    assets: usize,
    days: usize,
) -> Result<(PositionMatrix, Vec<LedgerEntry>), BacktestError> {
    if h < 2 {
        return Err(BacktestError::HorizonTooShort(h));
    }
    if assets == 0 {
        return Err(BacktestError::EmptyMarket);
    }
    let size = 1.0 / ((h - 1) as f64 * assets as f64);
    // every order has the same size, so signed order counts keep closed books exactly flat
    let mut delta = vec![vec![0i64; assets]; days + 1];
    let mut ledger = Vec::new();
    for (j, row) in forecasts.paths.iter().enumerate() {
        let i = forecasts.first_day + j;
        if i + h >= days {
            return Err(BacktestError::Shape(format!("decision day {i} closes after the last day {}", days - 1)));
        }
        if row.len() != assets {
            return Err(BacktestError::Shape(format!("day {i}: {} forecasts for {assets} assets", row.len())));
        }
        for (a, path) in row.iter().enumerate() {
            if path.len() < h {
                return Err(BacktestError::Shape(format!("day {i}, asset {a}: path shorter than {h}")));
            }
            let side = match path[h - 1].partial_cmp(&path[0]) {
                Some(std::cmp::Ordering::Greater) => Side::Buy,
                Some(std::cmp::Ordering::Less) => Side::Sell,
                _ => continue,
            };
            let unit = if side == Side::Buy { 1 } else { -1 };
            delta[i + 1][a] += unit;
            delta[i + h][a] -= unit;
            ledger.push(LedgerEntry { decision_day: i, asset: a, side, size, open_day: i + 1, close_day: i + h });
        }
    }
    let mut weights = Vec::with_capacity(days);
    let mut running = vec![0i64; assets];
    for row in delta.iter().take(days) {
        running.iter_mut().zip(row).for_each(|(r, d)| *r += d);
        weights.push(running.iter().map(|&c| c as f64 * size).collect());
    }
    Ok((PositionMatrix { weights }, ledger))
}

/// Subtracts each day's cross-sectional mean.
pub fn neutralize(positions: &PositionMatrix) -> PositionMatrix {
    let weights = positions
        .weights
        .iter()
        .map(|row| {
            let mean = row.iter().sum::<f64>() / row.len().max(1) as f64;
            row.iter().map(|w| w - mean).collect()
        })
        .collect();
    PositionMatrix { weights }
}

/// Sum of the sizes of orders opened on `day`.
pub fn new_order_mass(ledger: &[LedgerEntry], day: usize) -> f64 {
    ledger.iter().filter(|e| e.open_day == day).map(|e| e.size).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pnl {
    /// `daily[d]` is earned from the close of day `d` to the close of day `d+1`.
    pub daily: Vec<f64>,
    pub turnover: f64,
}

/// Simple returns per day and asset: `(P_{d+1} − P_d)/P_d`; the last row
/// is all zero.
pub fn simple_returns(prices: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut r: Vec<Vec<f64>> =
        prices.windows(2).map(|w| w[0].iter().zip(&w[1]).map(|(p0, p1)| (p1 - p0) / p0).collect()).collect();
    r.push(vec![0.0; prices.last().map_or(0, Vec::len)]);
    r
}

/// Cost-free mark-to-market PnL and total turnover `Σ|Δw|` (the final
/// close-out to flat included).
pub fn compute_pnl(positions: &PositionMatrix, prices: &[Vec<f64>]) -> Result<Pnl, BacktestError> {
    let days = positions.days();
    if prices.len() != days || prices.iter().any(|r| r.len() != positions.assets()) {
        return Err(BacktestError::Shape("price grid does not match the position matrix".into()));
    }
    let valid = |p: f64| p.is_finite() && p > 0.0;
    let mut daily = vec![0.0; days];
    for (d, row) in positions.weights.iter().enumerate() {
        for (a, &w) in row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            if !valid(prices[d][a]) {
                return Err(BacktestError::MissingPrice { day: d, asset: a });
            }
            if d + 1 >= days || !valid(prices[d + 1][a]) {
                return Err(BacktestError::MissingPrice { day: d + 1, asset: a });
            }
            daily[d] += w * (prices[d + 1][a] - prices[d][a]) / prices[d][a];
        }
    }
    let mut turnover = 0.0;
    let mut prev = vec![0.0; positions.assets()];
    for row in positions.weights.iter().chain(std::iter::once(&vec![0.0; positions.assets()])) {
        turnover += row.iter().zip(&prev).map(|(w, p)| (w - p).abs()).sum::<f64>();
        prev.clone_from(row);
    }
    Ok(Pnl { daily, turnover })
}

/// PnL booked on each order's close day. For the neutral strategy every
/// order carries its share of the daily mean subtraction.
pub fn realized_pnl(ledger: &[LedgerEntry], returns: &[Vec<f64>], strategy: Strategy) -> Vec<f64> {
    let mut out = vec![0.0; returns.len()];
    let mean: Vec<f64> = returns.iter().map(|r| r.iter().sum::<f64>() / r.len().max(1) as f64).collect();
    for e in ledger {
        let pnl: f64 = (e.open_day..e.close_day)
            .map(|d| {
                let r = returns[d][e.asset];
                match strategy {
                    Strategy::Basic => r,
                    Strategy::Neutral => r - mean[d],
                }
            })
            .sum();
        out[e.close_day] += e.side.sign() * e.size * pnl;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    /// `None` when volatility is zero.
    pub ann_sharpe: Option<f64>,
    pub max_drawdown: f64,
    pub ann_returns: f64,
    pub ann_volatility: f64,
    /// `None` when nothing was traded.
    pub neutral_cost_pct: Option<f64>,
    pub daily_returns: Vec<f64>,
    pub cumulative_pnl: Vec<f64>,
    pub total_turnover: f64,
    pub total_pnl: f64,
}

/// Annualized metrics with a sample standard deviation; drawdowns are
/// measured from a starting PnL of zero.
pub fn report(daily: &[f64], turnover: f64, periods_per_year: f64) -> Result<BacktestReport, BacktestError> {
    let n = daily.len();
    if n < 2 {
        return Err(BacktestError::TooFewReturns(n));
    }
    let mean = daily.iter().sum::<f64>() / n as f64;
    let constant = daily.iter().all(|&r| r == daily[0]);
    let std = if constant { 0.0 } else { (daily.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() };
    let ann_returns = mean * periods_per_year;
    let ann_volatility = std * periods_per_year.sqrt();
    let mut cumulative_pnl = Vec::with_capacity(n);
    let (mut cum, mut peak, mut max_drawdown) = (0.0_f64, 0.0_f64, 0.0_f64);
    for r in daily {
        cum += r;
        peak = peak.max(cum);
        max_drawdown = max_drawdown.min(cum - peak);
        cumulative_pnl.push(cum);
    }
    Ok(BacktestReport {
        ann_sharpe: (ann_volatility > 0.0).then(|| ann_returns / ann_volatility),
        max_drawdown,
        ann_returns,
        ann_volatility,
        neutral_cost_pct: (turnover > 0.0).then(|| 100.0 * cum / turnover),
        daily_returns: daily.to_vec(),
        cumulative_pnl,
        total_turnover: turnover,
        total_pnl: cum,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestConfig {
    pub horizon: usize,
    pub strategy: Strategy,
    /// First decision day is the first common trading day at or after this timestamp.
    pub start: i64,
    pub context_len: usize,
}

/// Invariant checks surfaced next to the metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub max_abs_row_sum: f64,
    /// Every daily row sums to zero within 1e-12.
    pub row_sum_zero: bool,
    pub max_new_order_mass: f64,
    pub max_gross: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestResult {
    pub report: BacktestReport,
    pub positions: PositionMatrix,
    pub ledger: Vec<LedgerEntry>,
    /// Common trading days (timestamps).
    pub calendar: Vec<i64>,
    pub first_decision_day: usize,
    /// PnL booked per calendar day on order close.
    pub realized: Vec<f64>,
    pub audit: Audit,
    pub granularity: Granularity,
}

impl BacktestResult {
    /// Calendar days covered by `report.daily_returns`.
    pub fn report_days(&self) -> std::ops::Range<usize> {
        self.first_decision_day + 1..self.calendar.len() - 1
    }
}

/// Timestamps present in every series.
pub fn common_calendar(market: &[PriceSeries]) -> Vec<i64> {
    let Some((first, rest)) = market.split_first() else {
        return Vec::new();
    };
    first
        .timestamps()
        .iter()
        .copied()
        .filter(|t| rest.iter().all(|s| s.timestamps().binary_search(t).is_ok()))
        .collect()
}

/// Walks the common calendar from `config.start`, forecasting each asset
/// on each decision day from its own ground truth up to that day.
pub fn run_backtest(
    forecaster: &dyn Forecaster,
    market: &[PriceSeries],
    config: &BacktestConfig,
) -> Result<BacktestResult, BacktestError> {
    let h = config.horizon;
    if h < 2 {
        return Err(BacktestError::HorizonTooShort(h));
    }
    let granularity = market.first().ok_or(BacktestError::EmptyMarket)?.granularity();
    if market.iter().any(|s| s.granularity() != granularity) {
        return Err(BacktestError::MixedGranularity);
    }
    let calendar = common_calendar(market);
    let days = calendar.len();
    let first = calendar.partition_point(|&t| t < config.start);
    if first + h >= days {
        return Err(BacktestError::NoTradingDays { h });
    }
    let last = days - 1 - h;
    // index of every calendar day inside each asset's own series
    let index: Vec<Vec<usize>> = market
        .iter()
        .map(|s| calendar.iter().map(|t| s.timestamps().binary_search(t).expect("common day")).collect())
        .collect();
    let need = config.context_len + h;
    for (s, idx) in market.iter().zip(&index) {
        let have = idx[first] + 1;
        if have < need {
            return Err(BacktestError::InsufficientHistory { instrument: s.instrument_id().into(), have, need });
        }
    }

    let paths: Vec<Vec<Vec<f64>>> = (first..=last)
        .into_par_iter()
        .map(|i| {
            market
                .iter()
                .zip(&index)
                .map(|(s, idx)| {
                    let origin = idx[i] + 1;
                    let query = ForecastQuery {
                        instrument_id: s.instrument_id(),
                        history: &s.values()[origin - config.context_len..origin],
                        origin,
                        horizon: h,
                    };
                    let path = forecaster.forecast(&query).map_err(|source| BacktestError::Forecast {
                        instrument: s.instrument_id().into(),
                        day: i,
                        source,
                    })?;
                    if path.len() < h {
                        return Err(BacktestError::ShortForecast {
                            instrument: s.instrument_id().into(),
                            day: i,
                            got: path.len(),
                            need: h,
                        });
                    }
                    Ok(path)
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let forecasts = DailyForecasts { first_day: first, paths };

    let (basic, ledger) = basic_positions(&forecasts, h, market.len(), days)?;
    let positions = match config.strategy {
        Strategy::Basic => basic,
        Strategy::Neutral => neutralize(&basic),
    };
    let prices: Vec<Vec<f64>> =
        (0..days).map(|d| market.iter().zip(&index).map(|(s, idx)| s.values()[idx[d]]).collect()).collect();
    let pnl = compute_pnl(&positions, &prices)?;
    let realized = realized_pnl(&ledger, &simple_returns(&prices), config.strategy);
    let report = report(&pnl.daily[first + 1..days - 1], pnl.turnover, granularity.periods_per_year())?;
    let max_abs_row_sum = positions.max_abs_row_sum();
    let audit = Audit {
        max_abs_row_sum,
        row_sum_zero: max_abs_row_sum <= 1e-12,
        max_new_order_mass: (0..days).map(|d| new_order_mass(&ledger, d)).fold(0.0, f64::max),
        max_gross: (0..days).map(|d| positions.gross(d)).fold(0.0, f64::max),
    };
    Ok(BacktestResult { report, positions, ledger, calendar, first_decision_day: first, realized, audit, granularity })
}

pub const TABLE_COLUMNS: [&str; 6] =
    ["Horizon", "Ann Sharpe", "Max Drawdown", "Ann Returns", "Ann Volatility", "Neutral Cost (%)"];

/// One row of the per-horizon metric table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub horizon: usize,
    pub ann_sharpe: Option<f64>,
    pub max_drawdown: f64,
    pub ann_returns: f64,
    pub ann_volatility: f64,
    pub neutral_cost_pct: Option<f64>,
}

impl TableRow {
    pub fn from_report(horizon: usize, r: &BacktestReport) -> Self {
        Self {
            horizon,
            ann_sharpe: r.ann_sharpe,
            max_drawdown: r.max_drawdown,
            ann_returns: r.ann_returns,
            ann_volatility: r.ann_volatility,
            neutral_cost_pct: r.neutral_cost_pct,
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the metric table; missing values are empty fields.
pub fn write_table_csv<W: Write>(rows: &[TableRow], out: W) -> Result<(), BacktestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TABLE_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.horizon.to_string(),
            opt(r.ann_sharpe),
            r.max_drawdown.to_string(),
            r.ann_returns.to_string(),
            r.ann_volatility.to_string(),
            opt(r.neutral_cost_pct),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads a table written by [`write_table_csv`] (or typed by hand with
/// the same header).
pub fn read_table_csv<R: Read>(input: R) -> Result<Vec<TableRow>, BacktestError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != TABLE_COLUMNS {
        return Err(BacktestError::Table(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |col: &str| BacktestError::Table(format!("row {}: bad {col}", line + 1));
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(TABLE_COLUMNS[i]));
        let maybe = |i: usize| if rec[i].is_empty() { Ok(None) } else { num(i).map(Some) };
        rows.push(TableRow {
            horizon: rec[0].parse().map_err(|_| bad(TABLE_COLUMNS[0]))?,
            ann_sharpe: maybe(1)?,
            max_drawdown: num(2)?,
            ann_returns: num(3)?,
            ann_volatility: num(4)?,
            neutral_cost_pct: maybe(5)?,
        });
    }
    Ok(rows)
}

fn format_timestamp(ts: i64, g: Granularity) -> String {
    let dt = DateTime::from_timestamp(ts, 0).unwrap_or_default();
    match g {
        Granularity::Daily => dt.format("%Y-%m-%d").to_string(),
        Granularity::Hourly => dt.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
    }
}

/// `date,cum_pnl` of the realized (close-booked) PnL over the traded days.
pub fn write_pnl_plot_csv<W: Write>(result: &BacktestResult, out: W) -> Result<(), BacktestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "cum_pnl"])?;
    let mut cum = 0.0;
    for d in result.first_decision_day + 1..result.calendar.len() {
        cum += result.realized[d];
        w.write_record([format_timestamp(result.calendar[d], result.granularity), cum.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Market × predictor matrix of one metric; missing cells are empty.
pub fn write_comparison_csv<W: Write>(
    markets: &[String],
    predictors: &[String],
    values: &[Vec<Option<f64>>],
    out: W,
) -> Result<(), BacktestError> {
    if values.len() != markets.len() || values.iter().any(|r| r.len() != predictors.len()) {
        return Err(BacktestError::Shape("comparison matrix does not match its labels".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(std::iter::once("market").chain(predictors.iter().map(String::as_str)))?;
    for (m, row) in markets.iter().zip(values) {
        w.write_record(std::iter::once(m.clone()).chain(row.iter().map(|v| opt(*v))))?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
