//! Price series ingestion and leak-free temporal splitting.
//!
//! Series are read from `timestamp,close` CSV files (UTC epoch seconds, decimal
//! close), one instrument per file, laid out as
//! `<granularity>/<market>/<instrument>.csv` under a data root.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("non-positive price {value} at row {row}")]
    NonPositivePrice { row: usize, value: f64 },
    #[error("duplicate timestamp {timestamp}")]
    DuplicateTimestamp { timestamp: i64 },
    #[error("timestamp {next} follows {previous}")]
    Unsorted { previous: i64, next: i64 },
    #[error("series {instrument} has {len} points, need at least 2")]
    TooShort { instrument: String, len: usize },
    #[error("timestamps and values differ in length ({timestamps} vs {values})")]
    LengthMismatch { timestamps: usize, values: usize },
    #[error("{side} side of the split has {len} points, need at least 2")]
    EmptySide { side: SplitSide, len: usize },
    #[error("split of {pool} series with validation fraction {fraction} leaves an empty side")]
    EmptySplit { pool: usize, fraction: f64 },
    #[error("validation fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("unknown granularity `{0}` (expected daily or hourly)")]
    UnknownGranularity(String),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSide {
    Pre,
    Post,
}

impl fmt::Display for SplitSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitSide::Pre => f.write_str("pre-cutoff"),
            SplitSide::Post => f.write_str("post-cutoff"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Daily,
    Hourly,
}

impl Granularity {
    /// Observation periods per year used to annualize returns.
    pub fn periods_per_year(self) -> f64 {
        match self {
            Granularity::Daily => 252.0,
            Granularity::Hourly => 24.0 * 365.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Daily => "daily",
            Granularity::Hourly => "hourly",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Granularity {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "daily" => Ok(Granularity::Daily),
            "hourly" => Ok(Granularity::Hourly),
            other => Err(DataError::UnknownGranularity(other.to_string())),
        }
    }
}

/// One instrument's close prices at a fixed granularity.
///
/// Invariants (checked by [`PriceSeries::new`]): at least two points,
/// strictly increasing timestamps, strictly positive finite prices.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    instrument_id: String,
    granularity: Granularity,
    timestamps: Vec<i64>,
    values: Vec<f64>,
}

impl PriceSeries {
    pub fn new(
        instrument_id: impl Into<String>,
        granularity: Granularity,
        timestamps: Vec<i64>,
        values: Vec<f64>,
    ) -> Result<Self, DataError> {
        let instrument_id = instrument_id.into();
        if timestamps.len() != values.len() {
            return Err(DataError::LengthMismatch {
                timestamps: timestamps.len(),
                values: values.len(),
            });
        }
        if let Some((row, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(DataError::NonPositivePrice { row: row + 1, value });
        }
        for pair in timestamps.windows(2) {
            if pair[1] == pair[0] {
                return Err(DataError::DuplicateTimestamp { timestamp: pair[0] });
            }
            if pair[1] < pair[0] {
                return Err(DataError::Unsorted { previous: pair[0], next: pair[1] });
            }
        }
        if values.len() < 2 {
            return Err(DataError::TooShort { instrument: instrument_id, len: values.len() });
        }
        Ok(Self { instrument_id, granularity, timestamps, values })
    }

    pub fn instrument_id(&self) -> &str {
        &self.instrument_id
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the first point at or after `timestamp`, or `len()` if none.
    pub fn first_index_at_or_after(&self, timestamp: i64) -> usize {
        self.timestamps.partition_point(|&t| t < timestamp)
    }
}

/// Epoch seconds of midnight UTC on `date`.
pub fn date_to_timestamp(date: NaiveDate) -> i64 {
    date.and_hms_opt(0, 0, 0)
        .expect("midnight is a valid time")
        .and_utc()
        .timestamp()
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    timestamp: String,
    close: String,
}

/// Reads a `timestamp,close` CSV. Rows are sorted by timestamp if needed.
pub fn load_series_csv(path: &Path, granularity: Granularity) -> Result<PriceSeries, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let instrument = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_series_csv(file, instrument, granularity)
}

pub fn read_series_csv<R: Read>(
    reader: R,
    instrument_id: impl Into<String>,
    granularity: Granularity,
) -> Result<PriceSeries, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| DataError::MalformedRow { line: 1, reason: e.to_string() })?
        .clone();
    if headers.len() != 2 || &headers[0] != "timestamp" || &headers[1] != "close" {
        return Err(DataError::MalformedRow {
            line: 1,
            reason: format!("expected header `timestamp,close`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }

    let mut rows: Vec<(i64, f64)> = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| DataError::MalformedRow {
            line: e.position().map_or(row as u64 + 1, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(row as u64 + 1, |p| p.line());
        let parsed: CsvRow = record
            .deserialize(Some(&headers))
            .map_err(|e| DataError::MalformedRow { line, reason: e.to_string() })?;
        let timestamp: i64 = parsed.timestamp.parse().map_err(|_| DataError::MalformedRow {
            line,
            reason: format!("bad timestamp `{}`", parsed.timestamp),
        })?;
        let close: f64 = parsed.close.parse().map_err(|_| DataError::MalformedRow {
            line,
            reason: format!("bad close `{}`", parsed.close),
        })?;
        if !(close.is_finite() && close > 0.0) {
            return Err(DataError::NonPositivePrice { row, value: close });
        }
        rows.push((timestamp, close));
    }

    rows.sort_by_key(|&(t, _)| t);
    let (timestamps, values) = rows.into_iter().unzip();
    PriceSeries::new(instrument_id, granularity, timestamps, values)
}

/// Writes the series as `timestamp,close`. Prices use the shortest
/// representation that parses back to the same `f64`.
pub fn write_series_csv<W: Write>(series: &PriceSeries, writer: W) -> Result<(), DataError> {
    let io_err = |e: csv::Error| DataError::Io {
        path: PathBuf::from(series.instrument_id()),
        source: std::io::Error::other(e),
    };
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["timestamp", "close"]).map_err(io_err)?;
    for (t, v) in series.timestamps.iter().zip(&series.values) {
        wtr.write_record([t.to_string(), v.to_string()]).map_err(io_err)?;
    }
    wtr.flush().map_err(|source| DataError::Io {
        path: PathBuf::from(series.instrument_id()),
        source,
    })
}

/// Partitions a series at `cutoff` (epoch seconds). Points strictly before
/// the cutoff go to `pre`; the boundary point itself belongs to `post`.
pub fn split_by_cutoff(
    series: &PriceSeries,
    cutoff: i64,
) -> Result<(PriceSeries, PriceSeries), DataError> {
    let at = series.first_index_at_or_after(cutoff);
    let (pre_len, post_len) = (at, series.len() - at);
    if pre_len < 2 {
        return Err(DataError::EmptySide { side: SplitSide::Pre, len: pre_len });
    }
    if post_len < 2 {
        return Err(DataError::EmptySide { side: SplitSide::Post, len: post_len });
    }
    let part = |range: std::ops::Range<usize>| PriceSeries {
        instrument_id: series.instrument_id.clone(),
        granularity: series.granularity,
        timestamps: series.timestamps[range.clone()].to_vec(),
        values: series.values[range].to_vec(),
    };
    Ok((part(0..at), part(at..series.len())))
}

/// Pre-cutoff training pool and post-cutoff test series.
#[derive(Debug, Clone)]
pub struct SeriesSplit {
    pub train: Vec<PriceSeries>,
    pub validation: Vec<PriceSeries>,
    pub test: Vec<PriceSeries>,
    pub cutoff: i64,
}

/// Whole-series holdout: shuffles the pool with `seed` and assigns the first
/// `round(val_fraction * n)` series to validation.
pub fn train_val_split(
    pool: &[PriceSeries],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<PriceSeries>, Vec<PriceSeries>), DataError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DataError::InvalidFraction(val_fraction));
    }
    let n_val = (val_fraction * pool.len() as f64).round() as usize;
    if n_val == 0 || n_val >= pool.len() {
        return Err(DataError::EmptySplit { pool: pool.len(), fraction: val_fraction });
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val_idx: HashSet<usize> = order[..n_val].iter().copied().collect();
    let (mut train, mut validation) = (Vec::new(), Vec::new());
    for (i, s) in pool.iter().enumerate() {
        if val_idx.contains(&i) {
            validation.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    Ok((train, validation))
}

/// Splits every series at the cutoff and divides the pre-cutoff pool into
/// train and validation. Pre-cutoff parts shorter than `min_len` are dropped
/// with a warning; test series keep their full history so evaluation windows
/// may use pre-cutoff context while targets stay on or after the cutoff.
pub fn build_split(
    series: &[PriceSeries],
    cutoff: i64,
    min_len: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<SeriesSplit, DataError> {
    let mut pool = Vec::new();
    let mut test = Vec::new();
    for s in series {
        let at = s.first_index_at_or_after(cutoff);
        if at >= min_len.max(2) {
            pool.push(PriceSeries {
                instrument_id: s.instrument_id.clone(),
                granularity: s.granularity,
                timestamps: s.timestamps[..at].to_vec(),
                values: s.values[..at].to_vec(),
            });
        } else {
            log::warn!("dropping {} from training pool: {} pre-cutoff points < {}", s.instrument_id, at, min_len);
        }
        if s.len() - at >= 2 {
            test.push(s.clone());
        }
    }
    let (train, validation) = train_val_split(&pool, val_fraction, seed)?;
    Ok(SeriesSplit { train, validation, test, cutoff })
}

/// One line of a data manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub granularity: Granularity,
    pub market: String,
    pub instrument: String,
    pub points: usize,
}

pub const MANIFEST_HEADER: &str = "path,granularity,market,instrument,points";

pub fn write_manifest<W: Write>(entries: &[ManifestEntry], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{MANIFEST_HEADER}")?;
    for e in entries {
        writeln!(out, "{},{},{},{},{}", e.path, e.granularity, e.market, e.instrument, e.points)?;
    }
    Ok(())
}

pub fn read_manifest(text: &str) -> Result<Vec<ManifestEntry>, DataError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, header)) if header.trim() == MANIFEST_HEADER => {}
        _ => {
            return Err(DataError::Manifest {
                line: 1,
                reason: format!("expected header `{MANIFEST_HEADER}`"),
            })
        }
    }
    lines
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = |reason: String| DataError::Manifest { line: i + 1, reason };
            if fields.len() != 5 {
                return Err(bad(format!("expected 5 fields, found {}", fields.len())));
            }
            Ok(ManifestEntry {
                path: fields[0].to_string(),
                granularity: fields[1].parse()?,
                market: fields[2].to_string(),
                instrument: fields[3].to_string(),
                points: fields[4].parse().map_err(|_| bad(format!("bad point count `{}`", fields[4])))?,
            })
        })
        .collect()
}

/// A file found while scanning a data root, with its load outcome.
#[derive(Debug)]
pub struct ScannedFile {
    pub relative_path: String,
    pub result: Result<(ManifestEntry, PriceSeries), DataError>,
}

/// Walks `<root>/<granularity>/<market>/<instrument>.csv` and loads every file.
/// Results are ordered by relative path.
pub fn scan_data_dir(root: &Path) -> Result<Vec<ScannedFile>, DataError> {
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();

    use rayon::prelude::*;
    Ok(files
        .par_iter()
        .map(|path| {
            let rel = path.strip_prefix(root).unwrap_or(path);
            let relative_path = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            let parts: Vec<&str> = relative_path.split('/').collect();
            let result = if parts.len() != 3 {
                Err(DataError::Manifest {
                    line: 0,
                    reason: format!("{relative_path}: expected <granularity>/<market>/<instrument>.csv"),
                })
            } else {
                parts[0].parse::<Granularity>().and_then(|g| {
                    let series = load_series_csv(path, g)?;
                    Ok((
                        ManifestEntry {
                            path: relative_path.clone(),
                            granularity: g,
                            market: parts[1].to_string(),
                            instrument: series.instrument_id().to_string(),
                            points: series.len(),
                        },
                        series,
                    ))
                })
            };
            ScannedFile { relative_path, result }
        })
        .collect())
}

/// Loads every series listed in a manifest, resolving paths against `root`.
pub fn load_manifest_series(
    root: &Path,
    entries: &[ManifestEntry],
) -> Result<Vec<(ManifestEntry, PriceSeries)>, DataError> {
    use rayon::prelude::*;
    entries
        .par_iter()
        .map(|e| {
            let mut s = load_series_csv(&root.join(&e.path), e.granularity)?;
            s.instrument_id = e.instrument.clone();
            Ok((e.clone(), s))
        })
        .collect()
}
