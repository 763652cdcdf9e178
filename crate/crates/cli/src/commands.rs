use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use finpatch::backtest::{
    run_backtest, write_comparison_csv, write_pnl_plot_csv, write_table_csv, BacktestConfig, BacktestError,
    BacktestResult, Strategy, TableRow,
};
use finpatch::baselines::{fit_chance, ChanceModel};
use finpatch::data::{
    build_split, load_manifest_series, read_manifest, scan_data_dir, write_manifest, ManifestEntry, PriceSeries,
};
use finpatch::eval::evaluate;
use finpatch::forecast::{Ar1Forecaster, ChanceForecaster, Forecaster, ModelForecaster, OracleForecaster};
use finpatch::model::{load_checkpoint, save_checkpoint, write_checkpoint, ForecasterState};
use finpatch::train::{train_from, TrainData, TrainError};
use serde::Serialize;

use crate::config::ChancePeriod;
use crate::{Artifacts, CliError, Outcome, RunConfig, RunManifest};

/// Shared inputs of the data-driven commands.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub config: RunConfig,
    pub config_path: Option<PathBuf>,
    pub data_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl RunContext {
    fn manifest_path(&self) -> Result<&Path, CliError> {
        self.data_manifest.as_deref().ok_or_else(|| CliError::Usage("--data-manifest is required".into()))
    }

    fn load_series(&self) -> Result<Vec<PriceSeries>, CliError> {
        load_market(&self.config, self.manifest_path()?)
    }

    fn run_manifest(&self, command: &str, seeds: Vec<u64>) -> RunManifest {
        RunManifest {
            command: command.into(),
            config_path: self.config_path.as_ref().map(|p| p.display().to_string()),
            seeds,
            data_manifest: self.data_manifest.as_ref().map(|p| p.display().to_string()),
            out_dir: self.out_dir.display().to_string(),
            artifacts: Vec::new(),
        }
    }
}

fn load_market(config: &RunConfig, manifest: &Path) -> Result<Vec<PriceSeries>, CliError> {
    let text = std::fs::read_to_string(manifest).map_err(|e| CliError::io(manifest, e))?;
    let entries = read_manifest(&text)?;
    if entries.is_empty() {
        return Err(CliError::NoData(format!("{} lists no series", manifest.display())));
    }
    let root = match &config.data_root {
        Some(r) => r.clone(),
        None => manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    Ok(load_manifest_series(&root, &entries)?.into_iter().map(|(_, s)| s).collect())
}

/// Which forecaster drives an evaluation or backtest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Predictor {
    /// A checkpoint trained by `finpatch train`.
    Model,
    /// An externally produced checkpoint (the `import_checkpoint` key).
    Import,
    /// Ratio-matched random guesser.
    Chance,
    /// Per-instrument AR(1) on price differences.
    Ar1,
    /// Perfect foresight, for harness self-checks.
    Oracle,
}

impl Predictor {
    pub fn name(self) -> &'static str {
        match self {
            Predictor::Model => "model",
            Predictor::Import => "import",
            Predictor::Chance => "chance",
            Predictor::Ar1 => "ar1",
            Predictor::Oracle => "oracle",
        }
    }
}

/// Points strictly before `cutoff` of every series long enough to keep.
fn pre_cutoff(series: &[PriceSeries], cutoff: i64) -> Vec<PriceSeries> {
    series
        .iter()
        .filter_map(|s| {
            let n = s.first_index_at_or_after(cutoff);
            PriceSeries::new(s.instrument_id(), s.granularity(), s.timestamps()[..n].to_vec(), s.values()[..n].to_vec())
                .ok()
        })
        .collect()
}

fn post_cutoff(series: &[PriceSeries], cutoff: i64) -> Vec<PriceSeries> {
    series
        .iter()
        .filter_map(|s| {
            let n = s.first_index_at_or_after(cutoff);
            PriceSeries::new(s.instrument_id(), s.granularity(), s.timestamps()[n..].to_vec(), s.values()[n..].to_vec())
                .ok()
        })
        .collect()
}

fn chance_model(config: &RunConfig, series: &[PriceSeries]) -> Result<ChanceModel, CliError> {
    let cutoff = config.cutoff_ts()?;
    let period = match config.chance_period {
        ChancePeriod::Train => pre_cutoff(series, cutoff),
        ChancePeriod::Test => post_cutoff(series, cutoff),
    };
    Ok(fit_chance(&period, config.seed)?)
}

fn build_predictor(
    config: &RunConfig,
    predictor: Predictor,
    checkpoint: Option<&Path>,
    series: &[PriceSeries],
) -> Result<Box<dyn Forecaster>, CliError> {
    let cutoff = config.cutoff_ts()?;
    let load = |path: Option<&Path>, what: &str| -> Result<ForecasterState, CliError> {
        let path = path.ok_or_else(|| CliError::Usage(format!("the {what} predictor needs a checkpoint")))?;
        Ok(load_checkpoint(path)?)
    };
    Ok(match predictor {
        Predictor::Model => Box::new(ModelForecaster::new(load(checkpoint.or(config.checkpoint.as_deref()), "model")?)),
        Predictor::Import => {
            let state = load(checkpoint.or(config.import_checkpoint.as_deref()), "import")?;
            Box::new(ModelForecaster { state, name: "import".into() })
        }
        Predictor::Chance => {
            Box::new(ChanceForecaster { model: chance_model(config, series)? })
        }
        Predictor::Ar1 => Box::new(Ar1Forecaster::fit(series, cutoff, config.ar1())),
        Predictor::Oracle => Box::new(OracleForecaster::new(series)),
    })
}

/// Scans `<data_dir>/<granularity>/<market>/<instrument>.csv`, writes the
/// series index to `manifest_out` and a per-market summary to the output
/// directory. Files directly under `data_dir` are not series and are ignored.
pub fn cmd_ingest(data_dir: &Path, manifest_out: &Path, out_dir: &Path) -> Result<Outcome, CliError> {
    if !data_dir.is_dir() {
        return Err(CliError::NoData(format!("{} is not a directory", data_dir.display())));
    }
    let scanned: Vec<_> = scan_data_dir(data_dir)?.into_iter().filter(|f| f.relative_path.contains('/')).collect();
    if scanned.is_empty() {
        return Err(CliError::NoData(format!("no series files under {}", data_dir.display())));
    }
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for f in scanned {
        match f.result {
            Ok((entry, _)) => entries.push(entry),
            Err(e) => {
                log::error!("{}: {e}", f.relative_path);
                failures.push((f.relative_path, e.to_string()));
            }
        }
    }

    let mut artifacts = Artifacts::new(out_dir)?;
    if !failures.is_empty() {
        artifacts.write("errors.csv", |w| -> Result<(), CliError> {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["path", "error"])?;
            for (p, e) in &failures {
                c.write_record([p, e])?;
            }
            c.flush()?;
            Ok(())
        })?;
    }
    if entries.is_empty() {
        return Err(CliError::NoData(format!("all {} files under {} failed to load", failures.len(), data_dir.display())));
    }
    let mut body = Vec::new();
    write_manifest(&entries, &mut body)?;
    std::fs::write(manifest_out, &body).map_err(|e| CliError::io(manifest_out, e))?;
    artifacts.write("manifest.csv", |w| w.write_all(&body))?;

    let mut summary: BTreeMap<(String, String), (usize, usize)> = BTreeMap::new();
    for e in &entries {
        let slot = summary.entry((e.granularity.to_string(), e.market.clone())).or_default();
        slot.0 += 1;
        slot.1 += e.points;
    }
    artifacts.write("summary.csv", |w| -> std::io::Result<()> {
        writeln!(w, "granularity,market,series,points")?;
        for ((g, m), (n, p)) in &summary {
            writeln!(w, "{g},{m},{n},{p}")?;
        }
        Ok(())
    })?;
    log::info!("indexed {} series ({} failed)", entries.len(), failures.len());
    artifacts.seal(RunManifest {
        command: "ingest".into(),
        config_path: None,
        seeds: Vec::new(),
        data_manifest: Some(manifest_out.display().to_string()),
        out_dir: out_dir.display().to_string(),
        artifacts: Vec::new(),
    })?;
    Ok(if failures.is_empty() { Outcome::Complete } else { Outcome::Partial })
}

/// Trains from scratch on the pre-cutoff data and writes `checkpoint.ckpt`,
/// `loss_curve.csv` and `split.csv`.
pub fn cmd_train(ctx: &RunContext) -> Result<Outcome, CliError> {
    let cfg = &ctx.config;
    cfg.validate()?;
    let series = ctx.load_series()?;
    let tc = cfg.train();
    let split = build_split(&series, cfg.cutoff_ts()?, tc.min_context + tc.output_len, cfg.val_fraction, cfg.seed)?;
    let dropped = series.len() - split.train.len() - split.validation.len();
    let data = TrainData::from_split(&split, &tc)?;
    let state = ForecasterState::init_random(&cfg.model(), cfg.seed)?;

    let mut artifacts = Artifacts::new(&ctx.out_dir)?;
    let mut saved = Vec::new();
    let out_dir = ctx.out_dir.clone();
    let every = cfg.checkpoint_every;
    let (state, curve) = train_from(state, &data, &tc, &mut |r, s| {
        log::info!(
            "epoch {:>4}  train {:.6e}  val {:.6e}  lr {:.3e}  |g| {:.3e}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.last_lr,
            r.mean_grad_norm
        );
        if every > 0 && r.epoch % every == 0 {
            let name = format!("checkpoints/epoch_{:04}.ckpt", r.epoch);
            let path = out_dir.join(&name);
            std::fs::create_dir_all(path.parent().expect("has parent")).map_err(finpatch::model::ModelError::from)?;
            save_checkpoint(s, &path).map_err(TrainError::from)?;
            saved.push(name);
        }
        Ok(())
    })?;
    for name in &saved {
        // already on disk; registering makes it part of the manifest
        artifacts.register(name);
    }
    artifacts.write("checkpoint.ckpt", |w| write_checkpoint(&state, w))?;
    artifacts.write("loss_curve.csv", |w| curve.write_csv(w))?;
    artifacts.write("split.csv", |w| -> std::io::Result<()> {
        writeln!(w, "instrument_id,role")?;
        for (role, set) in [("train", &split.train), ("validation", &split.validation), ("test", &split.test)] {
            for s in set {
                writeln!(w, "{},{role}", s.instrument_id())?;
            }
        }
        Ok(())
    })?;
    artifacts.seal(ctx.run_manifest("train", vec![cfg.seed]))?;
    Ok(if dropped > 0 { Outcome::Partial } else { Outcome::Complete })
}

#[derive(Debug, Clone, clap::Args)]
pub struct EvalArgs {
    #[arg(long, value_enum, default_value = "model", env = "FINPATCH_PREDICTOR")]
    pub predictor: Predictor,
    /// Checkpoint for the model or import predictor.
    #[arg(long, env = "FINPATCH_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    /// Step horizons to sweep, overriding the config (comma-separated or repeated).
    #[arg(long = "horizon", value_delimiter = ',', env = "FINPATCH_HORIZON")]
    pub horizons: Vec<usize>,
}

/// Directional accuracy sweep on the post-cutoff windows: `eval.csv` and
/// `eval_plot.csv`, plus `skipped.csv` when some series were too short.
pub fn cmd_eval(ctx: &RunContext, args: &EvalArgs) -> Result<Outcome, CliError> {
    let cfg = &ctx.config;
    cfg.validate()?;
    let series = ctx.load_series()?;
    let cutoff = cfg.cutoff_ts()?;
    let forecaster = build_predictor(cfg, args.predictor, args.checkpoint.as_deref(), &series)?;
    let protocol = cfg.protocol((!args.horizons.is_empty()).then_some(args.horizons.as_slice()));
    let chance = chance_model(cfg, &series)?;
    let first_target = |s: &PriceSeries| s.first_index_at_or_after(cutoff);
    let report = evaluate(forecaster.as_ref(), &series, &protocol, chance.up_ratio, &first_target)?;

    let mut artifacts = Artifacts::new(&ctx.out_dir)?;
    artifacts.write("eval.csv", |w| report.write_csv(w))?;
    if cfg.simulate_chance {
        let sampled = evaluate(&ChanceForecaster { model: chance }, &series, &protocol, chance.up_ratio, &first_target)?;
        artifacts.write("chance_simulated.csv", |w| sampled.write_csv(w))?;
    }
    artifacts.write("eval_plot.csv", |w| report.write_plot_csv(w))?;
    if !report.skipped.is_empty() {
        log::warn!("{} series too short for at least one horizon", report.skipped.len());
        artifacts.write("skipped.csv", |w| -> std::io::Result<()> {
            writeln!(w, "instrument_id")?;
            report.skipped.iter().try_for_each(|s| writeln!(w, "{s}"))
        })?;
    }
    artifacts.seal(ctx.run_manifest("eval", vec![cfg.seed]))?;
    Ok(if report.skipped.is_empty() { Outcome::Complete } else { Outcome::Partial })
}

#[derive(Debug, Clone, clap::Args)]
pub struct BacktestArgs {
    #[arg(long, value_enum, default_value = "model", env = "FINPATCH_PREDICTOR")]
    pub predictor: Predictor,
    #[arg(long, env = "FINPATCH_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    /// Trading horizons, overriding `backtest_horizons` (comma-separated or repeated).
    #[arg(long = "horizon", value_delimiter = ',', env = "FINPATCH_HORIZON")]
    pub horizons: Vec<usize>,
    /// `basic` or `neutral`, overriding the config.
    #[arg(long, env = "FINPATCH_STRATEGY")]
    pub strategy: Option<Strategy>,
    /// First decision day (`YYYY-MM-DD` or epoch seconds), overriding the config.
    #[arg(long, env = "FINPATCH_START")]
    pub start: Option<String>,
}

fn skippable(e: &BacktestError) -> bool {
    matches!(e, BacktestError::NoTradingDays { .. } | BacktestError::InsufficientHistory { .. })
}

fn backtest_config(cfg: &RunConfig, horizon: usize, strategy: Option<Strategy>, start: Option<&str>) -> Result<BacktestConfig, CliError> {
    Ok(BacktestConfig {
        horizon,
        strategy: strategy.unwrap_or(cfg.strategy),
        start: match start {
            Some(s) => crate::config::parse_time("start", s)?,
            None => cfg.start_ts()?,
        },
        context_len: cfg.context_len,
    })
}

/// Mock trading over the whole manifest as one market. Writes the per-horizon
/// metric table `backtest.csv`, invariant flags in `audit.csv` and realized
/// cumulative PnL per horizon under `pnl/`.
pub fn cmd_backtest(ctx: &RunContext, args: &BacktestArgs) -> Result<Outcome, CliError> {
    let cfg = &ctx.config;
    cfg.validate()?;
    let market = ctx.load_series()?;
    let forecaster = build_predictor(cfg, args.predictor, args.checkpoint.as_deref(), &market)?;
    let horizons = if args.horizons.is_empty() { cfg.backtest_horizons.clone() } else { args.horizons.clone() };

    let mut results: Vec<(usize, BacktestResult)> = Vec::new();
    let mut skipped = 0;
    for &h in &horizons {
        let bc = backtest_config(cfg, h, args.strategy, args.start.as_deref())?;
        match run_backtest(forecaster.as_ref(), &market, &bc) {
            Ok(r) => results.push((h, r)),
            Err(e) if skippable(&e) => {
                log::warn!("horizon {h} skipped: {e}");
                skipped += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
    if results.is_empty() {
        return Err(CliError::NoData("no horizon could be traded".into()));
    }

    let strategy = args.strategy.unwrap_or(cfg.strategy);
    let mut artifacts = Artifacts::new(&ctx.out_dir)?;
    let rows: Vec<TableRow> = results.iter().map(|(h, r)| TableRow::from_report(*h, &r.report)).collect();
    artifacts.write("backtest.csv", |w| write_table_csv(&rows, w))?;
    artifacts.write("audit.csv", |w| -> std::io::Result<()> {
        writeln!(w, "horizon,strategy,row_sum_zero,max_abs_row_sum,max_new_order_mass,max_gross,orders")?;
        for (h, r) in &results {
            let a = &r.audit;
            writeln!(
                w,
                "{h},{strategy},{},{},{},{},{}",
                a.row_sum_zero,
                a.max_abs_row_sum,
                a.max_new_order_mass,
                a.max_gross,
                r.ledger.len()
            )?;
        }
        Ok(())
    })?;
    for (h, r) in &results {
        artifacts.write(&format!("pnl/h{h:03}.csv"), |w| write_pnl_plot_csv(r, w))?;
    }
    artifacts.seal(ctx.run_manifest("backtest", vec![cfg.seed]))?;
    Ok(if skipped > 0 { Outcome::Partial } else { Outcome::Complete })
}

#[derive(Debug, Clone, clap::Args)]
pub struct CompareArgs {
    /// `NAME=MANIFEST`, one per market (repeatable).
    #[arg(long = "market", required = true)]
    pub markets: Vec<String>,
    /// Predictors to compare (comma-separated or repeated).
    #[arg(long = "predictor", value_enum, value_delimiter = ',', required = true)]
    pub predictors: Vec<Predictor>,
    #[arg(long, env = "FINPATCH_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    /// Trading horizon; defaults to `total_horizon`.
    #[arg(long, env = "FINPATCH_HORIZON")]
    pub horizon: Option<usize>,
    #[arg(long, env = "FINPATCH_STRATEGY")]
    pub strategy: Option<Strategy>,
    #[arg(long, env = "FINPATCH_START")]
    pub start: Option<String>,
}

/// Market × predictor matrices of annualized Sharpe and neutral cost:
/// `comparison_sharpe.csv` and `comparison_cost.csv`.
pub fn cmd_compare(ctx: &RunContext, args: &CompareArgs) -> Result<Outcome, CliError> {
    let cfg = &ctx.config;
    cfg.validate()?;
    let h = args.horizon.unwrap_or(cfg.total_horizon);
    let bc = backtest_config(cfg, h, args.strategy, args.start.as_deref())?;
    let mut names = Vec::new();
    let mut sharpe = Vec::new();
    let mut cost = Vec::new();
    let mut gaps = 0;
    for spec in &args.markets {
        let (name, path) =
            spec.split_once('=').ok_or_else(|| CliError::Usage(format!("--market expects NAME=MANIFEST, got {spec}")))?;
        let market = load_market(cfg, Path::new(path))?;
        let (mut s_row, mut c_row) = (Vec::new(), Vec::new());
        for &p in &args.predictors {
            let forecaster = build_predictor(cfg, p, args.checkpoint.as_deref(), &market)?;
            match run_backtest(forecaster.as_ref(), &market, &bc) {
                Ok(r) => {
                    s_row.push(r.report.ann_sharpe);
                    c_row.push(r.report.neutral_cost_pct);
                }
                Err(e) if skippable(&e) => {
                    log::warn!("{name} / {}: {e}", p.name());
                    gaps += 1;
                    s_row.push(None);
                    c_row.push(None);
                }
                Err(e) => return Err(e.into()),
            }
        }
        names.push(name.to_string());
        sharpe.push(s_row);
        cost.push(c_row);
    }
    let labels: Vec<String> = args.predictors.iter().map(|p| p.name().to_string()).collect();
    let mut artifacts = Artifacts::new(&ctx.out_dir)?;
    artifacts.write("comparison_sharpe.csv", |w| write_comparison_csv(&names, &labels, &sharpe, w))?;
    artifacts.write("comparison_cost.csv", |w| write_comparison_csv(&names, &labels, &cost, w))?;
    let mut manifest = ctx.run_manifest("compare", vec![cfg.seed]);
    manifest.data_manifest = Some(args.markets.join(";"));
    artifacts.seal(manifest)?;
    Ok(if gaps > 0 { Outcome::Partial } else { Outcome::Complete })
}

/// Entries of a manifest file, for callers that only need the index.
pub fn read_manifest_file(path: &Path) -> Result<Vec<ManifestEntry>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(read_manifest(&text)?)
}
