use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use finpatch_cli::{
    cmd_backtest, cmd_compare, cmd_eval, cmd_ingest, cmd_train, BacktestArgs, CliError, CompareArgs, EvalArgs, Outcome,
    RunConfig, RunContext, EXIT_FATAL,
};

/// Patched-transformer price forecasting: ingest, train, evaluate, backtest.
///
/// Every flag can also be set through an environment variable prefixed with
/// `FINPATCH_` (for example `FINPATCH_THREADS=4`); flags win over the
/// environment, which wins over the config file.
#[derive(Debug, Parser)]
#[command(name = "finpatch", version)]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true, env = "FINPATCH_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Index a data directory laid out as <granularity>/<market>/<instrument>.csv.
    Ingest {
        #[arg(long, env = "FINPATCH_DATA_DIR")]
        data_dir: PathBuf,
        /// Where to write the index (default: <data-dir>/manifest.csv).
        #[arg(long, env = "FINPATCH_MANIFEST_OUT")]
        manifest_out: Option<PathBuf>,
        /// Summary and error listing (default: the data directory).
        #[arg(long, env = "FINPATCH_OUT_DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Train a model from scratch on pre-cutoff data.
    Train(Common),
    /// Stepwise directional evaluation over a horizon sweep.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: EvalArgs,
    },
    /// Mock trading with the basic or market-neutral strategy.
    Backtest {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: BacktestArgs,
    },
    /// Sharpe and neutral-cost matrices across markets and predictors.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: CompareArgs,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// Flat TOML file of run parameters.
    #[arg(long, env = "FINPATCH_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "FINPATCH_DATA_MANIFEST")]
    data_manifest: Option<PathBuf>,
    #[arg(long, env = "FINPATCH_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
    /// Overrides the config's seed.
    #[arg(long, env = "FINPATCH_SEED")]
    seed: Option<u64>,
}

impl Common {
    fn context(self) -> Result<RunContext, CliError> {
        let mut config = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(RunContext { config, config_path: self.config, data_manifest: self.data_manifest, out_dir: self.out_dir })
    }
}

fn run(cli: Cli) -> Result<Outcome, CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Ingest { data_dir, manifest_out, out_dir } => {
            let manifest_out = manifest_out.unwrap_or_else(|| data_dir.join("manifest.csv"));
            let out_dir = out_dir.unwrap_or_else(|| data_dir.clone());
            cmd_ingest(&data_dir, &manifest_out, &out_dir)
        }
        Command::Train(common) => cmd_train(&common.context()?),
        Command::Eval { common, args } => cmd_eval(&common.context()?, &args),
        Command::Backtest { common, args } => cmd_backtest(&common.context()?, &args),
        Command::Compare { common, args } => cmd_compare(&common.context()?, &args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("FINPATCH_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(outcome) => ExitCode::from(outcome.exit_code()),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(EXIT_FATAL)
        }
    }
}
