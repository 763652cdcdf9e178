//! Command implementations behind the `finpatch` binary.
//!
//! Every command writes its outputs into an output directory together with
//! `run_manifest.json`, which lists each produced file with its SHA-256.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub mod commands;
pub mod config;

pub use commands::{
    cmd_backtest, cmd_compare, cmd_eval, cmd_ingest, cmd_train, BacktestArgs, CompareArgs, EvalArgs, Predictor,
    RunContext,
};
pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("no usable data: {0}")]
    NoData(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] finpatch::data::DataError),
    #[error(transparent)]
    Model(#[from] finpatch::model::ModelError),
    #[error(transparent)]
    Train(#[from] finpatch::train::TrainError),
    #[error(transparent)]
    Eval(#[from] finpatch::eval::EvalError),
    #[error(transparent)]
    Backtest(#[from] finpatch::backtest::BacktestError),
    #[error(transparent)]
    Baseline(#[from] finpatch::baselines::BaselineError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("write failed: {0}")]
    Write(#[from] std::io::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }
}

/// How a command that did not fail ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Complete,
    /// Some inputs were skipped; outputs cover the rest.
    Partial,
}

impl Outcome {
    pub fn exit_code(self) -> u8 {
        match self {
            Outcome::Complete => 0,
            Outcome::Partial => 1,
        }
    }
}

/// Exit status for fatal errors.
pub const EXIT_FATAL: u8 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub seeds: Vec<u64>,
    pub data_manifest: Option<String>,
    pub out_dir: String,
    pub artifacts: Vec<Artifact>,
}

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Output files of one run, hashed when the run is sealed.
pub struct Artifacts {
    root: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    pub fn new(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self { root: root.to_path_buf(), files: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Creates (or truncates) `name` and registers it.
    pub fn create(&mut self, name: &str) -> Result<BufWriter<File>, CliError> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        let f = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        self.register(name);
        Ok(BufWriter::new(f))
    }

    /// Registers a file some other writer already put under the root.
    pub fn register(&mut self, name: &str) {
        if !self.files.iter().any(|n| n == name) {
            self.files.push(name.to_string());
        }
    }

    /// Writes a file through `body`, flushing it before returning.
    pub fn write<F, E>(&mut self, name: &str, body: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<(), E>,
        E: Into<CliError>,
    {
        let mut w = self.create(name)?;
        body(&mut w).map_err(Into::into)?;
        let path = self.root.join(name);
        w.flush().map_err(|e| CliError::io(&path, e))
    }

    /// Hashes every registered file and writes the run manifest.
    pub fn seal(self, mut manifest: RunManifest) -> Result<RunManifest, CliError> {
        let mut artifacts = Vec::with_capacity(self.files.len());
        for name in &self.files {
            let path = self.root.join(name);
            let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
            artifacts.push(Artifact { path: name.clone(), sha256: hex::encode(Sha256::digest(&bytes)) });
        }
        artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        manifest.artifacts = artifacts;
        let path = self.root.join(RUN_MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}

impl From<finpatch::forecast::ForecastError> for CliError {
    fn from(e: finpatch::forecast::ForecastError) -> Self {
        CliError::Usage(e.to_string())
    }
}
