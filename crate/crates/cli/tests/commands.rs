use std::path::{Path, PathBuf};
use std::process::Command;

use finpatch::backtest::{read_table_csv, TABLE_COLUMNS};
use finpatch::data::write_series_csv;
use finpatch::synthetic::{drifting_walks, EPOCH_START};
use finpatch_cli::RunManifest;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_finpatch");

/// Tiny architecture and schedule so a full train takes a fraction of a second.
const TOY: &str = r#"
cutoff = "2016-01-01"
val_fraction = 0.25
seed = 3
input_patch_len = 4
output_patch_len = 8
num_layers = 1
hidden_dim = 8
max_context = 32
min_context = 8
output_len = 8
warmup_epochs = 1
total_epochs = 3
batch_size = 4
peak_lr = 0.01
context_len = 16
total_horizon = 16
horizons = [2, 4, 8, 16]
backtest_horizons = [2, 4]
"#;

struct Run {
    code: i32,
    stderr: String,
}

fn finpatch(args: &[&str], envs: &[(&str, &str)]) -> Run {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env("FINPATCH_LOG", "warn");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("binary runs");
    Run { code: out.status.code().unwrap_or(-1), stderr: String::from_utf8_lossy(&out.stderr).into_owned() }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes `count` daily walks of `len` points under `<root>/daily/<market>/`.
fn write_market(root: &Path, market: &str, count: usize, len: usize, seed: u64) {
    let dir = root.join("daily").join(market);
    std::fs::create_dir_all(&dir).unwrap();
    for series in drifting_walks(count, len, 0.01, 0.001, seed) {
        let f = std::fs::File::create(dir.join(format!("{}.csv", series.instrument_id()))).unwrap();
        write_series_csv(&series, f).unwrap();
    }
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    /// 6 walks of 600 days starting 2015-01-01; the cutoff sits at day 365.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_market(&dir.path().join("data"), "walks", 6, 600, 1);
        std::fs::write(dir.path().join("run.toml"), TOY).unwrap();
        let ws = Self { dir };
        let r = finpatch(&["ingest", "--data-dir", s(&ws.data())], &[]);
        assert_eq!(r.code, 0, "{}", r.stderr);
        ws
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn data(&self) -> PathBuf {
        self.path("data")
    }

    fn manifest(&self) -> PathBuf {
        self.data().join("manifest.csv")
    }

    fn common(&self, out: &str) -> Vec<String> {
        vec![
            "--config".into(),
            s(&self.path("run.toml")).into(),
            "--data-manifest".into(),
            s(&self.manifest()).into(),
            "--out-dir".into(),
            s(&self.path(out)).into(),
        ]
    }

    fn run(&self, command: &str, out: &str, extra: &[&str], envs: &[(&str, &str)]) -> Run {
        let mut args: Vec<String> = vec![command.into()];
        args.extend(self.common(out));
        args.extend(extra.iter().map(|a| a.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        finpatch(&refs, envs)
    }

    fn read(&self, rel: &str) -> String {
        std::fs::read_to_string(self.path(rel)).unwrap()
    }
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn ingest_of_an_empty_directory_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let r = finpatch(&["ingest", "--data-dir", s(dir.path())], &[]);
    assert_eq!(r.code, 2);
}

#[test]
fn ingest_lists_every_valid_series() {
    let dir = tempfile::tempdir().unwrap();
    write_market(dir.path(), "walks", 3, 50, 2);
    assert_eq!(finpatch(&["ingest", "--data-dir", s(dir.path())], &[]).code, 0);
    let manifest = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
    let rows = csv_rows(&manifest);
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r[1] == "daily" && r[2] == "walks" && r[4] == "50"));
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary, "granularity,market,series,points\ndaily,walks,3,150\n");
    // rerunning ignores the files it wrote at the top level
    assert_eq!(finpatch(&["ingest", "--data-dir", s(dir.path())], &[]).code, 0);
}

#[test]
fn ingest_with_a_broken_file_is_partial() {
    let dir = tempfile::tempdir().unwrap();
    write_market(dir.path(), "walks", 3, 50, 2);
    std::fs::write(dir.path().join("daily/walks/bad.csv"), "timestamp,close\n1,10\n2,-3\n").unwrap();
    assert_eq!(finpatch(&["ingest", "--data-dir", s(dir.path())], &[]).code, 1);
    assert_eq!(csv_rows(&std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap()).len(), 3);
    let errors = std::fs::read_to_string(dir.path().join("errors.csv")).unwrap();
    assert!(errors.contains("daily/walks/bad.csv"));
}

#[test]
fn training_is_reproducible_and_recorded() {
    let ws = Workspace::new();
    assert_eq!(ws.run("train", "a", &[], &[]).code, 0);
    assert_eq!(ws.run("train", "b", &[], &[]).code, 0);
    let curve = ws.read("a/loss_curve.csv");
    assert_eq!(curve.lines().count(), 1 + 3);
    assert!(curve.starts_with("epoch,train_loss,val_loss\n"));
    let a: RunManifest = serde_json::from_str(&ws.read("a/run_manifest.json")).unwrap();
    let b: RunManifest = serde_json::from_str(&ws.read("b/run_manifest.json")).unwrap();
    assert_eq!(a.artifacts, b.artifacts);
    assert_eq!(a.seeds, vec![3]);
    for art in &a.artifacts {
        let bytes = std::fs::read(ws.path("a").join(&art.path)).unwrap();
        assert_eq!(hex::encode(Sha256::digest(&bytes)), art.sha256);
    }
    assert!(a.artifacts.iter().any(|x| x.path == "checkpoint.ckpt"));

    // a different seed changes the run
    assert_eq!(ws.run("train", "c", &["--seed", "4"], &[]).code, 0);
    assert_ne!(ws.read("c/loss_curve.csv"), curve);
}

#[test]
fn periodic_checkpoints_are_listed() {
    let ws = Workspace::new();
    std::fs::write(ws.path("run.toml"), format!("{TOY}checkpoint_every = 1\n")).unwrap();
    assert_eq!(ws.run("train", "a", &[], &[]).code, 0);
    let m: RunManifest = serde_json::from_str(&ws.read("a/run_manifest.json")).unwrap();
    let saved: Vec<_> = m.artifacts.iter().filter(|a| a.path.starts_with("checkpoints/")).collect();
    assert_eq!(saved.len(), 3);
}

#[test]
fn config_errors_name_the_keys() {
    let ws = Workspace::new();
    std::fs::write(ws.path("run.toml"), format!("{TOY}warmup_epochs = 5\n").replace("warmup_epochs = 1\n", "")).unwrap();
    let r = ws.run("train", "a", &[], &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("warmup_epochs") && r.stderr.contains("total_epochs"), "{}", r.stderr);

    std::fs::write(ws.path("run.toml"), format!("{TOY}hiden_dim = 4\n")).unwrap();
    let r = ws.run("train", "a", &[], &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("hiden_dim"), "{}", r.stderr);
}

#[test]
fn foresight_scores_every_horizon_perfectly() {
    let ws = Workspace::new();
    assert_eq!(ws.run("eval", "e", &["--predictor", "oracle"], &[]).code, 0);
    let rows = csv_rows(&ws.read("e/eval.csv"));
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["2", "4", "8", "16"]);
    assert!(rows.iter().all(|r| r[1] == "1"));
}

#[test]
fn chance_ratio_period_and_sampled_guesser_are_configurable() {
    let ws = Workspace::new();
    assert_eq!(ws.run("eval", "train", &["--predictor", "oracle"], &[]).code, 0);
    std::fs::write(ws.path("run.toml"), format!("{TOY}chance_period = \"test\"\nsimulate_chance = true\n")).unwrap();
    assert_eq!(ws.run("eval", "test", &["--predictor", "oracle"], &[]).code, 0);

    let (train, test) = (csv_rows(&ws.read("train/eval.csv")), csv_rows(&ws.read("test/eval.csv")));
    // a horizon whose outcomes are exactly half up scores 0.5 whatever the ratio
    assert!(train.iter().zip(&test).any(|(a, b)| a[3] != b[3]), "the two periods give the same ratio");
    assert!(!ws.path("train/chance_simulated.csv").exists());
    let sampled = csv_rows(&ws.read("test/chance_simulated.csv"));
    assert_eq!(sampled.len(), test.len());
    for (s, e) in sampled.iter().zip(&test) {
        // same windows, same analytic rate; the sampled accuracy is its own
        assert_eq!((&s[0], &s[3], &s[4]), (&e[0], &e[3], &e[4]));
        assert_ne!(s[1], "1");
    }
    assert!(ws.read("test/run_manifest.json").contains("chance_simulated.csv"));
}

#[test]
fn the_default_sweep_has_seven_rows() {
    let ws = Workspace::new();
    let cfg = TOY.replace("horizons = [2, 4, 8, 16]\n", "").replace("total_horizon = 16", "total_horizon = 128");
    std::fs::write(ws.path("run.toml"), cfg).unwrap();
    assert_eq!(ws.run("eval", "e", &["--predictor", "chance"], &[]).code, 0);
    let rows = csv_rows(&ws.read("e/eval.csv"));
    assert_eq!(rows.len(), 7);
    assert_eq!(rows.last().unwrap()[0], "128");
}

#[test]
fn horizon_flag_and_environment_override_the_config() {
    let ws = Workspace::new();
    assert_eq!(ws.run("eval", "flag", &["--predictor", "ar1", "--horizon", "16"], &[]).code, 0);
    assert_eq!(csv_rows(&ws.read("flag/eval.csv")).len(), 1);
    assert_eq!(ws.run("eval", "env", &[], &[("FINPATCH_PREDICTOR", "ar1"), ("FINPATCH_HORIZON", "4,8")]).code, 0);
    let rows = csv_rows(&ws.read("env/eval.csv"));
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["4", "8"]);
}

#[test]
fn short_series_are_skipped_with_a_partial_exit() {
    let ws = Workspace::new();
    // a series that ends right after the cutoff
    let short = drifting_walks(1, 370, 0.01, 0.0, 9).remove(0);
    let f = std::fs::File::create(ws.data().join("daily/walks/short.csv")).unwrap();
    write_series_csv(&short, f).unwrap();
    assert_eq!(finpatch(&["ingest", "--data-dir", s(&ws.data())], &[]).code, 0);
    let r = ws.run("eval", "e", &["--predictor", "chance"], &[]);
    assert_eq!(r.code, 1, "{}", r.stderr);
    assert!(ws.read("e/skipped.csv").contains("short"));
}

#[test]
fn model_checkpoints_drive_eval_and_backtest() {
    let ws = Workspace::new();
    assert_eq!(ws.run("train", "t", &[], &[]).code, 0);
    let ckpt = ws.path("t/checkpoint.ckpt");
    assert_eq!(ws.run("eval", "e", &["--checkpoint", s(&ckpt)], &[]).code, 0);
    assert_eq!(csv_rows(&ws.read("e/eval.csv")).len(), 4);
    let r = ws.run("backtest", "b", &["--checkpoint", s(&ckpt)], &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rows = read_table_csv(ws.read("b/backtest.csv").as_bytes()).unwrap();
    assert_eq!(rows.iter().map(|r| r.horizon).collect::<Vec<_>>(), [2, 4]);
    assert!(ws.run("eval", "x", &[], &[]).code == 2, "the model predictor needs a checkpoint");
}

#[test]
fn backtest_emits_the_metric_table_and_audit_flags() {
    let ws = Workspace::new();
    for strategy in ["basic", "neutral"] {
        let out = format!("bt_{strategy}");
        let r = ws.run("backtest", &out, &["--predictor", "chance", "--strategy", strategy], &[]);
        assert_eq!(r.code, 0, "{}", r.stderr);
        let table = ws.read(&format!("{out}/backtest.csv"));
        assert_eq!(table.lines().next().unwrap(), TABLE_COLUMNS.join(","));
        assert_eq!(read_table_csv(table.as_bytes()).unwrap().len(), 2);
        let audit = csv_rows(&ws.read(&format!("{out}/audit.csv")));
        assert!(audit.iter().all(|r| r[1] == strategy));
        if strategy == "neutral" {
            assert!(audit.iter().all(|r| r[2] == "true"));
        } else {
            assert!(audit.iter().all(|r| r[2] == "false"));
        }
        let pnl = ws.read(&format!("{out}/pnl/h002.csv"));
        assert!(pnl.starts_with("date,cum_pnl\n2016-01-02,"), "{pnl}");
    }
}

#[test]
fn backtests_are_byte_reproducible() {
    let ws = Workspace::new();
    for out in ["x", "y"] {
        assert_eq!(ws.run("backtest", out, &["--predictor", "ar1", "--horizon", "3"], &[("FINPATCH_THREADS", "2")]).code, 0);
    }
    let x: RunManifest = serde_json::from_str(&ws.read("x/run_manifest.json")).unwrap();
    let y: RunManifest = serde_json::from_str(&ws.read("y/run_manifest.json")).unwrap();
    assert_eq!(x.artifacts, y.artifacts);
}

#[test]
fn comparison_matrix_has_one_row_per_market() {
    let ws = Workspace::new();
    assert_eq!(ws.run("train", "t", &[], &[]).code, 0);
    let mut markets = Vec::new();
    for (i, name) in ["alpha", "beta", "gamma", "delta"].iter().enumerate() {
        let root = ws.path(name);
        write_market(&root, name, 4, 500, 10 + i as u64);
        assert_eq!(finpatch(&["ingest", "--data-dir", s(&root)], &[]).code, 0);
        markets.push(format!("{name}={}", s(&root.join("manifest.csv"))));
    }
    let ckpt = ws.path("t/checkpoint.ckpt");
    let mut args = vec!["--predictor", "model,import,chance,ar1", "--checkpoint", s(&ckpt), "--horizon", "8"];
    for m in &markets {
        args.extend(["--market", m.as_str()]);
    }
    let r = ws.run("compare", "cmp", &args, &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    for file in ["cmp/comparison_sharpe.csv", "cmp/comparison_cost.csv"] {
        let text = ws.read(file);
        assert_eq!(text.lines().next().unwrap(), "market,model,import,chance,ar1");
        let rows = csv_rows(&text);
        assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["alpha", "beta", "gamma", "delta"]);
        assert!(rows.iter().all(|r| r.len() == 5));
    }
    // the same checkpoint under two names trades identically
    let rows = csv_rows(&ws.read("cmp/comparison_sharpe.csv"));
    assert!(rows.iter().all(|r| r[1] == r[2]));
}

#[test]
fn start_before_enough_history_is_fatal() {
    let ws = Workspace::new();
    let r = ws.run("backtest", "b", &["--predictor", "chance", "--start", &EPOCH_START.to_string()], &[]);
    assert_eq!(r.code, 2, "{}", r.stderr);
}
