//! Command-line surface: `prepare`, `synth`, `pretrain`, `calibrate`,
//! `evaluate` and `report`.
//!
//! Every option may also come from a `--config` file of `key = value` lines
//! whose keys are the long flag names. Explicit flags win over the file,
//! which wins over built-in defaults. Each command writes a run manifest
//! echoing the resolved settings next to its main output.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::corpus::{ingest, preprocess, synth_generate, Dataset, PreprocessConfig, SynthConfig};
use crate::curriculum::{evaluate, run_finetune, run_pretrain, Ablation, ExperimentConfig, ModelBundle, ModelRegistry};
use crate::error::{Error, Result};
use crate::io::{file_sha256, read_to_string, write_atomic};
use crate::metrics::{comparison_csv, ReportFile};

pub const RUN_MAGIC: &str = "TCALRUN";
pub const RUN_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "tailcal", version, about = "Tail-calibrated session recommendation")]
pub struct Cli {
    /// Flat `key = value` file supplying defaults for any long flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Turn a TSV click log into a dataset file.
    Prepare(PrepareArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Pretrain a base model with cross entropy.
    Pretrain(PretrainArgs),
    /// Fine-tune calibrated models from a base and write a registry.
    Calibrate(CalibrateArgs),
    /// Score a registry (or a bare base model) on the test split.
    Evaluate(EvaluateArgs),
    /// Compare report files side by side.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub min_item_count: Option<u64>,
    #[arg(long)]
    pub min_session_len: Option<usize>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub sessions: Option<usize>,
    #[arg(long)]
    pub zipf: Option<f64>,
    #[arg(long)]
    pub tail_affinity: Option<f64>,
    #[arg(long)]
    pub mean_len: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Comma-separated subset of no_calib, no_ce, no_ct, no_wl.
    #[arg(long)]
    pub ablate: Option<String>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub ffn_warmup_epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Registry manifest.
    #[arg(long, conflicts_with = "base")]
    pub registry: Option<PathBuf>,
    /// Evaluate a base checkpoint on its own.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub buckets: Option<usize>,
    /// Output prefix; `.json` and `.csv` are appended.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Comma-separated report JSON files.
    #[arg(long, value_delimiter = ',')]
    pub runs: Vec<PathBuf>,
    /// Index of the run the others are compared against.
    #[arg(long)]
    pub baseline: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parsed `key = value` config file. Blank lines and `#` comments are
/// skipped; keys accept `-` or `_`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", i + 1)))?;
            values.insert(k.trim().replace('_', "-"), v.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_to_string(path)?)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| Error::Config(format!("config key {key}: cannot parse {v:?}: {e}")))
            })
            .transpose()
    }

    /// Flag value, else config value, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.get(key)?.unwrap_or(default)),
        }
    }

    fn required<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(v),
            None => self.get(key)?.ok_or_else(|| Error::Config(format!("--{key} is required"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Stage {
    pub name: String,
    pub started_ms: u128,
    pub finished_ms: u128,
}

#[derive(Clone, Debug, Serialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

/// Record of one command invocation.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub magic: String,
    pub version: u32,
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub catalog_hash: Option<String>,
    pub stages: Vec<Stage>,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    fn new(command: &str, config: impl Serialize, seed: Option<u64>) -> Self {
        RunManifest {
            magic: RUN_MAGIC.into(),
            version: RUN_VERSION,
            command: command.into(),
            config: serde_json::to_value(config).expect("config serializes"),
            seed,
            catalog_hash: None,
            stages: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let started_ms = now_ms();
        let out = f()?;
        self.stages.push(Stage {
            name: name.into(),
            started_ms,
            finished_ms: now_ms(),
        });
        Ok(out)
    }

    fn artifact(&mut self, path: &Path) -> Result<()> {
        self.artifacts.push(Artifact {
            path: path.to_path_buf(),
            sha256: file_sha256(path)?,
        });
        Ok(())
    }

    /// Writes `<out>.manifest.json`.
    fn save(&self, out: &Path) -> Result<PathBuf> {
        let path = with_suffix(out, ".manifest.json");
        let json = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        write_atomic(&path, json.as_bytes())?;
        Ok(path)
    }
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn experiment_config(cf: &ConfigFile, t: &TrainArgs, mut base: ExperimentConfig) -> Result<ExperimentConfig> {
    base.lr = cf.pick(t.lr, "lr", base.lr)?;
    base.batch_size = cf.pick(t.batch, "batch", base.batch_size)?;
    base.seed = cf.pick(t.seed, "seed", base.seed)?;
    base.patience = cf.pick(t.patience, "patience", base.patience)?;
    base.validation_fraction = cf.pick(t.validation_fraction, "validation-fraction", base.validation_fraction)?;
    Ok(base)
}

/// Resolved settings of `pretrain`.
pub fn pretrain_config(cf: &ConfigFile, a: &PretrainArgs) -> Result<ExperimentConfig> {
    let mut c = experiment_config(cf, &a.train, ExperimentConfig::default())?;
    c.dim = cf.pick(a.dim, "dim", c.dim)?;
    c.epochs = cf.pick(a.epochs, "epochs", c.epochs)?;
    c.resolve()
}

/// Resolved settings of `calibrate`. `no_calib` is folded into `lambda`.
pub fn calibrate_config(cf: &ConfigFile, a: &CalibrateArgs) -> Result<ExperimentConfig> {
    let mut c = experiment_config(cf, &a.train, ExperimentConfig::default())?;
    c.lambda = cf.pick(a.lambda, "lambda", c.lambda)?;
    c.theta = cf.pick(a.theta, "theta", c.theta)?;
    c.k = cf.pick(a.k, "k", c.k)?;
    c.n = cf.pick(a.n, "n", c.n)?;
    c.finetune_epochs = cf.pick(a.finetune_epochs, "finetune-epochs", c.finetune_epochs)?;
    c.ffn_warmup_epochs = cf.pick(a.ffn_warmup_epochs, "ffn-warmup-epochs", c.ffn_warmup_epochs)?;
    let ablate: String = cf.pick(a.ablate.clone(), "ablate", String::new())?;
    let mut ablation = Ablation::default();
    for flag in ablate.split(',') {
        ablation.parse_flag(flag)?;
    }
    c.ablation = ablation;
    c.resolve()
}

fn cmd_prepare(cf: &ConfigFile, a: &PrepareArgs) -> Result<()> {
    let input: PathBuf = cf.required(a.input.clone(), "input")?;
    let out: PathBuf = cf.required(a.out.clone(), "out")?;
    let d = PreprocessConfig::default();
    let cfg = PreprocessConfig {
        min_item_count: cf.pick(a.min_item_count, "min-item-count", d.min_item_count)?,
        min_session_len: cf.pick(a.min_session_len, "min-session-len", d.min_session_len)?,
        test_fraction: cf.pick(a.test_fraction, "test-fraction", d.test_fraction)?,
    };
    let mut run = RunManifest::new("prepare", &cfg, None);
    let report = run.stage("ingest", || ingest(&input))?;
    if !report.malformed.is_empty() {
        log::warn!("skipped {} malformed lines", report.malformed.len());
    }
    let ds = run.stage("preprocess", || preprocess(&report.events, &cfg))?;
    ds.save(&out)?;
    run.catalog_hash = Some(ds.catalog.hash());
    run.artifact(&out)?;
    run.save(&out)?;
    print_summary(&ds);
    Ok(())
}

fn print_summary(ds: &Dataset) {
    let s = &ds.stats;
    println!("items          {}", ds.catalog.item_count());
    println!("head items     {}", ds.catalog.head_count());
    println!("tail items     {}", ds.catalog.tail_count());
    println!("clicks         {}", s.clicks);
    println!("train sessions {}", s.train_sessions);
    println!("test sessions  {}", s.test_sessions);
    println!("train samples  {}", s.train_samples);
    println!("test samples   {}", s.test_samples);
    println!("avg length     {:.2}", s.avg_session_len);
}

fn cmd_synth(cf: &ConfigFile, a: &SynthArgs) -> Result<()> {
    let out: PathBuf = cf.required(a.out.clone(), "out")?;
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        item_count: cf.pick(a.items, "items", d.item_count)?,
        session_count: cf.pick(a.sessions, "sessions", d.session_count)?,
        zipf_exponent: cf.pick(a.zipf, "zipf", d.zipf_exponent)?,
        mean_session_len: cf.pick(a.mean_len, "mean-len", d.mean_session_len)?,
        tail_affinity_fraction: cf.pick(a.tail_affinity, "tail-affinity", d.tail_affinity_fraction)?,
        seed: cf.pick(a.seed, "seed", d.seed)?,
    };
    let mut run = RunManifest::new("synth", &cfg, Some(cfg.seed));
    let ds = run.stage("generate", || synth_generate(&cfg))?;
    ds.save(&out)?;
    run.catalog_hash = Some(ds.catalog.hash());
    run.artifact(&out)?;
    run.save(&out)?;
    print_summary(&ds);
    Ok(())
}

fn cmd_pretrain(cf: &ConfigFile, a: &PretrainArgs) -> Result<()> {
    let data: PathBuf = cf.required(a.train.data.clone(), "data")?;
    let out: PathBuf = cf.required(a.train.out.clone(), "out")?;
    let cfg = pretrain_config(cf, a)?;
    let mut run = RunManifest::new("pretrain", &cfg, Some(cfg.seed));
    let ds = run.stage("load", || Dataset::load(&data))?;
    let (bundle, log) = run.stage("pretrain", || run_pretrain(&ds, &cfg))?;
    bundle.save(&out)?;
    run.catalog_hash = Some(ds.catalog.hash());
    run.artifact(&out)?;
    run.config["epoch_log"] = serde_json::to_value(&log).expect("log serializes");
    run.save(&out)?;
    for e in &log {
        println!("epoch {:>2}  loss {:.4}  valid recall {}", e.epoch, e.train_loss, fmt_opt(e.valid_recall));
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn cmd_calibrate(cf: &ConfigFile, a: &CalibrateArgs) -> Result<()> {
    let data: PathBuf = cf.required(a.train.data.clone(), "data")?;
    let base_path: PathBuf = cf.required(a.base.clone(), "base")?;
    let out: PathBuf = cf.required(a.train.out.clone(), "out")?;
    let cfg = calibrate_config(cf, a)?;
    let mut run = RunManifest::new("calibrate", &cfg, Some(cfg.seed));
    let ds = run.stage("load", || Dataset::load(&data))?;
    let base = ModelBundle::load(&base_path)?;
    let (registry, logs) = run.stage("finetune", || run_finetune(&base, &ds, &cfg))?;
    let manifest = registry.save(&out)?;
    run.catalog_hash = Some(ds.catalog.hash());
    run.artifact(&out)?;
    let dir = out.parent().unwrap_or(Path::new("."));
    for p in std::iter::once(&manifest.base).chain(manifest.models.values()) {
        run.artifact(&dir.join(p))?;
    }
    run.config["fold_logs"] = serde_json::to_value(&logs).expect("log serializes");
    run.save(&out)?;
    for l in &logs {
        println!("fold {}: {} samples, {} epochs", l.fold, l.samples, l.epochs.len());
    }
    Ok(())
}

#[derive(Serialize)]
struct EvaluateSettings {
    n: usize,
    buckets: usize,
}

fn cmd_evaluate(cf: &ConfigFile, a: &EvaluateArgs) -> Result<()> {
    let data: PathBuf = cf.required(a.data.clone(), "data")?;
    let out: PathBuf = cf.required(a.out.clone(), "out")?;
    let settings = EvaluateSettings {
        n: cf.pick(a.n, "n", 20)?,
        buckets: cf.pick(a.buckets, "buckets", 10)?,
    };
    if settings.n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    let mut run = RunManifest::new("evaluate", &settings, None);
    let ds = run.stage("load", || Dataset::load(&data))?;
    let registry = match (a.registry.clone().or(cf.get("registry")?), a.base.clone().or(cf.get("base")?)) {
        (Some(r), _) => ModelRegistry::load(&r)?,
        (None, Some(b)) => ModelRegistry::base_only(ModelBundle::load(&b)?, 0.0),
        (None, None) => return Err(Error::Config("--registry or --base is required".into())),
    };
    let (file, _) = run.stage("evaluate", || evaluate(&registry, &ds, settings.n, settings.buckets))?;
    let (json, csv) = (with_suffix(&out, ".json"), with_suffix(&out, ".csv"));
    file.save(&json, &csv)?;
    run.catalog_hash = Some(ds.catalog.hash());
    run.artifact(&json)?;
    run.artifact(&csv)?;
    run.save(&out)?;
    println!("{:<10} {:>7} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "scope", "records", "recall", "mrr", "cov", "tcov", "tail", "c_kl");
    for r in &file.reports {
        println!(
            "{:<10} {:>7} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            r.scope.to_string(),
            r.records,
            r.recall,
            r.mrr,
            r.coverage,
            r.tail_coverage,
            r.tail_ratio,
            r.c_kl
        );
    }
    Ok(())
}

fn cmd_report(cf: &ConfigFile, a: &ReportArgs) -> Result<()> {
    let out: PathBuf = cf.required(a.out.clone(), "out")?;
    let runs: Vec<PathBuf> = if a.runs.is_empty() {
        let list: String = cf.required(None, "runs")?;
        list.split(',').map(|s| PathBuf::from(s.trim())).collect()
    } else {
        a.runs.clone()
    };
    if runs.is_empty() {
        return Err(Error::Config("--runs needs at least one report".into()));
    }
    let baseline = cf.pick(a.baseline, "baseline", 0)?;
    let loaded = runs
        .iter()
        .map(|p| {
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("run").to_string();
            Ok((name, ReportFile::load(p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let table = comparison_csv(&loaded, baseline)?;
    write_atomic(&out, table.as_bytes())?;
    let mut run = RunManifest::new("report", serde_json::json!({"runs": runs, "baseline": baseline}), None);
    run.artifact(&out)?;
    run.save(&out)?;
    print!("{table}");
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let cf = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    info!("running {:?}", cli.command);
    match &cli.command {
        Command::Prepare(a) => cmd_prepare(&cf, a),
        Command::Synth(a) => cmd_synth(&cf, a),
        Command::Pretrain(a) => cmd_pretrain(&cf, a),
        Command::Calibrate(a) => cmd_calibrate(&cf, a),
        Command::Evaluate(a) => cmd_evaluate(&cf, a),
        Command::Report(a) => cmd_report(&cf, a),
    }
}

/// Parses `args` and runs the command; returns the process exit code
/// (0 success, 1 usage, 2 data, 3 divergence).
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
