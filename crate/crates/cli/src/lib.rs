//! `xded` command-line driver.
//!
//! Exit codes: 0 ok, 1 partial failure, 2 config error, 3 numeric failure,
//! 4 checkpoint incompatibility.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use xded_core::analysis::{self, Network, NetworkLoss, Objective, PgdConfig, PowerConfig};
use xded_core::config::ExperimentConfig;
use xded_core::data::{self, DatasetSpec, DomainSample};
use xded_core::model::{self, CheckpointMeta};
use xded_core::training::{self, Method, RunOutput, BEST_CKPT, FINAL_CKPT, METRICS_FILE};
use xded_core::Error;

pub const OUTPUT_ENV: &str = "XDED_OUTPUT_DIR";
const DEFAULT_OUTPUT: &str = "runs";
const SWEEP_EPOCHS: usize = 20;

#[derive(Debug, Parser)]
#[command(name = "xded", version, about = "Cross-domain ensemble distillation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model with one held-out target domain.
    Train(TrainArgs),
    /// Run a full evaluation protocol and write summary.csv.
    Protocol(ProtocolArgs),
    /// Run a diagnostic on a checkpoint and write its artifacts beside it.
    Probe(ProbeArgs),
    /// Train XDED over a λ × τ grid and write sweep.csv.
    Sweep(SweepArgs),
    /// Generate the synthetic dataset and write it to a binary file.
    ExportData(ExportArgs),
}

/// Flags shared by every command that reads an experiment config. Flags
/// override config values.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output root; falls back to the config, then $XDED_OUTPUT_DIR, then ./runs.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    #[arg(long)]
    pub style_gap: Option<f64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    #[arg(long, default_value_t = 0)]
    pub target_domain: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Record wall-clock time per epoch (metrics are then not byte-reproducible).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ProtocolKind {
    Lodo,
    SingleSource,
}

#[derive(Debug, Args)]
pub struct ProtocolArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long, value_enum, default_value = "lodo")]
    pub protocol: ProtocolKind,
    #[arg(long, value_delimiter = ',', value_parser = parse_method, default_value = "vanilla,xded")]
    pub methods: Vec<Method>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Parallel training jobs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Retrain cells whose artifacts already exist.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeKind {
    Flatness,
    Adist,
    Landscape,
    Attack,
    Entropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitKind {
    Source,
    Target,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum)]
    pub probe: ProbeKind,
    /// Probe settings; only the `analysis` section is read.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluation samples drawn for the probe (0 = all).
    #[arg(long)]
    pub samples: Option<usize>,
    /// Which side of the run's split the loss-based probes evaluate.
    #[arg(long, value_enum, default_value = "source")]
    pub split: SplitKind,
    #[arg(long, value_delimiter = ',')]
    pub sigma: Option<Vec<f64>>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub no_random_start: bool,
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub extent: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long = "lambda", value_delimiter = ',', default_value = "0.5,1.0,2.5,5.0,10.0")]
    pub lambdas: Vec<f64>,
    #[arg(long = "tau", value_delimiter = ',', default_value = "1.0,2.0,4.0,6.0,8.0")]
    pub taus: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub target_domain: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// A command failure carrying its exit code.
#[derive(Debug)]
pub enum Failure {
    Partial(String),
    Config(String),
    Numeric(String),
    Checkpoint(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Partial(_) | Failure::Runtime(_) => 1,
            Failure::Config(_) => 2,
            Failure::Numeric(_) => 3,
            Failure::Checkpoint(_) => 4,
        }
    }

    fn from_run(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } => Failure::Numeric(e.to_string()),
            Error::Parameter { .. } | Error::UnsupportedClassCount { .. } | Error::Json(_) => {
                Failure::Config(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Partial(m) => write!(f, "partial failure: {m}"),
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Numeric(m) => write!(f, "numeric failure: {m}"),
            Failure::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
            Failure::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

/// Parse arguments, run the command, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{f}");
            f.exit_code()
        }
    }
}

fn dispatch(command: Command) -> CmdResult {
    match command {
        Command::Train(a) => cmd_train(&a),
        Command::Protocol(a) => cmd_protocol(&a),
        Command::Probe(a) => cmd_probe(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::ExportData(a) => cmd_export(&a),
    }
}

fn load_config(path: Option<&Path>) -> CmdResult<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", p.display())))?;
            ExperimentConfig::from_json(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))
        }
    }
}

impl ConfigArgs {
    fn resolve(&self) -> CmdResult<ExperimentConfig> {
        let mut cfg = load_config(self.config.as_deref())?;
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.lr0 {
            cfg.train.lr0 = v;
        }
        if let Some(v) = self.eval_every {
            cfg.train.eval_every = v;
        }
        if let Some(v) = self.samples_per_class {
            cfg.dataset.samples_per_class_per_domain = v;
        }
        if let Some(v) = self.style_gap {
            cfg.dataset.style_gap = v;
        }
        if let Some(v) = self.data_seed {
            cfg.dataset.seed = v;
        }
        if self.output_dir.is_some() {
            cfg.output_dir = self.output_dir.clone();
        }
        cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
        Ok(cfg)
    }
}

fn output_root(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
}

pub fn run_id(method: Method, domain: &str, seed: u64) -> String {
    format!("{method}_{domain}_{seed}")
}

fn check_domain(cfg: &ExperimentConfig, domain: usize, what: &str) -> CmdResult {
    if domain >= cfg.dataset.num_domains {
        return Err(Failure::Config(format!(
            "{what} {domain} out of range for {} domains",
            cfg.dataset.num_domains
        )));
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    Target(usize),
    Source(usize),
}

impl Split {
    fn label(self) -> String {
        match self {
            Split::Target(d) => d.to_string(),
            Split::Source(d) => format!("src{d}"),
        }
    }

    fn domain(self) -> usize {
        match self {
            Split::Target(d) | Split::Source(d) => d,
        }
    }
}

/// One training job: config with overrides applied, split, and run dir.
struct Cell {
    cfg: ExperimentConfig,
    split: Split,
    dir: PathBuf,
}

fn cell_complete(dir: &Path) -> bool {
    [METRICS_FILE, FINAL_CKPT, BEST_CKPT].iter().all(|f| dir.join(f).is_file())
}

fn final_accuracy(dir: &Path) -> CmdResult<f64> {
    let records = training::read_metrics(&dir.join(METRICS_FILE)).map_err(|e| Failure::Runtime(e.to_string()))?;
    Ok(records.last().map_or(0.0, |r| r.target_acc))
}

fn run_cell(cell: &Cell, force: bool) -> CmdResult<(f64, bool)> {
    if !force && cell_complete(&cell.dir) {
        return Ok((final_accuracy(&cell.dir)?, true));
    }
    let (target, source) = match cell.split {
        Split::Target(d) => (Some(d), None),
        Split::Source(d) => (None, Some(d)),
    };
    let out = RunOutput {
        dir: cell.dir.clone(),
        config_hash: cell.cfg.hash(),
        dataset: Some(cell.cfg.dataset.clone()),
        target_domain: target,
        source_domain: source,
    };
    let (train_set, eval_set) =
        training::protocol_split(&cell.cfg.dataset, target, source).map_err(Failure::from_run)?;
    let outcome = training::train_on(
        &cell.cfg.train,
        cell.cfg.dataset.num_classes,
        &train_set,
        &eval_set,
        Some(&out),
    )
    .map_err(Failure::from_run)?;
    Ok((outcome.final_record().map_or(0.0, |r| r.target_acc), false))
}

/// Runs `cells` on up to `jobs` threads; results keep cell order.
fn run_cells(cells: &[Cell], jobs: usize, force: bool) -> Vec<CmdResult<(f64, bool)>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CmdResult<(f64, bool)>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, cells.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let r = run_cell(&cells[i], force);
                results.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}

pub fn cmd_train(args: &TrainArgs) -> CmdResult {
    let mut cfg = args.common.resolve()?;
    if let Some(m) = args.method {
        cfg.train.method = m;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    cfg.train.record_timing |= args.timing;
    check_domain(&cfg, args.target_domain, "target domain")?;
    let split = Split::Target(args.target_domain);
    let dir = output_root(&cfg).join(run_id(cfg.train.method, &split.label(), cfg.train.seed));
    let cell = Cell { cfg, split, dir };
    let (acc, _) = run_cell(&cell, true)?;
    println!("{}: final target accuracy {acc:.4}", cell.dir.display());
    Ok(())
}

#[derive(Serialize)]
struct SidecarMeta<'a> {
    command: &'a str,
    config_hash: String,
    seeds: Vec<u64>,
    #[serde(flatten)]
    extra: serde_json::Value,
}

pub fn cmd_protocol(args: &ProtocolArgs) -> CmdResult {
    let base = args.common.resolve()?;
    if args.methods.is_empty() || args.seeds.is_empty() {
        return Err(Failure::Config("methods and seeds must be non-empty".into()));
    }
    let root = output_root(&base);
    let mut cells = Vec::new();
    for &method in &args.methods {
        for d in 0..base.dataset.num_domains {
            for &seed in &args.seeds {
                let mut cfg = base.clone();
                cfg.train.method = method;
                cfg.train.seed = seed;
                let split = match args.protocol {
                    ProtocolKind::Lodo => Split::Target(d),
                    ProtocolKind::SingleSource => Split::Source(d),
                };
                let dir = root.join(run_id(method, &split.label(), seed));
                cells.push(Cell { cfg, split, dir });
            }
        }
    }
    let results = run_cells(&cells, args.jobs, args.force);

    std::fs::create_dir_all(&root).map_err(|e| Failure::Runtime(format!("{}: {e}", root.display())))?;
    let path = root.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Failure::Runtime(e.to_string()))?;
    let csv_err = |e: csv::Error| Failure::Runtime(e.to_string());
    w.write_record(["method", "domain", "seed", "target_acc", "status"]).map_err(csv_err)?;
    let mut failed = 0;
    for (cell, r) in cells.iter().zip(&results) {
        let (acc, status) = match r {
            Ok((a, _)) => (format!("{a}"), "ok".to_string()),
            Err(e) => {
                failed += 1;
                (String::new(), e.to_string())
            }
        };
        w.write_record([
            cell.cfg.train.method.as_str().to_string(),
            cell.split.domain().to_string(),
            cell.cfg.train.seed.to_string(),
            acc,
            status,
        ])
        .map_err(csv_err)?;
    }
    println!("{:<16} {:>10} {:>6}", "method", "mean_acc", "cells");
    for &method in &args.methods {
        let accs: Vec<f64> = cells
            .iter()
            .zip(&results)
            .filter(|(c, _)| c.cfg.train.method == method)
            .filter_map(|(_, r)| r.as_ref().ok().map(|(a, _)| *a))
            .collect();
        let mean = if accs.is_empty() {
            f64::NAN
        } else {
            accs.iter().sum::<f64>() / accs.len() as f64
        };
        println!("{:<16} {:>10.4} {:>6}", method.as_str(), mean, accs.len());
        w.write_record([
            method.as_str().to_string(),
            "average".to_string(),
            "all".to_string(),
            format!("{mean}"),
            format!("mean of {} cells", accs.len()),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Failure::Runtime(e.to_string()))?;
    write_json(
        &root.join("meta.json"),
        &SidecarMeta {
            command: "protocol",
            config_hash: base.hash(),
            seeds: args.seeds.clone(),
            extra: serde_json::json!({
                "protocol": match args.protocol { ProtocolKind::Lodo => "lodo", ProtocolKind::SingleSource => "single_source" },
                "methods": args.methods,
            }),
        },
    )?;
    if failed > 0 {
        return Err(Failure::Partial(format!("{failed} of {} cells failed", cells.len())));
    }
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs) -> CmdResult {
    let mut base = args.common.resolve()?;
    if args.lambdas.is_empty() || args.taus.is_empty() {
        return Err(Failure::Config("lambda and tau grids must be non-empty".into()));
    }
    if args.common.epochs.is_none() {
        base.train.epochs = SWEEP_EPOCHS;
    }
    if let Some(s) = args.seed {
        base.train.seed = s;
    }
    base.train.method = Method::Xded;
    check_domain(&base, args.target_domain, "target domain")?;
    let root = output_root(&base);
    let mut cells = Vec::new();
    for &lambda in &args.lambdas {
        for &tau in &args.taus {
            let mut cfg = base.clone();
            cfg.train.xded.lambda = lambda;
            cfg.train.xded.tau = tau;
            cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
            let split = Split::Target(args.target_domain);
            let dir = root
                .join(format!("sweep_lambda{lambda}_tau{tau}"))
                .join(run_id(Method::Xded, &split.label(), cfg.train.seed));
            cells.push(Cell { cfg, split, dir });
        }
    }
    let results = run_cells(&cells, args.jobs, args.force);
    std::fs::create_dir_all(&root).map_err(|e| Failure::Runtime(format!("{}: {e}", root.display())))?;
    let mut w = csv::Writer::from_path(root.join("sweep.csv")).map_err(|e| Failure::Runtime(e.to_string()))?;
    let csv_err = |e: csv::Error| Failure::Runtime(e.to_string());
    w.write_record(["lambda", "tau", "target_acc", "status"]).map_err(csv_err)?;
    let mut failed = 0;
    let mut numeric = None;
    for (cell, r) in cells.iter().zip(&results) {
        let (acc, status) = match r {
            Ok((a, _)) => (format!("{a}"), "ok".to_string()),
            Err(e) => {
                failed += 1;
                if matches!(e, Failure::Numeric(_)) {
                    numeric = Some(e.to_string());
                }
                (String::new(), e.to_string())
            }
        };
        w.write_record([
            format!("{}", cell.cfg.train.xded.lambda),
            format!("{}", cell.cfg.train.xded.tau),
            acc,
            status,
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Failure::Runtime(e.to_string()))?;
    write_json(
        &root.join("sweep.meta.json"),
        &SidecarMeta {
            command: "sweep",
            config_hash: base.hash(),
            seeds: vec![base.train.seed],
            extra: serde_json::json!({ "target_domain": args.target_domain }),
        },
    )?;
    match (failed, numeric) {
        (0, _) => Ok(()),
        (n, _) if n < cells.len() => Err(Failure::Partial(format!("{n} of {} cells failed", cells.len()))),
        (_, Some(m)) => Err(Failure::Numeric(m)),
        (n, None) => Err(Failure::Partial(format!("{n} of {n} cells failed"))),
    }
}

pub fn cmd_export(args: &ExportArgs) -> CmdResult {
    let cfg = args.common.resolve()?;
    let samples = data::generate_dataset(&cfg.dataset).map_err(Failure::from_run)?;
    data::export_dataset(&args.out, &cfg.dataset, &samples).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("wrote {} samples to {}", samples.len(), args.out.display());
    Ok(())
}

fn probe_split(meta: &CheckpointMeta) -> CmdResult<(Vec<DomainSample>, Vec<DomainSample>)> {
    let dataset = meta.dataset.clone().unwrap_or_else(DatasetSpec::default);
    match (meta.target_domain, meta.source_domain) {
        (None, None) => {
            let all = data::generate_dataset(&dataset).map_err(Failure::from_run)?;
            Ok((all.clone(), all))
        }
        (t, s) => training::protocol_split(&dataset, t, s).map_err(|e| Failure::Checkpoint(e.to_string())),
    }
}

#[derive(Serialize)]
struct ProbeMeta<'a> {
    probe: &'a str,
    checkpoint: String,
    config_hash: &'a str,
    seed: u64,
    samples: usize,
}

#[derive(Serialize)]
struct EntropyReport {
    mean_prediction_entropy: f64,
    max_entropy: f64,
    num_samples: usize,
}

pub fn cmd_probe(args: &ProbeArgs) -> CmdResult {
    let (meta, params) =
        model::load_checkpoint(&args.ckpt).map_err(|e| Failure::Checkpoint(format!("{}: {e}", args.ckpt.display())))?;
    params
        .check_layout(&meta.spec)
        .map_err(|e| Failure::Checkpoint(e.to_string()))?;
    let analysis_cfg = load_config(args.config.as_deref())?.analysis;
    let seed = args.seed.unwrap_or(meta.seed);
    let n = args.samples.unwrap_or(analysis_cfg.probe_samples);
    let (source, target) = probe_split(&meta)?;
    let dir = args.ckpt.parent().map(Path::to_path_buf).unwrap_or_default();
    let spec = &meta.spec;
    let loss_set = match args.split {
        SplitKind::Source => data::subsample(&source, n, seed),
        SplitKind::Target => data::subsample(&target, n, seed),
    };
    let run = Failure::from_run;

    let (name, used) = match args.probe {
        ProbeKind::Flatness => {
            let objective = NetworkLoss::new(spec, &params, &loss_set).map_err(run)?;
            let sigmas = args.sigma.clone().unwrap_or(analysis_cfg.sigmas);
            let runs = args.runs.unwrap_or(analysis_cfg.flatness_runs);
            let curve = analysis::flatness_probe(&objective, &params.flatten(), &sigmas, runs, seed).map_err(run)?;
            curve.write_csv(&dir.join("flatness.csv")).map_err(run)?;
            ("flatness", loss_set.len())
        }
        ProbeKind::Adist => {
            let src = data::subsample(&source, n, seed);
            let tgt = data::subsample(&target, n, seed);
            let (_, src_emb) = model::evaluate(&params, spec, &data::stack_images(&src).map_err(run)?).map_err(run)?;
            let (_, tgt_emb) = model::evaluate(&params, spec, &data::stack_images(&tgt).map_err(run)?).map_err(run)?;
            let d = analysis::proxy_a_distance(&src_emb, &tgt_emb, seed).map_err(run)?;
            write_json(&dir.join("adist.json"), &d)?;
            ("adist", src.len() + tgt.len())
        }
        ProbeKind::Landscape => {
            let objective = NetworkLoss::new(spec, &params, &loss_set).map_err(run)?;
            let theta = params.flatten();
            let power = PowerConfig {
                seed,
                ..analysis_cfg.power
            };
            let dirs = analysis::top_hessian_directions(&objective, &theta, &power).map_err(run)?;
            if dirs.directions.len() < 2 {
                return Err(Failure::Config("landscape needs analysis.power.k >= 2".into()));
            }
            let grid = analysis::loss_landscape(
                &objective,
                &theta,
                [&dirs.directions[0], &dirs.directions[1]],
                args.extent.unwrap_or(analysis_cfg.landscape_extent),
                args.grid.unwrap_or(analysis_cfg.landscape_grid),
            )
            .map_err(run)?;
            grid.write_csv(&dir.join("landscape.csv")).map_err(run)?;
            write_json(
                &dir.join("hessian.json"),
                &serde_json::json!({
                    "ritz_values": dirs.ritz_values,
                    "converged": dirs.converged,
                    "iterations": dirs.iterations,
                    "base_loss": objective.loss(&theta).map_err(run)?,
                }),
            )?;
            ("landscape", loss_set.len())
        }
        ProbeKind::Attack => {
            let eval = data::subsample(&target, n, seed);
            let images = data::stack_images(&eval).map_err(run)?;
            let labels = data::labels_of(&eval);
            let mut pgd = PgdConfig {
                seed,
                ..analysis_cfg.attack
            };
            if let Some(e) = args.epsilon {
                pgd.epsilon = e;
            }
            if let Some(s) = args.steps {
                pgd.steps = s;
            }
            if args.alpha.is_some() {
                pgd.alpha = args.alpha;
            }
            if args.no_random_start {
                pgd.random_start = false;
            }
            let net = Network { params: &params, spec };
            let report = analysis::attack_report(&net, &images, &labels, &pgd).map_err(run)?;
            write_json(&dir.join("attack.json"), &report)?;
            ("attack", eval.len())
        }
        ProbeKind::Entropy => {
            let h = training::entropy_of_predictions(&params, spec, &source).map_err(run)?;
            write_json(
                &dir.join("entropy.json"),
                &EntropyReport {
                    mean_prediction_entropy: h,
                    max_entropy: (spec.num_classes as f64).ln(),
                    num_samples: source.len(),
                },
            )?;
            ("entropy", source.len())
        }
    };
    write_json(
        &dir.join(format!("{name}.meta.json")),
        &ProbeMeta {
            probe: name,
            checkpoint: args
                .ckpt
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            config_hash: &meta.config_hash,
            seed,
            samples: used,
        },
    )?;
    println!("{name} probe written to {}", dir.display());
    Ok(())
}
