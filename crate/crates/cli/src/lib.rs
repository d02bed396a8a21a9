//! The `vhgm` command line: benchmark generation, training, evaluation,
//! correlation probes, table-integration runs, and the HTTP service.

pub mod bundle;
pub mod config;

use std::fs::File;
use std::io::BufWriter;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};
use vhgm_core::checkpoint::{Checkpoint, Model, ModelKind};
use vhgm_core::eval::{correlation_probe, evaluate, write_probe_csv, ConstantImputer};
use vhgm_core::model::Imputer;
use vhgm_core::ood::{ood_experiment, SourceSplits};
use vhgm_core::schema::{merge_tables, ColumnStats, HeteroTable};
use vhgm_core::synth::Benchmark;
use vhgm_core::train::train;

use bundle::{write_bundle, Bundle};

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "vhgm", version, about = "Heterogeneous tabular imputation models")]
pub struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// Seed for data generation, initialization, masking and sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample the synthetic benchmark bundle.
    Generate {
        #[arg(long, default_value = "bench")]
        out: PathBuf,
    },
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Score a checkpoint or a baseline on held-out cells.
    Evaluate(EvaluateArgs),
    /// Sweep one attribute and record another's prediction.
    Probe(ProbeArgs),
    /// Pool all blocks but one and test on the one left out.
    Ood(OodArgs),
    /// Run the HTTP prediction service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Hivae,
    Mae,
}

impl From<Kind> for ModelKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Hivae => ModelKind::Hivae,
            Kind::Mae => ModelKind::Mae,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Mode,
    ModeMean,
}

/// Training overrides; each one beats the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub stage2_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub val_missing_rate: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// `masked` or `reconstruction`.
    #[arg(long)]
    pub loss_mode: Option<String>,
    #[arg(long)]
    pub mask_augmentation: Option<bool>,
}

impl TrainFlags {
    fn to_map(&self, seed: Option<u64>) -> Map<String, Value> {
        let mut m = Map::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        put("epochs", self.epochs.map(Value::from));
        put("stage2_epochs", self.stage2_epochs.map(Value::from));
        put("batch_size", self.batch_size.map(Value::from));
        put("learning_rate", self.lr.map(Value::from));
        put("weight_decay", self.weight_decay.map(Value::from));
        put("mask_ratio", self.mask_ratio.map(Value::from));
        put("val_missing_rate", self.val_missing_rate.map(Value::from));
        put("patience", self.patience.map(Value::from));
        put("loss_mode", self.loss_mode.clone().map(Value::from));
        put("mask_augmentation", self.mask_augmentation.map(Value::from));
        put("seed", seed.map(Value::from));
        m
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub model: Kind,
    /// JSON file with optional `model` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "bench")]
    pub data: PathBuf,
    /// Run directory; defaults to `runs/<model>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Resolve and record the configuration without training.
    #[arg(long)]
    pub dry_run: bool,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    #[arg(long, default_value = "bench")]
    pub data: PathBuf,
    /// Test CSVs; defaults to every test split in the bundle.
    #[arg(long)]
    pub test: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.99)]
    pub missing_rate: f64,
    /// Report directory; defaults to `reports/<model id>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Swept attribute id (real or positive).
    #[arg(long)]
    pub x: String,
    /// Attribute id whose prediction is recorded.
    #[arg(long)]
    pub y: String,
    /// `lo:hi:points`; defaults to 20 points over the training mean +- 2 sd.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub n_sampling: usize,
    #[arg(long, default_value = "probe.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OodArgs {
    /// Name of the block left out of training.
    #[arg(long)]
    pub hold_out: String,
    #[arg(long, value_enum)]
    pub model: Kind,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "bench")]
    pub data: PathBuf,
    #[arg(long, default_value = "ood")]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Directory with `schemas/` and `models/` subdirectories.
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub listen: SocketAddr,
    #[arg(long)]
    pub default_model: Option<String>,
    #[arg(long, default_value_t = vhgm_service::DEFAULT_MAX_SAMPLING_N)]
    pub max_n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Runtime,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Validation, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Runtime, message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Validation => EXIT_VALIDATION,
            ErrorKind::Runtime => EXIT_RUNTIME,
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self, command: &str) -> String {
        let kind = match self.kind {
            ErrorKind::Validation => "validation",
            ErrorKind::Runtime => "runtime",
        };
        json!({ "error": { "kind": kind, "command": command, "message": self.message } }).to_string()
    }
}

impl From<vhgm_core::Error> for CliError {
    fn from(e: vhgm_core::Error) -> Self {
        use vhgm_core::Error as E;
        match e {
            E::Io(_)
            | E::NotPositiveDefinite
            | E::EmptyKeyRow(_)
            | E::NonpositiveVariance
            | E::DimensionMismatch { .. } => Self::runtime(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::validation(e.to_string())
    }
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::Probe(_) => "probe",
            Command::Ood(_) => "ood",
            Command::Serve(_) => "serve",
        }
    }
}

struct Ctx {
    workdir: PathBuf,
    seed: Option<u64>,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_relative() {
            self.workdir.join(p)
        } else {
            p.to_path_buf()
        }
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

/// Runs one subcommand; the returned string is printed to stdout.
pub fn run(cli: Cli) -> Result<String, CliError> {
    let ctx = Ctx { workdir: cli.workdir, seed: cli.seed };
    match cli.command {
        Command::Generate { out } => generate(&ctx, &out),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Evaluate(a) => evaluate_cmd(&ctx, a),
        Command::Probe(a) => probe_cmd(&ctx, a),
        Command::Ood(a) => ood_cmd(&ctx, a),
        Command::Serve(a) => serve_cmd(&ctx, a),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn generate(ctx: &Ctx, out: &Path) -> Result<String, CliError> {
    let dir = ctx.path(out);
    let bench = Benchmark::generate(ctx.seed())?;
    let sums = write_bundle(&bench, &dir)?;
    let rows: usize = bench.design.total_rows();
    Ok(format!("wrote {} files ({rows} rows, {} attributes) to {}", sums.len(), bench.schema().len(), dir.display()))
}

fn load_config(
    ctx: &Ctx,
    kind: ModelKind,
    file: Option<&Path>,
    flags: &TrainFlags,
) -> Result<config::RunConfig, CliError> {
    let file = file.map(|p| config::read_file(&ctx.path(p))).transpose()?;
    config::resolve(kind, file, flags.to_map(ctx.seed))
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> Result<String, CliError> {
    let kind = ModelKind::from(a.model);
    let rc = load_config(ctx, kind, a.config.as_deref(), &a.flags)?;
    let out = ctx.path(&a.out.unwrap_or_else(|| PathBuf::from("runs").join(kind.as_str())));
    write_json(&out.join("config.json"), &rc)?;
    if a.dry_run {
        return Ok(format!("configuration written to {}", out.join("config.json").display()));
    }
    let data = Bundle::load(&ctx.path(&a.data))?;
    let stats = data.train_stats()?;
    let mut model = Model::new(&data.schema, &stats, &rc.model, rc.train.seed)?;
    let history = train(&mut model, &data.train, &data.val, &rc.train, None)?;
    Checkpoint::from_model(&model).save(&out.join("checkpoint.json"))?;
    write_json(
        &out.join("history.json"),
        &json!({ "format_version": config::RUN_FORMAT_VERSION, "history": history }),
    )?;
    Ok(format!(
        "trained {kind} for {} epochs (best {:?}, objective {:?}); run written to {}",
        history.records.len(),
        history.best_epoch,
        history.best_objective,
        out.display()
    ))
}

fn load_checkpoint(ctx: &Ctx, p: &Path) -> Result<(Model, String), CliError> {
    let path = ctx.path(p);
    if !path.is_file() {
        return Err(CliError::validation(format!("checkpoint {} not found", path.display())));
    }
    let model = Checkpoint::load(&path)?.to_model()?;
    let id = path
        .parent()
        .and_then(|d| d.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| model.kind().to_string());
    Ok((model, id))
}

fn evaluate_cmd(ctx: &Ctx, a: EvaluateArgs) -> Result<String, CliError> {
    if !(0.0..=1.0).contains(&a.missing_rate) {
        return Err(CliError::validation(format!("missing rate {} outside [0, 1]", a.missing_rate)));
    }
    let needs_bundle = a.baseline.is_some() || a.test.is_empty();
    let data = needs_bundle.then(|| Bundle::load(&ctx.path(&a.data))).transpose()?;
    let (imputer, id): (Box<dyn Imputer>, String) = match (&a.checkpoint, a.baseline) {
        (Some(p), _) => {
            let (m, id) = load_checkpoint(ctx, p)?;
            (Box::new(m), id)
        }
        (None, Some(b)) => {
            let data = data.as_ref().expect("bundle loaded for baselines");
            let merged = data.merged(&data.train)?;
            let stats = data.train_stats()?;
            match b {
                Baseline::Mode => (Box::new(ConstantImputer::mode(&merged, &data.schema, &stats)?), "mode".into()),
                Baseline::ModeMean => {
                    (Box::new(ConstantImputer::mode_mean(&merged, &data.schema, &stats)?), "mode-mean".into())
                }
            }
        }
        (None, None) => return Err(CliError::validation("give --checkpoint or --baseline")),
    };
    let schema = imputer.schema();
    let tables: Vec<HeteroTable> = if a.test.is_empty() {
        data.expect("bundle loaded without --test").test
    } else {
        a.test
            .iter()
            .map(|p| {
                let p = ctx.path(p);
                let f = File::open(&p).map_err(|e| CliError::validation(format!("test table {}: {e}", p.display())))?;
                let tag = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                Ok(HeteroTable::read_csv(std::io::BufReader::new(f), schema.version, &tag)?)
            })
            .collect::<Result<_, CliError>>()?
    };
    let test = merge_tables(&tables, schema)?;
    let report = evaluate(imputer.as_ref(), &test, a.missing_rate, ctx.seed(), &id)?;
    let out = ctx.path(&a.out.unwrap_or_else(|| PathBuf::from("reports").join(&id)));
    std::fs::create_dir_all(&out)?;
    report.write_csv(BufWriter::new(File::create(out.join("report.csv"))?))?;
    std::fs::write(out.join("report.json"), report.to_json()?)?;
    Ok(format!(
        "{id}: total {:.6} (column mean {:.6}) at missing rate {}",
        report.total, report.column_mean, a.missing_rate
    ))
}

/// Parses `lo:hi:points` into an evenly spaced grid.
pub fn parse_grid(s: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::validation(format!("grid `{s}` is not lo:hi:points"));
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, n] = parts[..] else { return Err(bad()) };
    let (lo, hi): (f64, f64) = (lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?);
    let n: usize = n.trim().parse().map_err(|_| bad())?;
    if n == 0 || !lo.is_finite() || !hi.is_finite() || (n > 1 && hi <= lo) {
        return Err(bad());
    }
    Ok(linspace(lo, hi, n))
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

fn probe_cmd(ctx: &Ctx, a: ProbeArgs) -> Result<String, CliError> {
    let (model, _) = load_checkpoint(ctx, &a.checkpoint)?;
    let schema = model.schema();
    let idx = |id: &str| {
        schema.index_of(id).ok_or_else(|| CliError::validation(format!("attribute `{id}` is not in the schema")))
    };
    let (x, y) = (idx(&a.x)?, idx(&a.y)?);
    let grid = match &a.grid {
        Some(g) => parse_grid(g)?,
        None => match &model.stats().columns[x] {
            ColumnStats::Real { mean, std } => linspace(mean - 2.0 * std, mean + 2.0 * std, 20),
            ColumnStats::Positive { log_mean, log_std } => {
                linspace((log_mean - 2.0 * log_std).exp(), (log_mean + 2.0 * log_std).exp(), 20)
            }
            _ => return Err(CliError::validation(format!("probe input `{}` must be real or positive", a.x))),
        },
    };
    let points = correlation_probe(&model, x, y, &grid, a.n_sampling, ctx.seed())?;
    let out = ctx.path(&a.out);
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_probe_csv(&points, BufWriter::new(File::create(&out)?))?;
    write_json(
        &out.with_extension("json"),
        &json!({ "format_version": 1, "x": a.x, "y": a.y, "n_sampling": a.n_sampling, "seed": ctx.seed(), "points": points }),
    )?;
    Ok(format!("{} grid points written to {}", points.len(), out.display()))
}

fn ood_cmd(ctx: &Ctx, a: OodArgs) -> Result<String, CliError> {
    let kind = ModelKind::from(a.model);
    let rc = load_config(ctx, kind, a.config.as_deref(), &a.flags)?;
    let data = Bundle::load(&ctx.path(&a.data))?;
    let held_out = data.block_index(&a.hold_out)?;
    let sources: Vec<SourceSplits> = (0..data.names.len())
        .map(|k| SourceSplits {
            name: data.names[k].clone(),
            train: data.train[k].clone(),
            val: data.val[k].clone(),
            test: data.test[k].clone(),
        })
        .collect();
    let table = ood_experiment(&data.schema, &sources, held_out, &rc.model, &rc.train)?;
    let out = ctx.path(&a.out);
    std::fs::create_dir_all(&out)?;
    let stem = format!("{}_{}", kind.as_str(), a.hold_out);
    table.write_csv(BufWriter::new(File::create(out.join(format!("{stem}.csv")))?))?;
    write_json(&out.join(format!("{stem}.json")), &json!({ "format_version": 1, "config": rc, "table": table }))?;
    Ok(format!(
        "held out {}: combined {:.6}, worst single {:.6}",
        table.held_out,
        table.combined().report.total,
        table.worst_single()
    ))
}

fn serve_cmd(ctx: &Ctx, a: ServeArgs) -> Result<String, CliError> {
    let cfg = vhgm_service::ServiceConfig {
        listen: a.listen,
        registry_dir: a.registry.map(|p| ctx.path(&p)),
        default_model: a.default_model,
        max_sampling_n: a.max_n,
    };
    if let Some(dir) = &cfg.registry_dir {
        if !dir.is_dir() {
            return Err(CliError::validation(format!("registry {} is not a directory", dir.display())));
        }
    }
    vhgm_service::AppState::from_config(&cfg).map_err(|e| CliError::validation(e.body.message))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(vhgm_service::serve(cfg))?;
    Ok("service stopped".into())
}
