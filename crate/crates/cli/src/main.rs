//! `elastic`: train, evaluate, audit and plot multi-exit networks.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use elastic_core::backbones::KNOWN_BACKBONES;
use elastic_core::checkpoint::{load_checkpoint, save_checkpoint};
use elastic_core::config::{DatasetKind, RunConfig};
use elastic_core::data::{self, Samples};
use elastic_core::experiment::{self, DataSplits};
use elastic_core::{metrics, training, BackboneConfig, CostTable, FeatureShape, MetricsLog};

#[derive(Parser)]
#[command(name = "elastic", version, about = "Multi-exit CNN toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-phase training; writes checkpoint.elnet, metrics.csv and summary.txt.
    Train(TrainArgs),
    /// Per-exit test error of a checkpoint.
    Eval(EvalArgs),
    /// Per-exit cost table of a backbone preset or a checkpoint.
    Audit(AuditArgs),
    /// Total-loss curves from one or more metrics CSVs, as SVG.
    Curves(CurvesArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long, overrides_with = "no_elastic")]
    elastic: bool,
    #[arg(long)]
    no_elastic: bool,
    /// Intermediate exits to keep, 1-based (e.g. 2,6,9,12).
    #[arg(long)]
    keep_exits: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    epochs1: Option<usize>,
    #[arg(long)]
    epochs2: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    #[arg(long, default_value = "mnist")]
    dataset: String,
    #[arg(long)]
    data_dir: PathBuf,
    /// Without official test files, evaluate on the samples a run with this
    /// subsample size and seed left out.
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    /// Backbone name or checkpoint path.
    target: String,
    /// Input shape for mini backbones, HxWxC.
    #[arg(long, default_value = "32x32x3")]
    input: String,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct CurvesArgs {
    #[arg(required = true)]
    csv: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated run labels; defaults to the file stems.
    #[arg(long)]
    labels: Option<String>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Audit(a) => audit(a),
        Command::Curves(a) => curves(a),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let mut set = |key: &str, value: Option<String>| -> Result<()> {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
        Ok(())
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    set("backbone", a.backbone.clone())?;
    if a.elastic || a.no_elastic {
        set("elastic", Some(a.elastic.to_string()))?;
    }
    set("keep_exits", a.keep_exits.clone())?;
    set("dataset", a.dataset.clone())?;
    set("data_dir", path(&a.data_dir))?;
    set("per_class", a.per_class.map(|v| v.to_string()))?;
    set("epochs1", a.epochs1.map(|v| v.to_string()))?;
    set("epochs2", a.epochs2.map(|v| v.to_string()))?;
    set("lr", a.lr.map(|v| v.to_string()))?;
    set("momentum", a.momentum.map(|v| v.to_string()))?;
    set("batch", a.batch.map(|v| v.to_string()))?;
    set("patience", a.patience.map(|v| v.to_string()))?;
    set("seed", a.seed.map(|v| v.to_string()))?;
    set("out", path(&a.out))?;
    Ok(cfg)
}

fn percent_table(errors: &[f64]) -> String {
    let mut s = String::from("exit  error(%)\n");
    for (i, e) in errors.iter().enumerate() {
        writeln!(s, "{:>4}  {:>8.2}", i + 1, e * 100.0).unwrap();
    }
    s
}

fn percent_csv(errors: &[f64]) -> String {
    let mut s = String::from("exit,error_percent\n");
    for (i, e) in errors.iter().enumerate() {
        writeln!(s, "{},{:.2}", i + 1, e * 100.0).unwrap();
    }
    s
}

fn summary(cfg: &RunConfig, data: &DataSplits, log: &MetricsLog, table: &CostTable, test: Option<&[f64]>) -> String {
    let mut s = String::new();
    writeln!(s, "backbone: {}", cfg.backbone).unwrap();
    writeln!(s, "elastic: {}", cfg.elastic).unwrap();
    writeln!(s, "exits: {}", log.exits).unwrap();
    writeln!(s, "dataset: {} ({})", cfg.dataset, cfg.data_dir.display()).unwrap();
    writeln!(s, "train/val samples: {}/{}", data.train.len(), data.val.len()).unwrap();
    writeln!(
        s,
        "epochs: {} + {}, lr {}, momentum {}, batch {}, seed {}",
        cfg.train.phase1_epochs, cfg.train.phase2_epochs, cfg.train.lr, cfg.train.momentum, cfg.train.batch_size, cfg.train.seed
    )
    .unwrap();
    if let Some(last) = log.records.last() {
        writeln!(s, "final lr: {}", last.lr).unwrap();
        writeln!(s, "final val loss: {:.6}", last.val_loss_total).unwrap();
    }
    if let Some(reason) = &log.halted {
        writeln!(s, "halted: {reason}").unwrap();
    }
    writeln!(s, "\ncosts:\n{table}").unwrap();
    match test {
        Some(errors) => writeln!(s, "test errors:\n{}", percent_table(errors)).unwrap(),
        None => writeln!(s, "no test split available").unwrap(),
    }
    s
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = run_config(&a)?;
    cfg.train.validate()?;
    let data = experiment::load_splits(&cfg)?;
    eprintln!(
        "training {} ({}) on {} train / {} val samples",
        cfg.backbone,
        if cfg.elastic { "elastic" } else { "plain" },
        data.train.len(),
        data.val.len()
    );
    let mut net = experiment::build_network(&cfg, data.train.shape, data.train.classes)?;
    let loss = experiment::loss_config(&cfg, &net);
    let log = training::train(&mut net, &data.train, &data.val, &cfg.train, &loss)?;

    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    write(&cfg.out.join("metrics.csv"), metrics::to_csv(&log))?;
    if let Some(reason) = &log.halted {
        bail!("training halted: {reason}; partial metrics in {}", cfg.out.join("metrics.csv").display());
    }
    let test = match &data.test {
        Some(t) => Some(training::evaluate(&net, t)?),
        None => None,
    };
    let table = net.cost_table()?;
    save_checkpoint(&net, &cfg.out.join("checkpoint.elnet"))?;
    let text = summary(&cfg, &data, &log, &table, test.as_deref());
    write(&cfg.out.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn eval_samples(a: &EvalArgs) -> Result<Samples> {
    let kind: DatasetKind = a.dataset.parse()?;
    let (pool, official) = experiment::load_raw(kind, &a.data_dir)?;
    if let Some(t) = official.filter(|t| !t.is_empty()) {
        return Ok(Samples::from_dataset(&t));
    }
    let Some(k) = a.per_class else {
        return Ok(Samples::from_dataset(&pool));
    };
    let chosen = data::subsample_indices(&pool, k, a.seed)?;
    let rest: Vec<usize> = (0..pool.len()).filter(|i| chosen.binary_search(i).is_err()).collect();
    if rest.is_empty() {
        bail!("the subsample uses every sample; nothing left to evaluate");
    }
    Ok(Samples::from_dataset(&pool.select(&rest)))
}

fn eval(a: EvalArgs) -> Result<()> {
    let net = load_checkpoint(&a.checkpoint)?;
    let samples = eval_samples(&a)?;
    let want = net.graph().input_shape();
    if samples.shape != want {
        bail!(
            "dataset images are {}x{}x{}, checkpoint expects {}x{}x{}",
            samples.shape.h,
            samples.shape.w,
            samples.shape.c,
            want.h,
            want.w,
            want.c
        );
    }
    if samples.classes > net.classes() {
        bail!("dataset has {} classes, checkpoint predicts {}", samples.classes, net.classes());
    }
    let errors = training::evaluate(&net, &samples)?;
    print!("{}", percent_table(&errors));
    if let Some(path) = &a.csv {
        write(path, percent_csv(&errors))?;
    }
    Ok(())
}

fn parse_shape(s: &str) -> Result<FeatureShape> {
    let dims: Vec<usize> = s
        .split(['x', 'X'])
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("input shape {s:?} is not HxWxC"))?;
    match dims[..] {
        [h, w, c] => Ok(FeatureShape::new(h, w, c)),
        _ => bail!("input shape {s:?} is not HxWxC"),
    }
}

fn audit(a: AuditArgs) -> Result<()> {
    let path = Path::new(&a.target);
    let table = if path.is_file() {
        load_checkpoint(path)?.cost_table()?
    } else if KNOWN_BACKBONES.contains(&a.target.as_str()) {
        let graph = BackboneConfig::preset(&a.target, parse_shape(&a.input)?)?.build()?;
        elastic_core::budget::backbone_cost_audit(&graph, a.classes)?
    } else {
        bail!(
            "`{}` is neither a checkpoint file nor a known backbone; known backbones: {}",
            a.target,
            KNOWN_BACKBONES.join(", ")
        );
    };
    print!("{table}");
    if let Some(csv) = &a.csv {
        write(csv, table.to_csv())?;
    }
    Ok(())
}

fn curves(a: CurvesArgs) -> Result<()> {
    let labels: Vec<String> = match &a.labels {
        Some(l) => l.split(',').map(|s| s.trim().to_string()).collect(),
        None => a
            .csv
            .iter()
            .map(|p| p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned()))
            .collect(),
    };
    if labels.len() != a.csv.len() {
        bail!("{} labels for {} CSV files", labels.len(), a.csv.len());
    }
    let mut runs = Vec::with_capacity(a.csv.len());
    for (label, path) in labels.into_iter().zip(&a.csv) {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let log = metrics::parse_csv(&text).with_context(|| path.display().to_string())?;
        runs.push((label, log));
    }
    let svg = metrics::render_loss_curves(&runs)?;
    write(&a.out, svg)
}
