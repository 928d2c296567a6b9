use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::de::DeserializeOwned;
use walkdir::WalkDir;

use sarfuse::evaluation::{read_table_csv, render_markdown, report, write_table_csv, Averaging, EvalOptions, EvalTable};
use sarfuse::experiment::{evaluate_runs, run_bench, DatasetSpec, ExperimentPlan};
use sarfuse::models::{ForwardMode, Variant};
use sarfuse::simulator::{generate_dataset, SimConfig};
use sarfuse::training::{run_experiment, TrainConfig, CHECKPOINT_FILE};

/// Overrides every seed taken from flags defaults or config files.
const SEED_ENV: &str = "SARFUSE_SEED";
const RESULTS_FILE: &str = "results.csv";

#[derive(Parser)]
#[command(name = "sarfuse", version, about = "SAR/optical building segmentation with missing-optical reconstruction")]
struct Cli {
    /// Log more (-v info, -vv debug); RUST_LOG takes precedence.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise a paired SAR/optical dataset.
    Synth(SynthArgs),
    /// Train one variant for one or more seeds.
    Train(TrainArgs),
    /// Evaluate checkpoints on a split and merge the rows into a results file.
    Evaluate(EvaluateArgs),
    /// Render the table, markdown and chart from a results file.
    Report(ReportArgs),
    /// Train and evaluate every variant, then check the expected orderings.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON file with simulator settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sites: Option<usize>,
    /// Timestamps (tiles) per site.
    #[arg(long, alias = "timestamps")]
    tiles: Option<usize>,
    #[arg(long)]
    tile_size: Option<usize>,
    /// Probability that a sample's optical image is missing.
    #[arg(long)]
    dropout: Option<f64>,
    /// Std of the optical noise; 0 makes optical a function of SAR and label.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    speckle: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainOverrides {
    /// JSON file with training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// First seed; run k uses seed + k.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Reuse finished runs instead of retraining them.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: TrainOverrides,
    #[arg(long)]
    variant: Option<Variant>,
    /// Dataset root with train and val splits.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// A checkpoint file, or a directory searched for seed runs.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Directory of `results.csv`; existing rows for other runs are kept.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    #[arg(long)]
    per_site: bool,
    #[arg(long)]
    exclude_degenerate: bool,
    /// Treat every optical image as missing.
    #[arg(long)]
    force_missing: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding `results.csv` (as written by `evaluate`), or the file itself.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON experiment plan; without it the desk plan is used.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[command(flatten)]
    common: TrainOverrides,
    /// Existing dataset root instead of a synthesised one.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<Variant>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Precedence: config file, then the environment seed, then flags.
fn train_config(base: TrainConfig, o: &TrainOverrides) -> anyhow::Result<TrainConfig> {
    let mut c = match &o.config {
        Some(p) => read_json(p)?,
        None => base,
    };
    if let Some(s) = env_seed()? {
        c.seed = s;
    }
    c.seed = o.seed.unwrap_or(c.seed);
    c.num_runs = o.runs.unwrap_or(c.num_runs);
    c.max_epochs = o.epochs.unwrap_or(c.max_epochs);
    c.patience = o.patience.unwrap_or(c.patience);
    c.learning_rate = o.lr.unwrap_or(c.learning_rate);
    c.batch_size = o.batch_size.unwrap_or(c.batch_size);
    Ok(c)
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<ExitCode> {
    let mut c: SimConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SimConfig::default(),
    };
    if let Some(s) = env_seed()? {
        c.seed = s;
    }
    c.num_sites = a.sites.unwrap_or(c.num_sites);
    c.timestamps_per_site = a.tiles.unwrap_or(c.timestamps_per_site);
    c.tile_size = a.tile_size.unwrap_or(c.tile_size);
    c.dropout_rate = a.dropout.unwrap_or(c.dropout_rate);
    c.cross_modal_noise = a.noise.unwrap_or(c.cross_modal_noise);
    c.speckle_std = a.speckle.unwrap_or(c.speckle_std);
    c.seed = a.seed.unwrap_or(c.seed);
    c.validate()?;
    generate_dataset(&c, &a.out)?;
    println!("{}", a.out.join(sarfuse::data::MANIFEST_FILE).display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<ExitCode> {
    let mut c = train_config(TrainConfig::default(), &a.common)?;
    c.variant = a.variant.unwrap_or(c.variant);
    c.validate()?;
    let records = run_experiment(&c, &a.data, &a.out, a.common.resume)?;
    for r in &records {
        println!(
            "{} seed {}: best val F1 {:.4} at epoch {} ({} epochs)",
            r.variant, r.seed, r.best_val_f1, r.best_epoch, r.epochs_run
        );
    }
    Ok(ExitCode::SUCCESS)
}

/// `path` itself, or every `model.ckpt` at most two levels below it.
fn find_checkpoints(path: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        bail!("no checkpoint at {}", path.display());
    }
    let mut found = Vec::new();
    for entry in WalkDir::new(path).max_depth(3).sort_by_file_name() {
        let entry = entry.with_context(|| format!("listing {}", path.display()))?;
        if entry.file_type().is_file() && entry.file_name() == CHECKPOINT_FILE {
            found.push(entry.into_path());
        }
    }
    if found.is_empty() {
        bail!("no {CHECKPOINT_FILE} under {}", path.display());
    }
    Ok(found)
}

fn cmd_evaluate(a: EvaluateArgs) -> anyhow::Result<ExitCode> {
    let options = EvalOptions {
        threshold: a.threshold,
        averaging: if a.per_site { Averaging::PerSite } else { Averaging::Pooled },
        exclude_degenerate: a.exclude_degenerate,
        mode: if a.force_missing { ForwardMode::ForceMissing } else { ForwardMode::Auto },
    };
    options.validate()?;
    let checkpoints = find_checkpoints(&a.checkpoint)?;
    info!("evaluating {} checkpoint(s) on split {}", checkpoints.len(), a.split);
    let fresh = evaluate_runs(&checkpoints, &a.data, &a.split, &options)?;
    let results = a.out.join(RESULTS_FILE);
    let mut table = if results.is_file() { read_table_csv(&results)? } else { EvalTable::new() };
    table.merge(&fresh);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_table_csv(&table, &results)?;
    print!("{}", render_markdown(&table));
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(a: ReportArgs) -> anyhow::Result<ExitCode> {
    let input = if a.input.is_dir() { a.input.join(RESULTS_FILE) } else { a.input };
    let table = read_table_csv(&input)?;
    let files = report(&table, &a.out)?;
    print!("{}", fs::read_to_string(&files.markdown)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(a: BenchArgs) -> anyhow::Result<ExitCode> {
    let mut plan = match &a.plan {
        Some(p) => read_json::<ExperimentPlan>(p)?,
        None => {
            let out = a.out.clone().ok_or_else(|| usage("bench needs --out or --plan"))?;
            ExperimentPlan::desk(out)
        }
    };
    if let Some(out) = a.out {
        plan.out = out;
    }
    if let Some(d) = a.data {
        plan.dataset = DatasetSpec::Path(d);
    }
    if let Some(v) = a.variants {
        plan.variants = v;
    }
    plan.train = train_config(plan.train, &a.common)?;
    if let (DatasetSpec::Synthetic(sim), Some(s)) = (&mut plan.dataset, env_seed()?) {
        sim.seed = s;
    }
    plan.validate()?;

    let outcome = run_bench(&plan, a.common.resume)?;
    print!("{}", fs::read_to_string(&outcome.report.markdown)?);
    println!("report written to {}", outcome.report.csv.parent().unwrap_or(Path::new(".")).display());
    match outcome.orderings {
        None => {
            println!("ordering checks skipped: they need all three variants");
            Ok(ExitCode::SUCCESS)
        }
        Some(o) => {
            for c in &o.checks {
                println!(
                    "{} {} (per-seed wins {}/{}, means {:.4} vs {:.4})",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.wins,
                    c.per_seed.len(),
                    c.mean_better,
                    c.mean_worse
                );
            }
            Ok(if o.passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}

/// 2 for bad input, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<sarfuse::Error>() {
            return match e {
                sarfuse::Error::Argument(_) | sarfuse::Error::Config(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
