use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::builder::PossibleValuesParser;
use clap::{Parser, Subcommand};

use fms_core::checks::{self, MODULES};
use fms_core::data::{read_dataset, write_dataset, Dataset, DatasetConfig};
use fms_core::numeric::FD_TOLERANCE;
use fms_core::train::{self, Checkpoint, TrainConfig};
use fms_core::Error;

/// Synthetic multimodal manipulation detection and grounding.
#[derive(Parser)]
#[command(name = "fms", version)]
struct Cli {
    /// Log progress to stderr (repeat for more detail)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a TOML config
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a TOML config; writes the checkpoint and loss log it names
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on a dataset
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Print metrics and mean losses as JSON
        #[arg(long)]
        json: bool,
    },
    /// Compare analytic gradients with central differences
    GradCheck {
        #[arg(long, value_parser = PossibleValuesParser::new(MODULES))]
        module: Option<String>,
    },
    /// Check a dataset file against the schema and label invariants
    ValidateData { path: PathBuf },
}

/// Ran to completion, but a check did not pass.
struct Failed;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(Failed)) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config(_))));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> anyhow::Result<Result<(), Failed>> {
    match command {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::Train { config } => train_cmd(&config),
        Command::Eval { ckpt, data, json } => eval(&ckpt, &data, json),
        Command::GradCheck { module } => grad_check(module.as_deref()),
        Command::ValidateData { path } => validate(&path),
    }
}

fn gen_data(config: &Path, out: &Path) -> anyhow::Result<Result<(), Failed>> {
    let text =
        std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let mut cfg =
        DatasetConfig::parse_toml(&text).with_context(|| format!("in {}", config.display()))?;
    if let Some(seed) = train::env_seed()? {
        cfg.seed = seed;
    }
    let ds = Dataset::generate(cfg)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_dataset(&ds, out).with_context(|| format!("writing {}", out.display()))?;
    let fakes = ds.samples.iter().filter(|s| s.labels.pair_fake()).count();
    println!(
        "wrote {} samples ({fakes} manipulated) to {}",
        ds.samples.len(),
        out.display()
    );
    Ok(Ok(()))
}

fn train_cmd(config: &Path) -> anyhow::Result<Result<(), Failed>> {
    let mut cfg =
        TrainConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    cfg.apply_env()?;
    let data = read_dataset(&cfg.dataset)?;
    let out = train::train_to_disk(&cfg, &data)?;
    for e in &out.log {
        println!(
            "epoch {:>3}  steps {:>4}  total {:.6}",
            e.epoch, e.steps, e.losses.total
        );
    }
    println!("checkpoint: {}", cfg.checkpoint.display());
    Ok(Ok(()))
}

fn eval(ckpt: &Path, data: &Path, json: bool) -> anyhow::Result<Result<(), Failed>> {
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let ds = read_dataset(data)?;
    let out = train::evaluate(&ck, &ds)?;
    if json {
        let doc = serde_json::json!({ "metrics": out.report, "losses": out.losses });
        println!("{}", serde_json::to_string_pretty(&doc)?);
    } else {
        print!("{}", out.report);
    }
    Ok(Ok(()))
}

fn grad_check(module: Option<&str>) -> anyhow::Result<Result<(), Failed>> {
    let results = checks::run(module)?;
    let mut failed = 0;
    for r in &results {
        let mark = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{mark:>4}  {:<9} {:<32} {:.3e}",
            r.module, r.name, r.max_error
        );
        failed += usize::from(!r.passed());
    }
    println!("{} checks, {failed} above {FD_TOLERANCE:e}", results.len());
    Ok(if failed == 0 { Ok(()) } else { Err(Failed) })
}

fn validate(path: &Path) -> anyhow::Result<Result<(), Failed>> {
    match read_dataset(path) {
        Ok(ds) => {
            println!("{}: {} valid samples", path.display(), ds.samples.len());
            Ok(Ok(()))
        }
        Err(
            e @ (Error::Record { .. }
            | Error::SchemaVersion { .. }
            | Error::Json(_)
            | Error::LabelInvariant(_)),
        ) => {
            println!("invalid: {e}");
            Ok(Err(Failed))
        }
        Err(e) => Err(e.into()),
    }
}
