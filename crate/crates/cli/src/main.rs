mod commands;
mod config;
mod stage;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::thread;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use finn_core::datagen::Split;
use finn_core::evaluator::TABLE_POINTS;
use finn_core::family::Family;

use commands::{Ablation, DataFormat, DataSource};
use config::RunConfig;
use stage::Manifest;

/// Generate data for, train and evaluate finite volume neural networks.
#[derive(Parser, Debug)]
#[command(name = "finn", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON configuration file; its values override the family defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Dotted override such as `train.epochs=20`; wins over the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root for all outputs and for relative `--model` and `--data` paths.
    #[arg(long, global = true, env = "FINN_DATA_ROOT", default_value = ".")]
    out: PathBuf,
    #[arg(long, global = true)]
    family: Option<Family>,
    /// Seeds to run as independent parallel jobs: `1..10` (inclusive) or
    /// `1,4,7`.
    #[arg(long, global = true)]
    seeds: Option<Seeds>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write reference datasets to `<out>/<family>/<split>/`.
    Generate {
        /// Split to write; repeat for several. Defaults to all.
        #[arg(long = "split")]
        splits: Vec<Split>,
        #[arg(long, value_enum, default_value = "binary")]
        format: Format,
    },
    /// Train a model into `<out>/runs/<family>/seed_<k>/`.
    Train {
        /// Dataset root written by `generate`; data is generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a trained run into `<model>/eval/`.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long = "split")]
        splits: Vec<Split>,
    },
    /// Tabulate the learned functions of a run into `<model>/functions/`.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = TABLE_POINTS)]
        points: usize,
    },
    /// Train the default model and one altered variant and compare them.
    Ablate {
        #[arg(value_enum)]
        kind: AblationKind,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long = "split")]
        splits: Vec<Split>,
    },
    /// Validate laboratory observations into `<out>/observations/<sample>/`.
    Ingest {
        #[arg(long)]
        sample: String,
        /// CSV with `time,location,value` rows.
        #[arg(long)]
        file: PathBuf,
        /// Sample registry JSON; the built-in registry when absent.
        #[arg(long)]
        registry: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Binary,
    Csv,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AblationKind {
    Polynomial,
    Noise,
    Euler,
}

#[derive(Clone, Debug)]
struct Seeds(Vec<u64>);

impl FromStr for Seeds {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bad = |_| format!("invalid seed list {s:?}");
        let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
            let (a, b): (u64, u64) = (a.trim().parse().map_err(bad)?, b.trim().parse().map_err(bad)?);
            if a > b {
                return Err(format!("empty seed range {s:?}"));
            }
            (a..=b).collect()
        } else {
            s.split(',').map(|p| p.trim().parse().map_err(bad)).collect::<Result<_, _>>()?
        };
        let mut unique = seeds.clone();
        unique.sort_unstable();
        unique.dedup();
        if unique.len() != seeds.len() {
            return Err(format!("repeated seed in {s:?}"));
        }
        Ok(Seeds(seeds))
    }
}

fn under(out: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out.join(p)
    }
}

fn source(out: &Path, data: &Option<PathBuf>) -> DataSource {
    DataSource {
        root: data.as_ref().map(|d| under(out, d)),
    }
}

/// Runs `job` once per seed in its own thread, or once with the configured
/// seed.
fn fan_out<F>(base: &RunConfig, seeds: &Option<Seeds>, job: F) -> Result<Vec<PathBuf>>
where
    F: Fn(&RunConfig) -> Result<PathBuf> + Sync,
{
    let Some(Seeds(seeds)) = seeds else {
        return Ok(vec![job(base)?]);
    };
    let configs: Vec<RunConfig> = seeds
        .iter()
        .map(|&seed| RunConfig { seed, ..base.clone() })
        .collect();
    let results: Vec<Result<PathBuf>> = thread::scope(|s| {
        let handles: Vec<_> = configs.iter().map(|c| s.spawn(|| job(c))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| bail!("worker thread panicked")))
            .collect()
    });
    let mut done = Vec::new();
    let mut failed = Vec::new();
    for (seed, r) in seeds.iter().zip(results) {
        match r {
            Ok(p) => done.push(p),
            Err(e) => failed.push(format!("seed {seed}: {e:#}")),
        }
    }
    if !failed.is_empty() {
        bail!("{} of {} runs failed\n{}", failed.len(), seeds.len(), failed.join("\n"));
    }
    Ok(done)
}

fn run_config(model_dir: &Path, common: &Common) -> Result<RunConfig> {
    let manifest = Manifest::read(model_dir)?;
    let recorded: RunConfig = serde_json::from_value(manifest.config)
        .with_context(|| format!("configuration recorded in {}", model_dir.display()))?;
    if let Some(f) = common.family {
        if f != recorded.family {
            bail!("{} holds a {} run, not {f}", model_dir.display(), recorded.family);
        }
    }
    config::resolve_over(&recorded, common.config.as_deref(), &common.overrides)
}

fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    let common = &cli.common;
    let out = &common.out;
    let resolve = || config::resolve(common.family, common.config.as_deref(), &common.overrides);
    let single = || -> Result<()> {
        if common.seeds.is_some() {
            bail!("--seeds applies to train and ablate only");
        }
        Ok(())
    };
    match &cli.command {
        Command::Generate { splits, format } => {
            single()?;
            let format = match format {
                Format::Binary => DataFormat::Binary,
                Format::Csv => DataFormat::Csv,
            };
            commands::generate(&resolve()?, out, splits, format)
        }
        Command::Train { data } => {
            let src = source(out, data);
            fan_out(&resolve()?, &common.seeds, |c| commands::train_run(c, out, &src))
        }
        Command::Evaluate { model, data, splits } => {
            single()?;
            let dir = under(out, model);
            let cfg = run_config(&dir, common)?;
            Ok(vec![commands::evaluate_run(&cfg, &dir, &source(out, data), splits)?])
        }
        Command::Extract { model, data, points } => {
            single()?;
            let dir = under(out, model);
            let cfg = run_config(&dir, common)?;
            Ok(vec![commands::extract_run(&cfg, &dir, &source(out, data), *points)?])
        }
        Command::Ablate { kind, data, splits } => {
            let kind = match kind {
                AblationKind::Polynomial => Ablation::Polynomial,
                AblationKind::Noise => Ablation::Noise,
                AblationKind::Euler => Ablation::Euler,
            };
            let src = source(out, data);
            fan_out(&resolve()?, &common.seeds, |c| commands::ablate_run(c, out, &src, kind, splits))
        }
        Command::Ingest { sample, file, registry } => {
            single()?;
            if common.family.is_some() || common.config.is_some() || !common.overrides.is_empty() {
                bail!("ingest takes no model configuration");
            }
            Ok(vec![commands::ingest_run(out, sample, file, registry.as_deref())?])
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
