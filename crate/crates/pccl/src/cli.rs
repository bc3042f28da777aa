//! The `pccl` command line: `synth`, `train`, `eval`, `ablate` and `report`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use candle_core::Device;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use pccl_core::phantom::PhantomConfig;
use pccl_core::{BaselineMode, TrainConfig};

use crate::dataset::{self, Split};
use crate::error::{Error, Result};
use crate::settings::{self, Preset};
use crate::{checkpoint, eval, report, trainer};

/// Environment variable giving the default output directory.
pub const OUT_DIR_ENV: &str = "PCCL_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "pccl", version, about = "Semi-supervised segmentation with two cross-teaching students")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic ellipse dataset.
    Synth {
        #[arg(long, default_value_t = 340)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method and write checkpoint, history and test report.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "pccl", value_parser = parse_mode)]
        mode: BaselineMode,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, env = OUT_DIR_ENV, default_value = "runs")]
        out: PathBuf,
    },
    /// Train the four loss configurations and tabulate their test metrics.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Plot histories and write a comparison table.
    Report {
        #[arg(required = true)]
        histories: Vec<PathBuf>,
        #[arg(long, env = OUT_DIR_ENV, default_value = "runs")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML file applied on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root with images/ and masks/ per split.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    /// `key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, env = OUT_DIR_ENV, default_value = "runs")]
    pub out: PathBuf,
}

fn parse_mode(s: &str) -> std::result::Result<BaselineMode, String> {
    s.parse().map_err(|e: pccl_core::Error| e.to_string())
}

fn command() -> clap::Command {
    let keys = settings::describe_keys(&TrainConfig::paper());
    Cli::command().after_help(format!("Configuration keys (defaults of the paper preset):\n{keys}"))
}

fn resolve(run: &RunArgs) -> Result<TrainConfig> {
    if !run.data.is_dir() {
        return Err(Error::Usage(format!("dataset root {} is not a directory", run.data.display())));
    }
    settings::resolve(run.preset, run.config.as_deref(), &run.overrides)
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth { n, size, seed, out } => {
            let s = dataset::synth_generate(n, size, seed, &out, &PhantomConfig::default())?;
            println!("{}: train={} val={} test={} size={size}", out.display(), s.train, s.val, s.test);
        }
        Command::Train { run, mode } => {
            let config = resolve(&run)?;
            let outcome = trainer::run_baseline(mode, &config, &run.data, &run.out)?;
            if let Some(best) = outcome.best_val_dsc {
                println!("best val dsc={best:.2}");
            }
            if let Some(test) = &outcome.test {
                println!("test {}", eval::summary_line(test));
            }
            println!("artifacts in {}", run.out.display());
        }
        Command::Eval { checkpoint: path, data, split, out } => eval_command(&path, &data, split, &out)?,
        Command::Ablate { run } => {
            let config = resolve(&run)?;
            for row in trainer::ablate(&config, &run.data, &run.out)? {
                println!("{:<14} {}", row.toggles.label(), eval::summary_line(&row.report));
            }
            println!("table in {}", run.out.join("ablation.csv").display());
        }
        Command::Report { histories, out } => {
            let done = report::report(&histories, &out)?;
            for p in &done.plots {
                println!("{}", p.display());
            }
            println!("{}", done.table.display());
        }
    }
    Ok(())
}

fn eval_command(path: &Path, data: &Path, split: Split, out: &Path) -> Result<()> {
    if !data.is_dir() {
        return Err(Error::Usage(format!("dataset root {} is not a directory", data.display())));
    }
    let (model, _) = checkpoint::load(path, &Device::Cpu)?;
    let size = model.spec().input_size;
    let samples = dataset::load_dataset(data, split)?
        .iter()
        .map(|s| Ok(pccl_core::data::preprocess(s, size)?))
        .collect::<Result<Vec<_>>>()?;
    if samples.is_empty() {
        return Err(Error::Dataset(format!("split {split} of {} is empty", data.display())));
    }
    let report = eval::evaluate(&model, &samples)?;
    std::fs::create_dir_all(out).map_err(Error::io(out))?;
    let csv = out.join(format!("eval_{split}.csv"));
    eval::write_report_csv(&report, &csv)?;
    println!("{split} {}", eval::summary_line(&report));
    println!("{}", csv.display());
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = command().try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m));
    let cli = match parsed {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
