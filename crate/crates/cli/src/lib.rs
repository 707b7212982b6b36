//! Library side of the `stok` command-line tool: run configuration, dataset
//! ingestion, subcommands and experiment reports.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{execute, preflight, Command};
pub use config::{Overrides, RunConfig};
pub use error::{CliError, CliResult};
pub use report::ExperimentReport;

#[derive(Debug, Parser)]
#[command(name = "stok", version, about = "Token dataset builder and trainer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Sub,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML, schema = 1).
    #[arg(short, long)]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed override (wins over the config and STOK_SEED).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Resolve and check everything, print the plan, write nothing.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Fit the k-means patch codebook.
    FitCodebook(Common),
    /// Tokenize the image splits into packed token files.
    Tokenize(Common),
    /// Print the storage report of a token dataset.
    Stats(Common),
    /// Train the TokenAdapt module on pixel-augmentation pairs.
    TrainTokenadapt(Common),
    /// Masked token modeling pre-training.
    Pretrain(Common),
    /// Supervised training from scratch.
    Train(Common),
    /// Fine-tune from a pre-trained checkpoint.
    Finetune(Common),
    /// Evaluate a classifier, optionally under corruptions.
    Eval(Common),
    /// Write decoded original / augmented token grids side by side.
    DecodeDump(Common),
}

impl Sub {
    fn split(&self) -> (Command, &Common) {
        match self {
            Sub::FitCodebook(c) => (Command::FitCodebook, c),
            Sub::Tokenize(c) => (Command::Tokenize, c),
            Sub::Stats(c) => (Command::Stats, c),
            Sub::TrainTokenadapt(c) => (Command::TrainTokenAdapt, c),
            Sub::Pretrain(c) => (Command::Pretrain, c),
            Sub::Train(c) => (Command::Train, c),
            Sub::Finetune(c) => (Command::Finetune, c),
            Sub::Eval(c) => (Command::Eval, c),
            Sub::DecodeDump(c) => (Command::DecodeDump, c),
        }
    }
}

/// Runs a parsed command line. `Ok(None)` means a dry run.
pub fn run(cli: &Cli) -> CliResult<Option<ExperimentReport>> {
    let (cmd, common) = cli.command.split();
    let out_dir = common.out.as_deref().map(std::path::absolute).transpose()?;
    let ov = Overrides {
        set: common.set.clone(),
        seed: common.seed,
        out_dir,
    };
    let cfg = RunConfig::load(&common.config, &ov)?;
    if common.dry_run {
        preflight(cmd, &cfg)?;
        println!("# dry run: `{}` would write to {}", cmd.name(), cfg.out_dir.display());
        print!("{}", cfg.to_toml());
        return Ok(None);
    }
    execute(cmd, &cfg).map(Some)
}
