//! Command-line driver: run directories, configuration and subcommands.

pub mod checks;
pub mod commands;
pub mod config;
pub mod rundir;

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};

use commands::{IngestArgs, MaskSource, Split};

#[derive(Debug, Parser)]
#[command(name = "nilm", version, about = "Load identification from synchronised current and voltage")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset into a new run directory
    Simulate {
        #[arg(long)]
        out: PathBuf,
        /// JSON run configuration; defaults apply to missing keys
        #[arg(long)]
        config: Option<PathBuf>,
        /// overrides the root seed of the configuration
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Import measured CSV recordings into a new run directory
    Ingest {
        #[arg(long)]
        out: PathBuf,
        /// sampling rate of every file, Hz
        #[arg(long)]
        fs: f64,
        #[arg(long, num_args = 1.., required = true)]
        train: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        test: Vec<PathBuf>,
        /// single-appliance recordings for the decomposition prior
        #[arg(long, num_args = 1..)]
        solo: Vec<PathBuf>,
        /// multi-appliance recordings to decompose
        #[arg(long, num_args = 1..)]
        mix: Vec<PathBuf>,
        /// comma-separated names, one per label column
        #[arg(long, value_delimiter = ',')]
        appliances: Option<Vec<String>>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Self-supervised pretraining of the signature front end
    Pretrain {
        #[arg(long)]
        run: PathBuf,
    },
    /// Supervised training on the labeled training split
    Train {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "base")]
        task: String,
    },
    /// Score a trained task on the test split
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// defaults to the most recent task
        #[arg(long)]
        task: Option<String>,
        /// also train and score the raw-sequence baseline
        #[arg(long)]
        baseline: bool,
    },
    /// Continual update on another run's dataset, which may add appliances
    LearnNew {
        #[arg(long)]
        run: PathBuf,
        /// run directory holding the new data
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: Option<String>,
        /// overrides train.lambda_ewc
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Split held-out mix recordings into per-appliance power and energy
    Decompose {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = MaskSource::Auto)]
        masks: MaskSource,
    },
    /// Write signature images of the first cycles as PGM files
    RenderSignature {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Run the built-in property checks
    Selftest,
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { out, config, seed } => commands::simulate(&out, config.as_deref(), seed),
        Command::Ingest {
            out,
            fs,
            train,
            test,
            solo,
            mix,
            appliances,
            config,
        } => commands::ingest(&IngestArgs {
            out,
            fs,
            train,
            test,
            solo,
            mix,
            appliances,
            config,
        }),
        Command::Pretrain { run } => commands::run_pretrain(&run),
        Command::Train { run, task } => commands::run_train(&run, &task),
        Command::Eval { run, task, baseline } => commands::run_eval(&run, task.as_deref(), baseline),
        Command::LearnNew { run, data, task, lambda } => {
            commands::run_learn_new(&run, &data, task.as_deref(), lambda)
        }
        Command::Decompose { run, masks } => commands::run_decompose(&run, masks),
        Command::RenderSignature { run, count, split } => commands::run_render_signature(&run, count, split),
        Command::Selftest => {
            if commands::selftest() {
                Ok(())
            } else {
                bail!("selftest failed")
            }
        }
    }
}
