//! Argument parsing and exit codes: 0 success, 1 usage or configuration
//! error, 2 runtime failure.
use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use htrmrl_core::envs::Split;

use crate::commands::{self, BenchGrid, EmbedArgs, EvalArgs};
use crate::config::RunConfig;
use crate::error::AppResult;

#[derive(Debug, Parser)]
#[command(name = "htrmrl", version = crate::results::VERSION, about = "Hierarchical-transformer meta-RL: train, evaluate, ablate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    pub config: PathBuf,
    /// `section.key=value`, applied in order after the file is read.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long, short)]
    pub quiet: bool,
}

impl ConfigArgs {
    pub fn load(&self) -> AppResult<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seeds=[{s}]"));
        }
        RunConfig::load(&self.config, &overrides)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Meta-train one run per seed.
    Train(ConfigArgs),
    /// Run the adaptation protocol with a trained checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Adaptation episodes per task (default: the run's eval_episodes).
        #[arg(long)]
        episodes: Option<usize>,
        /// Number of tasks (default: the run's eval_tasks).
        #[arg(long)]
        tasks: Option<usize>,
        /// Configuration whose architecture must match the checkpoint's.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (relative to the output root).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write every step as newline-delimited JSON.
        #[arg(long)]
        trajectories: bool,
    },
    /// Train every cell of the config's [ablate] grid and tabulate.
    Ablate(ConfigArgs),
    /// Closed-form and counted attention scores over a grid.
    BenchAttention {
        #[arg(long, value_delimiter = ',', default_value = "25")]
        k: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "5")]
        s: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        heads: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        l1: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        l2: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        d_model: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "bench-attention")]
        out: PathBuf,
    },
    /// Task embeddings, their PCA projection and silhouette score.
    ExportEmbeddings {
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long, default_value_t = 5)]
        episodes: usize,
        #[arg(long, default_value_t = 20)]
        tasks: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> AppResult<()> {
    match cli.command {
        Command::Train(a) => {
            let cfg = a.load()?;
            for d in commands::cmd_train(&cfg, a.quiet)? {
                println!("{}", d.display());
            }
        }
        Command::Eval {
            checkpoint,
            split,
            episodes,
            tasks,
            config,
            seed,
            out,
            trajectories,
        } => {
            let d = commands::cmd_eval(&EvalArgs {
                checkpoint: &checkpoint,
                config: config.as_deref(),
                split: split.into(),
                episodes,
                tasks,
                seed,
                out,
                trajectories,
            })?;
            println!("{}", d.display());
        }
        Command::Ablate(a) => {
            let cfg = a.load()?;
            println!("{}", commands::cmd_ablate(&cfg, a.quiet)?.display());
        }
        Command::BenchAttention {
            k,
            s,
            heads,
            l1,
            l2,
            d_model,
            seed,
            out,
        } => {
            let grid = BenchGrid {
                k,
                s,
                heads,
                l1,
                l2,
                d_model,
                seed,
            };
            println!("{}", commands::cmd_bench_attention(&grid, &out)?.display());
        }
        Command::ExportEmbeddings {
            checkpoint,
            split,
            episodes,
            tasks,
            seed,
            out,
        } => {
            let d = commands::cmd_export_embeddings(&EmbedArgs {
                checkpoint: &checkpoint,
                split: split.into(),
                episodes,
                tasks,
                seed,
                out,
            })?;
            println!("{}", d.display());
        }
    }
    Ok(())
}

/// Parse, run, and map the outcome to a process exit code.
pub fn main_with<I, T>(args: I) -> i32
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
