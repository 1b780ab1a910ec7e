// SPDX-License-Identifier: MIT OR Apache-2.0

//! `sae-lab`: data generation, SAE training, evaluation, steering and
//! suppression, one subcommand per stage with all state on disk.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "sae-lab", version, about = "Sparse autoencoder toolkit for vision-transformer activations")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads (0 lets the runtime decide).
    #[arg(long, global = true, env = "SAE_LAB_THREADS")]
    threads: Option<usize>,
    /// Single-threaded execution.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Vanilla,
    Topk,
}

impl VariantArg {
    pub fn name(self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::Topk => "topk",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fixture {
    Identity,
    Zero,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the toy model and write activation shards and the vocabulary head.
    GenData,
    /// Train one SAE per configured layer.
    TrainSae {
        #[arg(long, value_enum, default_value = "topk")]
        variant: VariantArg,
        /// Not supported; present so the request can be refused clearly.
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
    },
    /// Reconstruction, sparsity, cosine and cross-entropy metrics.
    Eval {
        #[arg(long, value_enum, default_value = "topk")]
        variant: VariantArg,
        /// Evaluate a fixed map instead of a trained checkpoint.
        #[arg(long, value_enum)]
        fixture: Option<Fixture>,
        /// Check structural invariants of the checkpoint and fail if any is violated.
        #[arg(long)]
        self_check: bool,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Steerability scans, layer metrics and strength sweeps.
    Steer {
        #[arg(long, value_enum, default_value = "topk")]
        variant: VariantArg,
    },
    /// Feature suppression tables against neuron and random controls.
    Suppress {
        #[arg(long, value_enum, default_value = "topk")]
        variant: VariantArg,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use sae_lab::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<commands::DataError>().is_some() || cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidArgument(_) => 2,
                E::Diverged { .. } => 4,
                E::Degenerate(_) => 1,
                _ => 3,
            };
        }
    }
    1
}

fn configure_threads(global: &GlobalArgs) -> anyhow::Result<()> {
    let threads = if global.deterministic { Some(1) } else { global.threads };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| config::config_error(format!("cannot configure {n} threads: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads(&cli.global)?;
    let mut cfg = RunConfig::load(cli.global.config.as_deref())?;
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = cli.global.out_dir {
        cfg.out_dir = dir;
    }
    let cfg = cfg.finalize()?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::TrainSae { variant, resume } => commands::train_sae(&cfg, variant, resume.as_deref()),
        Command::Eval {
            variant,
            fixture,
            self_check,
            split,
        } => commands::eval(&cfg, variant, fixture, self_check, &split),
        Command::Steer { variant } => commands::steer(&cfg, variant),
        Command::Suppress { variant } => commands::suppress(&cfg, variant),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
