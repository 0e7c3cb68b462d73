//! Command-line pipeline: synthetic data, training, odometry runs, evaluation
//! and attention dumps.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod dataset;
pub mod manifest;

pub use config::{Method, RunConfig};

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    eliot_core::Error::Usage(msg.into()).into()
}

/// Usage and configuration errors: the invocation itself is wrong.
pub fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        matches!(
            c.downcast_ref::<eliot_core::Error>(),
            Some(eliot_core::Error::Usage(_) | eliot_core::Error::Config(_))
        )
    })
}

/// 0 on success, 2 on usage or configuration errors, 1 otherwise.
pub fn exit_code(r: &anyhow::Result<()>) -> i32 {
    match r {
        Ok(()) => 0,
        Err(e) if is_usage(e) => 2,
        Err(_) => 1,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "eliot",
    version,
    about = "LiDAR odometry with a transformer pose regressor and ICP baselines"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Run configuration (flat dotted-key TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic pair set or sequence.
    Synth {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train the network and write checkpoints plus a loss log.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = Method::NAMES)]
        method: Option<String>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Estimate trajectories for the configured evaluation sequences.
    Odom {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = Method::NAMES)]
        method: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Calibration file whose `Tr` maps scanner poses into the ground-truth frame.
        #[arg(long)]
        calib: Option<PathBuf>,
    },
    /// Compare a predicted pose file against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Calibration applied to the prediction before comparison.
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for the report and plots; omitted prints only.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Dump keypoints and cross-attention maps for one scan pair.
    Attn {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = Method::NAMES)]
        method: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Source and target scans.
        #[arg(long, num_args = 2, value_names = ["SOURCE", "TARGET"], required = true)]
        pair: Vec<PathBuf>,
    },
}

fn resolve(run: &RunArgs, method: Option<&str>) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(run.config.as_deref())?;
    if let Some(seed) = run.seed {
        cfg.apply_seed(seed);
    }
    if let Some(m) = method {
        cfg.apply_method(Method::parse(m)?);
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { run } => {
            let cfg = resolve(&run, None)?;
            commands::synth(&cfg, &run.out, run.force)
        }
        Command::Train {
            run,
            method,
            checkpoint,
        } => {
            let cfg = resolve(&run, method.as_deref())?;
            commands::train(&cfg, &run.out, run.force, checkpoint.as_deref())
        }
        Command::Odom {
            run,
            method,
            checkpoint,
            calib,
        } => {
            let cfg = resolve(&run, method.as_deref())?;
            commands::odom(
                &cfg,
                &run.out,
                run.force,
                checkpoint.as_deref(),
                calib.as_deref(),
            )
        }
        Command::Eval {
            gt,
            pred,
            calib,
            config,
            out,
            force,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            commands::eval(&cfg, &gt, &pred, calib.as_deref(), out.as_deref(), force).map(|_| ())
        }
        Command::Attn {
            run,
            method,
            checkpoint,
            pair,
        } => {
            let cfg = resolve(&run, method.as_deref())?;
            commands::attn(
                &cfg,
                &run.out,
                run.force,
                checkpoint.as_deref(),
                &pair[0],
                &pair[1],
            )
        }
    }
}
