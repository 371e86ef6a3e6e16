use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Train, run and evaluate the three-branch infrared/visible fusion network.
///
/// Verbosity follows the `SMFNET_LOG` environment variable (`error`, `warn`,
/// `info`, `debug`, `trace`), default `info`.
#[derive(Debug, Parser)]
#[command(name = "smfnet", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train encoder and decoder to reconstruct both modalities.
    TrainStage1 {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Directory for the checkpoint, loss log and loss curve.
        #[arg(long)]
        out: PathBuf,
    },
    /// Add the fusion layers and train them from a stage-I checkpoint.
    TrainStage2 {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Stage-I checkpoint to start from.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse every infrared/visible pair with matching file names.
    Fuse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        vis: PathBuf,
        /// Output directory; fused images are `<stem>.png`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score fused images against their sources with the nine metrics.
    Evaluate {
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        vis: PathBuf,
        /// CSV file for the table; it is always printed as well.
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
        /// How SSIM against the two sources is combined.
        #[arg(long, value_enum, default_value_t = SsimMode::Sum)]
        ssim: SsimMode,
    },
    /// Run a named ablation variant end to end: both stages, fusion of
    /// held-out scenes and their metrics.
    Ablate {
        /// Variant name, AE1 to AE13.
        variant: String,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SsimMode {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML configuration; unspecified keys keep their defaults.
    #[arg(long, conflicts_with = "toy")]
    pub config: Option<PathBuf>,
    /// Start from the desk-scale preset instead of the full schedule.
    #[arg(long)]
    pub toy: bool,
    /// Override one key, e.g. `--set losses.alpha1=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for weights, shuffling and synthetic data.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Training pairs under `<dir>/ir` and `<dir>/vis`. Without it, synthetic
    /// scenes are generated (one batch worth).
    #[arg(long)]
    pub data: Option<PathBuf>,
}
