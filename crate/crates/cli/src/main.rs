//! `fsgpt` command-line driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "fsgpt", version, about = "Cross-fleet flight-signal foundation model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Configuration layering shared by every subcommand: profile defaults,
/// then `--config`, then `--set` overrides, then `--seed`/`--precision`.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Base profile (desk or paper)
    #[arg(long, global = true)]
    pub profile: Option<String>,

    /// Config file of `section.key=value` lines
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override one key, e.g. `--set model.dim=32` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    /// Root seed for every random stream
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Floating-point precision: f32 or f64
    #[arg(long, global = true)]
    pub precision: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic fleet dataset (CSV + manifest)
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Fleet preset: fleet_a, fleet_b, fleet_c, a320, a330, c919
        #[arg(long)]
        spec: String,
        /// Number of time steps
        #[arg(long, default_value_t = 60_000)]
        points: usize,
        /// Inject labeled faults
        #[arg(long)]
        faults: bool,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked-token pretraining over one or more fleets
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset manifests
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        /// Continue from this checkpoint (optimizer state and step counter)
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out_checkpoint: PathBuf,
    },
    /// Fit the BP/AD heads on a labeled fleet with the backbone frozen
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Labeled dataset manifest
        #[arg(long)]
        data: PathBuf,
        /// Pretrained checkpoint
        #[arg(long, conflicts_with = "from_scratch", required_unless_present = "from_scratch")]
        checkpoint: Option<PathBuf>,
        /// Start from a randomly initialized backbone instead
        #[arg(long)]
        from_scratch: bool,
        #[arg(long)]
        out_checkpoint: PathBuf,
    },
    /// Score a fine-tuned checkpoint on the held-out windows of a fleet
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report path; counts go next to it as `<stem>.counts.csv`
        #[arg(long)]
        report: PathBuf,
    },
    /// Check analytic gradients against finite differences
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pretrain and fine-tune one model per stride (patch length = stride)
    SweepStride {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "32,64,128,256")]
        values: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit L(N) = (N_c / N)^alpha to (params, loss) points
    FitScaling {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// CSV with `params,loss` rows
        #[arg(long, conflicts_with = "run_grid", required_unless_present = "run_grid")]
        points: Option<PathBuf>,
        /// Train the width grid on the desk corpus and fit it
        #[arg(long)]
        run_grid: bool,
        #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
        dims: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write pooled backbone features per window as CSV
    ExportFeatures {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
