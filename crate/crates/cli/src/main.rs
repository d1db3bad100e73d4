//! `dwc`: generate synthetic sites, train and consolidate networks, evaluate
//! them and run the full benchmark.

mod commands;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "dwc", version, about = "Distributed weight consolidation for segmentation networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by the training subcommands.
#[derive(Args, Clone)]
struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Training sites, comma-separated or as repeated `--site` flags.
    #[arg(long, visible_alias = "site", value_delimiter = ',', required = true)]
    sites: Vec<String>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Network and training settings; defaults to those of the data's plan.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Per-step loss CSV; defaults to the checkpoint path with `.loss.csv`.
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic sites of a plan as raw volumes.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Experiment plan (TOML); the built-in desk-scale plan otherwise.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a MAP network on the union of the given sites.
    TrainMap(TrainArgs),
    /// Train a variational network, with a checkpoint prior (VCL) or N(0, 1).
    TrainVcl {
        #[command(flatten)]
        train: TrainArgs,
        /// Prior checkpoint; also the initialization unless `--init` is given.
        #[arg(long)]
        prior: Option<PathBuf>,
        /// Checkpoint whose weights start training.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Consolidate site posteriors that share a prior.
    Consolidate {
        #[arg(long)]
        prior: PathBuf,
        /// Site checkpoints, comma-separated or as repeated `--site` flags.
        #[arg(long, visible_alias = "site", value_delimiter = ',', required = true)]
        sites: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a (consolidated) posterior, using it as the prior, with the
    /// data term weighted as one volume.
    Finetune {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        prior: PathBuf,
    },
    /// Dice of the output-averaging ensemble of several checkpoints.
    EnsembleEval {
        /// Comma-separated checkpoints.
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Tidy Dice CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "Ensemble")]
        name: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dice of predicted label volumes, or of a checkpoint on a dataset.
    Evaluate {
        /// Predicted labels manifest (volume_id,dataset,path).
        #[arg(long, requires = "truth", conflicts_with_all = ["model", "data"])]
        pred: Option<PathBuf>,
        /// True labels manifest.
        #[arg(long, requires = "pred")]
        truth: Option<PathBuf>,
        /// Checkpoint to evaluate on `--data`.
        #[arg(long, requires = "data")]
        model: Option<PathBuf>,
        #[arg(long, requires = "model")]
        data: Option<PathBuf>,
        /// Classes, when evaluating label manifests.
        #[arg(long, default_value_t = 5)]
        classes: usize,
        /// Tidy Dice CSV.
        #[arg(long)]
        out: PathBuf,
        /// Summary table CSV.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Directory for per-volume error masks.
        #[arg(long)]
        error_masks: Option<PathBuf>,
        /// Directory for predicted label volumes and their manifest.
        #[arg(long, requires = "model")]
        predictions: Option<PathBuf>,
        #[arg(long, default_value = "model")]
        name: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every condition of a plan and write the Dice tables.
    Experiment {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print a checkpoint's network, tensor shapes and provenance.
    InspectCkpt { path: PathBuf },
    /// Print the built-in desk-scale plan as TOML.
    DefaultPlan,
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("DWC_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| anyhow::anyhow!("DWC_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|_| commands::run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.downcast_ref::<dwc_core::Error>() {
                Some(core) => eprintln!("error[E{}]: {e:#}", core.code()),
                None => eprintln!("error: {e:#}"),
            }
            ExitCode::from(1)
        }
    }
}
