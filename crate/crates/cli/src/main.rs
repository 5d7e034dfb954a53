//! `genemoe` command line: synthetic data, adversarial pre-training,
//! survival and classification fine-tuning, evaluation, latent analysis
//! and encoder ablation, all seed-deterministic.
//!
//! Exit codes: 0 success, 2 config or parse problem, 3 numeric failure,
//! 4 I/O or checkpoint damage.

mod artifacts;
mod config;
mod run;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::FileConfig;

#[derive(Parser)]
#[command(name = "genemoe", version, about = "Sparsely gated expert models for gene expression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; sections [model], [training], [finetune], [data],
    /// [synth], [analyze], [classify], all optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled expression matrix with survival columns.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Adversarially pre-train the autoencoder on an expression TSV.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Expression matrix TSV (genes as columns, `label`/`time`/`event` reserved).
        #[arg(long)]
        data: PathBuf,
    },
    /// Fit the proportional-hazards head; needs `time` and `event` columns.
    Survival {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Warm-start weights from a pre-training checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Reuse normalization stats saved at pre-training time.
        #[arg(long)]
        norm: Option<PathBuf>,
    },
    /// Fit the focal-loss classifier head; needs a `label` column.
    Classify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Warm-start weights from a pre-training checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Reuse normalization stats saved at pre-training time.
        #[arg(long)]
        norm: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset; artifacts depend on the head kind.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reuse normalization stats saved at pre-training time.
        #[arg(long)]
        norm: Option<PathBuf>,
    },
    /// Correlate latent coordinates with genes, export reconstructions.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reuse normalization stats saved at pre-training time.
        #[arg(long)]
        norm: Option<PathBuf>,
    },
    /// Compare dense, gated and pre-trained encoder variants on one dataset.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
}

fn load(common: &Common) -> genemoe::Result<FileConfig> {
    if let Some(p) = &common.config {
        artifacts::require_file(p)?;
    }
    let mut cfg = FileConfig::load(common.config.as_deref())?;
    cfg.override_seed(common.seed);
    Ok(cfg)
}

fn dispatch(cli: Cli) -> genemoe::Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = load(&common)?;
            run::synth(&cfg, &common.out)
        }
        Command::Pretrain { common, data } => {
            let cfg = load(&common)?;
            run::pretrain_cmd(&cfg, &data, &common.out)
        }
        Command::Survival {
            common,
            data,
            checkpoint,
            norm,
        } => {
            let cfg = load(&common)?;
            run::survival_cmd(&cfg, &data, checkpoint.as_deref(), norm.as_deref(), &common.out)
        }
        Command::Classify {
            common,
            data,
            checkpoint,
            norm,
        } => {
            let cfg = load(&common)?;
            run::classify_cmd(&cfg, &data, checkpoint.as_deref(), norm.as_deref(), &common.out)
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            norm,
        } => {
            let cfg = load(&common)?;
            run::eval_cmd(&cfg, &data, &checkpoint, norm.as_deref(), &common.out)
        }
        Command::Analyze {
            common,
            data,
            checkpoint,
            norm,
        } => {
            let cfg = load(&common)?;
            run::analyze_cmd(&cfg, &data, &checkpoint, norm.as_deref(), &common.out)
        }
        Command::Ablate { common, data } => {
            let cfg = load(&common)?;
            run::ablate_cmd(&cfg, &data, &common.out)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
