//! Command-line driver: pre-training, probing, metrics, and inspection of
//! node encodings and relation graphs.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
//! abort.

mod commands;
mod manifest;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use exgrg_core::Error;

#[derive(Parser)]
#[command(name = "exgrg", version, about = "Relation-graph self-supervised pre-training for graph encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the encoder/expander on a dataset directory.
    Pretrain {
        /// Config file (flat key=value); defaults apply for absent keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory with edges.txt, features.csv, optional labels.txt.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for manifest, metrics trace, and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Linear-probe a checkpoint's frozen representations.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Overrides probe.trials from the stored config.
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dump a positional/structural encoding as CSV.
    Pse {
        #[arg(long)]
        data: PathBuf,
        /// lappe | rwse | signnet
        #[arg(long)]
        kind: String,
        /// Frequency count for lappe/signnet.
        #[arg(long)]
        freq: Option<usize>,
        /// Kernel step count for rwse.
        #[arg(long)]
        kernel: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dump one relation graph (or the aggregate) as a sparse triple file.
    Relgraph {
        #[arg(long)]
        data: PathBuf,
        /// aug | knn | adj | adj_filtered | lappe | rwse | rwse_filtered |
        /// signnet | cluster | aggregate
        #[arg(long)]
        kind: String,
        /// Checkpoint supplying trained parameters (fresh init otherwise).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Row-wise k override for similarity-based kinds.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Collapse metrics (corr/std/nstd/rank) of a checkpoint's H and Z.
    Metrics {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a stochastic-block-model dataset directory.
    GenSbm {
        #[arg(long)]
        blocks: usize,
        #[arg(long)]
        nodes_per_block: usize,
        #[arg(long)]
        p_in: f64,
        #[arg(long)]
        p_out: f64,
        #[arg(long, default_value_t = 16)]
        feature_dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Parse { .. }
        | Error::Io { .. }
        | Error::InvalidInput(_)
        | Error::Checkpoint(_)
        | Error::InsufficientSpectrum { .. } => 2,
        Error::Shape { .. }
        | Error::NonFinite { .. }
        | Error::EigenConvergence { .. }
        | Error::SinkhornUnderflow { .. }
        | Error::Numeric(_) => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are not errors
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Pretrain { config, data, out, seed } => {
            commands::pretrain(config.as_deref(), &data, &out, seed)
        }
        Command::Probe { checkpoint, data, trials, out, seed } => {
            commands::probe(&checkpoint, &data, trials, &out, seed)
        }
        Command::Pse { data, kind, freq, kernel, config, out, seed } => {
            commands::pse(&data, &kind, freq, kernel, config.as_deref(), &out, seed)
        }
        Command::Relgraph { data, kind, checkpoint, config, k, out, seed } => {
            commands::relgraph(&data, &kind, checkpoint.as_deref(), config.as_deref(), k, &out, seed)
        }
        Command::Metrics { checkpoint, data, out } => commands::metrics(&checkpoint, &data, &out),
        Command::GenSbm { blocks, nodes_per_block, p_in, p_out, feature_dim, seed, out } => {
            commands::gen_sbm(blocks, nodes_per_block, p_in, p_out, feature_dim, seed, &out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
