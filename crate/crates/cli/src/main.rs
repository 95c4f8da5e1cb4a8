mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "fdd", version, about = "End-to-end FDD multi-user MIMO precoding experiments")]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces every seed in the configuration (data, training, evaluation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for datasets, checkpoints and tables.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate one dataset file per configured task.
    GenData,
    /// Train according to the plan's mode and write model.ckpt and loss.csv.
    Train {
        /// Task for single-task modes; defaults to the first task.
        #[arg(long)]
        task: Option<String>,
        /// Continue MTL/STL training from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Attach a held-out task to a trained model and train its head only.
    Finetune {
        #[arg(long)]
        task: String,
        /// Pretrained model; defaults to model.ckpt in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output checkpoint; defaults to finetune-<task>.ckpt.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Score one scheme on a task's test split and append a metrics row.
    Eval {
        /// model, zf, wmmse, random or mf.
        #[arg(long)]
        scheme: String,
        /// Defaults to the first task.
        #[arg(long)]
        task: Option<String>,
        /// Dataset file; defaults to <out>/<task>.fddc, generated if absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluation SNR in dB; defaults to the task's.
        #[arg(long)]
        snr: Option<f64>,
    },
    /// Score every configured scheme at every SNR of the grid.
    Compare {
        /// Defaults to every pretraining task.
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and score variants along one architecture axis.
    Scaling {
        /// experts or width.
        #[arg(long)]
        axis: String,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<usize>,
        #[arg(long)]
        task: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(config) = cli.config else {
        Cli::command()
            .error(ErrorKind::MissingRequiredArgument, "--config <CONFIG> is required")
            .exit();
    };
    let ctx = commands::Context {
        config,
        seed: cli.seed,
        out: cli.out,
    };
    let result = match cli.precision {
        Precision::F32 => commands::run::<f32>(&ctx, &cli.command),
        Precision::F64 => commands::run::<f64>(&ctx, &cli.command),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::FAILURE
        }
    }
}
