//! `qsat`: train, evaluate, diagnose, study and fold desk-scale models.
//!
//! stdout carries one JSON object per invocation; progress and tables go
//! to stderr. Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success (for `diagnose`: every rule passed) |
//! | 1 | `diagnose` found a WARN or FAIL |
//! | 2 | usage or config error, missing init checkpoint |
//! | 3 | dataset error |
//! | 4 | training diverged |
//! | 5 | model cannot be folded or run on the integer path |
//! | 6 | I/O or checkpoint error |
//! | 10 | internal error |

mod commands;
mod outdir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qsat_core::Error;

#[derive(Parser)]
#[command(name = "qsat", version, about = "Quantization-aware training toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct DataArgs {
    /// Run config (flat `key = value` file).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of a file dataset; overrides `dataset_path`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint whose tensors initialize the model (required for quantized configs).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Overrides the config's `seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Write into `--out` even if it already holds files.
        #[arg(long)]
        force: bool,
    },
    /// Top-1/top-5 accuracy of a checkpoint or folded model on the validation split.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Efficient-training rule check of a checkpoint.
    Diagnose {
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Monte-Carlo weight-variance study.
    Study {
        study: Study,
        /// Neuron counts (clamp-var) or the single fan-in (quant-var).
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
        /// Bit widths for quant-var.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8")]
        bits: Vec<u32>,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs/study")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Fold batch norm into an integer-inference model file.
    Fold {
        checkpoint: PathBuf,
        #[arg(long, default_value = "runs/fold")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Study {
    ClampVar,
    QuantVar,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Diagnose { .. } => "diagnose",
            Command::Study { .. } => "study",
            Command::Fold { .. } => "fold",
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::MissingInit(_) => 2,
        Error::Dataset(_) => 3,
        Error::Divergence { .. } => 4,
        Error::NotFoldable(_) | Error::DegenerateChannel(_) | Error::Overflow(_) => 5,
        Error::Io(_) | Error::Checkpoint(_) => 6,
        _ => 10,
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("QSAT_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::Config(format!(
            "QSAT_THREADS must be a positive integer, got `{v}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("QSAT_THREADS: {e}")))
}

fn run(command: Command) -> Result<(serde_json::Value, u8), Error> {
    configure_threads()?;
    match command {
        Command::Train {
            config,
            init,
            seed,
            dataset,
            out,
            force,
        } => commands::train(&config, init.as_deref(), seed, dataset, &out, force),
        Command::Eval { checkpoint, data } => commands::eval(&checkpoint, &data),
        Command::Diagnose { checkpoint, data } => commands::diagnose(&checkpoint, &data),
        Command::Study {
            study,
            n,
            bits,
            samples,
            repeats,
            seed,
            out,
            force,
        } => commands::study(study, n, &bits, samples, repeats, seed, &out, force),
        Command::Fold {
            checkpoint,
            out,
            force,
        } => commands::fold(&checkpoint, &out, force),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(cli.command) {
        Ok((summary, code)) => {
            println!("{summary}");
            ExitCode::from(code)
        }
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("qsat {name}: {e}");
            println!(
                "{}",
                serde_json::json!({ "command": name, "error": e.to_string(), "exit": code })
            );
            ExitCode::from(code)
        }
    }
}
