use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use uniseg_lab::commands::{
    cmd_conflict_demo, cmd_experiment, cmd_gen, cmd_gradcheck, cmd_relations, cmd_train,
    exit_code, ConflictArgs, DataArg, ExperimentArgs, GenArgs, GradcheckArgs, RelationsArgs,
    TrainArgs, EXIT_VALIDATION,
};
use uniseg_lab::experiment::DataSize;
use uniseg_lab::losses::LossKind;

#[derive(Parser)]
#[command(name = "uniseg-lab", version, about = "Multi-dataset segmentation under label shift")]
struct Cli {
    /// Seed for data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for experiments.
    #[arg(long, global = true, env = "UNISEG_LAB_THREADS", default_value_t = 1)]
    threads: usize,
    /// Command config file (train, experiment) or hierarchy spec (gen).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct SizeArgs {
    #[arg(long, default_value_t = 32)]
    train_images: usize,
    #[arg(long, default_value_t = 16)]
    test_images: usize,
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
}

impl From<SizeArgs> for DataSize {
    fn from(s: SizeArgs) -> Self {
        DataSize {
            train_images: s.train_images,
            test_images: s.test_images,
            height: s.height,
            width: s.width,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset dump.
    Gen {
        #[command(flatten)]
        size: SizeArgs,
    },
    /// Train one model.
    Train {
        /// Dump directory; the default fixture when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        size: SizeArgs,
    },
    /// Similarities, τ and multi-label table of a cosine-head checkpoint.
    Relations {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        size: SizeArgs,
    },
    /// Compare losses over leave-one-out settings and seeds.
    Experiment,
    /// Finite-difference gradient check.
    Gradcheck {
        /// Model spec JSON; the tiny 4-6-5 model with both heads when absent.
        #[arg(long)]
        model_spec: Option<PathBuf>,
        #[arg(long)]
        loss: Option<LossKind>,
        /// Perturb the analytic gradient (negative control).
        #[arg(long)]
        corrupt: bool,
    },
    /// Gradient sign products for conflicting labels on identical inputs.
    ConflictDemo {
        #[arg(long, default_value_t = 64)]
        pixels: usize,
    },
}

fn data_arg(data: Option<PathBuf>, size: SizeArgs) -> DataArg {
    match data {
        Some(dir) => DataArg::Dump(dir),
        None => DataArg::Fixture(size.into()),
    }
}

fn run(cli: Cli) -> uniseg_lab::Result<bool> {
    let seed = cli.seed.unwrap_or(0);
    let need_config = |what: &str| {
        cli.config.clone().ok_or_else(|| {
            uniseg_lab::Error::Config(format!("{what} needs --config <file>"))
        })
    };
    match cli.command {
        Command::Gen { size } => cmd_gen(&GenArgs {
            spec: cli.config.clone(),
            out: cli.out.clone(),
            seed,
            size: size.into(),
        })
        .map(|_| true),
        Command::Train { data, size } => cmd_train(&TrainArgs {
            config: need_config("train")?,
            data: data_arg(data, size),
            out: cli.out.clone(),
            seed: cli.seed,
        })
        .map(|_| true),
        Command::Relations {
            checkpoint,
            data,
            size,
        } => cmd_relations(&RelationsArgs {
            checkpoint,
            data: data_arg(data, size),
            out: cli.out.clone(),
            seed,
        })
        .map(|_| true),
        Command::Experiment => cmd_experiment(&ExperimentArgs {
            config: need_config("experiment")?,
            out: cli.out.clone(),
            threads: cli.threads,
            seed: cli.seed,
        })
        .map(|_| true),
        Command::Gradcheck {
            model_spec,
            loss,
            corrupt,
        } => cmd_gradcheck(&GradcheckArgs {
            model_spec,
            loss,
            seed,
            corrupt,
        })
        .map(|reports| reports.iter().all(|r| r.passed)),
        Command::ConflictDemo { pixels } => cmd_conflict_demo(&ConflictArgs {
            out: cli.out.clone(),
            seed,
            pixels,
        })
        .map(|_| true),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_VALIDATION as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
