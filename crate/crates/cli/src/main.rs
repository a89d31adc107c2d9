use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pwd_lact::eval::AblationKind;
use pwd_lact_cli::{dispatch, init_threads, Command, ReconstructArgs, RunConfig};

#[derive(Parser)]
#[command(name = "pwd-lact", version, about = "Limited-angle CT reconstruction with a guided diffusion model")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Generate the synthetic train/test pairs.
    Dataset,
    /// Train the denoiser.
    Train {
        /// Override `train.wtconv` (true or false).
        #[arg(long)]
        wtconv: Option<bool>,
        /// Retrain even when a matching checkpoint exists.
        #[arg(long)]
        force: bool,
    },
    /// Reconstruct the test set, or a single prior with --prior.
    Reconstruct {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        prior: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        w: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score reconstructions against the test targets.
    Evaluate,
    /// Run one ablation sweep.
    Ablate {
        /// guidance-weight, step-count or wtconv.
        #[arg(long)]
        kind: AblationKind,
    },
    /// dataset, train, reconstruct and evaluate in one go.
    Pipeline,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = cli.out_dir {
        cfg.out_dir = dir;
    }
    let cmd = match cli.command {
        Sub::Dataset => Command::Dataset,
        Sub::Train { wtconv, force } => Command::Train { wtconv, force },
        Sub::Reconstruct {
            checkpoint,
            prior,
            out,
            steps,
            w,
            seed,
        } => Command::Reconstruct(ReconstructArgs {
            checkpoint,
            prior,
            out,
            steps,
            w,
            seed,
        }),
        Sub::Evaluate => Command::Evaluate,
        Sub::Ablate { kind } => Command::Ablate { kind },
        Sub::Pipeline => Command::Pipeline,
    };
    dispatch(&cmd, &cfg)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
