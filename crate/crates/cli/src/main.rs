//! Pipeline entry point: dataset generation, pretraining, fine-tuning,
//! sampling, and evaluation as subcommands.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use mvicl_cli::commands::{self, finetune::ScaSwitch, sample::SampleArgs};

#[derive(Parser)]
#[command(name = "mvicl", about = "Depth-guided in-context multi-view generation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Render a body-sim dataset of four-view grids.
    Datagen {
        /// Number of samples; at least one.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Panel side in pixels.
        #[arg(long, default_value_t = 160, value_parser = clap::value_parser!(u64).range(8..))]
        side: u64,
        #[arg(long)]
        out: PathBuf,
        /// Write into a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the base model on single captioned panels.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a pretraining checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train LoRA and the depth adapter on four-panel grids.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Base checkpoint: pretrained to start fresh, fine-tuned to resume.
        #[arg(long)]
        base: PathBuf,
        /// Correspondence alignment against the frozen branch.
        #[arg(long, default_value = "on")]
        sca: OnOff,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a four-view grid from a pose (or fitted keypoints) and a caption.
    #[command(group(clap::ArgGroup::new("pose_source").required(true).multiple(false)))]
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Caption token ids, space separated.
        #[arg(long)]
        caption: String,
        /// Pose JSON file.
        #[arg(long, group = "pose_source")]
        pose: Option<PathBuf>,
        /// Keypoints JSON file to fit a pose from.
        #[arg(long, group = "pose_source")]
        fit: Option<PathBuf>,
        #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
        steps: u64,
        /// Classifier-free guidance scale.
        #[arg(long, default_value_t = 7.5)]
        cfg: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score sampled grids: multi-view consistency and attribute accuracy.
    Eval {
        /// Directory of sample subdirectories.
        #[arg(long)]
        samples: PathBuf,
        /// CSV report path, one row per evaluated sample.
        #[arg(long)]
        report: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Datagen { n, seed, side, out, force } => {
            commands::datagen::run(n as usize, seed, side as usize, &out, force)
        }
        Command::Pretrain { config, out, resume } => {
            commands::pretrain::run(&config, &out, resume.as_deref())
        }
        Command::Finetune { config, base, sca, out } => {
            let sca = match sca {
                OnOff::On => ScaSwitch::On,
                OnOff::Off => ScaSwitch::Off,
            };
            commands::finetune::run(&config, &base, sca, &out)
        }
        Command::Sample { checkpoint, caption, pose, fit, steps, cfg, seed, out } => {
            commands::sample::run(&SampleArgs {
                checkpoint: &checkpoint,
                caption: &caption,
                pose: pose.as_deref(),
                fit: fit.as_deref(),
                steps: steps as usize,
                cfg_scale: cfg,
                seed,
                out: &out,
            })
        }
        Command::Eval { samples, report } => commands::eval::run(&samples, &report),
    }
}

fn main() -> ExitCode {
    // Internal data parallelism never changes output bytes; the cap only
    // bounds resource use.
    if let Ok(threads) = std::env::var("MVICL_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
