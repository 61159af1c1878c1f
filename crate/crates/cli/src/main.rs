//! `cigan`: phantom generation, patch extraction, GAN training, synthesis,
//! classifier training and evaluation, one subcommand per stage.

mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use cigan_core::classifier::Scheme;
use cigan_core::Error;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cigan", version, about = "Conditional infilling GAN augmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural phantom dataset of full images and masks.
    Phantom {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        /// Image size as HEIGHTxWIDTH.
        #[arg(long, default_value = "1375x750", value_parser = parse_dims)]
        size: (usize, usize),
        #[arg(long, default_value_t = 0.5)]
        lesion_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Resize full images and sample patches into a patch archive.
    Patches {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 1)]
        count_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Experiment config whose `[extraction]` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        patch_size: Option<usize>,
        /// Sample from the images at their stored size.
        #[arg(long)]
        no_resize: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Pretrain and then adversarially train the generator.
    TrainGan {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Trainer checkpoint (`checkpoints/trainer_<iteration>.cign`) to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Generate one opposite-class patch per training patch.
    Synthesize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Generator checkpoint; defaults to `data.generator` in the config.
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train the patch classifier under one augmentation scheme.
    TrainClassifier {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_scheme)]
        scheme: Option<Scheme>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Compare classifier runs by test AUC with paired DeLong tests.
    Evaluate {
        /// Classifier run directories.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Config used for the sample grid (`data.patches`, `data.generator`).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or_else(|| format!("expected HEIGHTxWIDTH, got `{s}`"))?;
    let h = h.parse().map_err(|e| format!("height: {e}"))?;
    let w = w.parse().map_err(|e| format!("width: {e}"))?;
    Ok((h, w))
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// 2 usage or configuration, 3 data, 4 numeric divergence.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidInput(_) | Error::Config { .. } | Error::IncompatibleCheckpoint(_) => 2,
        Error::Divergence { .. } | Error::Numeric(_) | Error::DegenerateStatistics(_) => 4,
        Error::SamplingStarvation { .. } | Error::CorruptCheckpoint(_) | Error::Data(_) | Error::Io { .. } | Error::Image { .. } => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantom { n, size, lesion_rate, seed, out, force } => stages::phantom(n as usize, size, lesion_rate, seed, &out, force),
        Command::Patches { manifest, count_per_class, seed, config, patch_size, no_resize, out, force } => stages::patches(
            &manifest,
            stages::PatchOptions { count_per_class, config: config.as_deref(), patch_size, no_resize },
            seed,
            &out,
            force,
        ),
        Command::TrainGan { config, seed, resume, out, force } => stages::train_gan(&config, seed, resume.as_deref(), &out, force),
        Command::Synthesize { config, seed, generator, out, force } => stages::synthesize(&config, seed, generator.as_deref(), &out, force),
        Command::TrainClassifier { config, seed, scheme, out, force } => stages::train_classifier(&config, seed, scheme, &out, force),
        Command::Evaluate { runs, config, out, force } => stages::evaluate(&runs, config.as_deref(), &out, force),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
