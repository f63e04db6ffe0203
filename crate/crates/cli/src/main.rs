use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use invdes::config::{PipelineConfig, Profile};
use invdes::error::CoreError;
use invdes::pipeline::{Pipeline, Stage};
use invdes::property::SurrogateAbsorption;

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_MISSING: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(name = "invdes", version, about = "Inverse microstructure design with a GAN latent space and a mixture density network")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Key-value configuration file applied over the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in profile: desk or paper.
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; each stage writes a subdirectory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the Gaussian-random-field image set and its properties.
    GenGrf,
    /// Train the generator and discriminator.
    TrainGan,
    /// Sample latents, render them and simulate their properties.
    BuildPairs,
    /// Train the mixture density network from properties to latents.
    TrainMdn,
    /// Generate candidates for one target property.
    Invert {
        #[arg(long)]
        target: f64,
        #[arg(long, default_value_t = 30)]
        n: usize,
    },
    /// Train the PCA-MDN baseline.
    BaselinePca,
    /// Train the pixel-space MDN baseline.
    BaselineDirect,
    /// Run Bayesian optimization over the latent space for every target.
    BaselineBo,
    /// Evaluate all methods on all targets and write the report.
    Evaluate,
    /// Run every stage from gen-grf through evaluate.
    All,
    /// Print the resolved configuration and its hash.
    ShowConfig,
}

fn resolve(g: &Global) -> Result<PipelineConfig, CoreError> {
    let profile = g.profile.as_deref().map(str::parse::<Profile>).transpose()?;
    let mut cfg = match &g.config {
        Some(path) => PipelineConfig::load(path, profile)?,
        None => PipelineConfig::profile(profile.unwrap_or(Profile::Desk)),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CoreError> {
    let cfg = resolve(&cli.global)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_file_string());
        println!("# config_hash = {}", cfg.hash());
        return Ok(());
    }
    let mut pipeline = Pipeline::new(cfg, Arc::new(SurrogateAbsorption))?;
    if !cli.global.quiet {
        pipeline.log = Box::new(|msg| eprintln!("{msg}"));
    }
    match cli.command {
        Command::GenGrf => pipeline.run(Stage::GenGrf),
        Command::TrainGan => pipeline.run(Stage::TrainGan),
        Command::BuildPairs => pipeline.run(Stage::BuildPairs),
        Command::TrainMdn => pipeline.run(Stage::TrainMdn),
        Command::Invert { target, n } => {
            let inv = pipeline.invert(target, n)?;
            println!("candidates written to {}", inv.dir.display());
            Ok(())
        }
        Command::BaselinePca => pipeline.run(Stage::BaselinePca),
        Command::BaselineDirect => pipeline.run(Stage::BaselineDirect),
        Command::BaselineBo => pipeline.run(Stage::BaselineBo),
        Command::Evaluate => pipeline.run(Stage::Evaluate),
        Command::All => pipeline.run_all().map(|_| ()),
        Command::ShowConfig => unreachable!(),
    }?;
    Ok(())
}

fn exit_code(e: &CoreError) -> u8 {
    match e {
        CoreError::Config(_) | CoreError::UnknownMethod(_) => EXIT_CONFIG,
        CoreError::MissingPrerequisite { .. } => EXIT_MISSING,
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_OTHER,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
