//! `obidiff` subcommands and the study server.

pub mod bundle;
pub mod commands;
pub mod config;
pub mod server;

use anyhow::Result;
use clap::{Parser, Subcommand};
use config::CommonArgs;
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(name = "obidiff", version, about = "Glyph- and style-conditioned diffusion for oracle bone rubbings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic glyph/rubbing dataset and its manifest.
    Synth(CommonArgs),
    /// Run the IoU quality gate over every pair.
    Validate(CommonArgs),
    /// Assign train/val/test splits in the manifest.
    Split(CommonArgs),
    /// Train the conditioned diffusion model.
    TrainDiffusion(CommonArgs),
    /// Sample images from a trained diffusion checkpoint.
    Generate(GenerateArgs),
    /// Train the rubbing-to-glyph denoiser.
    TrainDenoiser(CommonArgs),
    /// Train the recognition classifier.
    TrainClassifier(CommonArgs),
    /// Pair metrics and recognition accuracy for a directory of generated images.
    Eval(CommonArgs),
    /// Retrain the classifier with pseudo images for rare classes at several scales.
    AugmentExperiment(CommonArgs),
    /// Brightness, contrast, sharpness and spatial information per image.
    Features(CommonArgs),
    /// Build a shuffled real/generated image bundle for the human study.
    StudyBundle(CommonArgs),
    /// Serve the study API for a bundle.
    StudyServe(ServeArgs),
    /// Score completed study sessions from their response logs.
    StudyScore(ScoreArgs),
}

#[derive(clap::Args, Debug, Default)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// few-shot, zero-shot, personalized or batch
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub glyph: Option<PathBuf>,
    #[arg(long)]
    pub style: Option<PathBuf>,
    /// JSONL request file for batch mode.
    #[arg(long)]
    pub requests: Option<PathBuf>,
}

#[derive(clap::Args, Debug, Default)]
pub struct ServeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

#[derive(clap::Args, Debug, Default)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Score one session; all sessions in the bundle otherwise.
    #[arg(long)]
    pub session: Option<String>,
}

pub fn run(cli: Cli) -> Result<()> {
    let env: Vec<(String, String)> = std::env::vars().collect();
    run_with_env(cli, &env)
}

/// Same as [`run`] with an explicit environment, for tests.
pub fn run_with_env(cli: Cli, env: &[(String, String)]) -> Result<()> {
    use commands::*;
    match &cli.command {
        Command::Synth(a) => data::synth(a, env),
        Command::Validate(a) => data::validate(a, env),
        Command::Split(a) => data::split(a, env),
        Command::TrainDiffusion(a) => train::train_diffusion(a, env),
        Command::Generate(a) => generate::generate(a, env),
        Command::TrainDenoiser(a) => train::train_denoiser(a, env),
        Command::TrainClassifier(a) => train::train_classifier(a, env),
        Command::Eval(a) => eval::eval(a, env),
        Command::AugmentExperiment(a) => eval::augment_experiment(a, env),
        Command::Features(a) => eval::features(a, env),
        Command::StudyBundle(a) => study::study_bundle(a, env),
        Command::StudyServe(a) => study::study_serve(a, env),
        Command::StudyScore(a) => study::study_score(a, env),
    }
}
