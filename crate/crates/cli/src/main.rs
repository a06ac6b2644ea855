mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hullsplat::refine::ColorMode;

use crate::config::{FrameRange, Overrides, ParticleSource, PipelineConfig};
use crate::error::CliError;

/// Visual-hull carving, Gaussian splat fitting and pose embeddings for
/// calibrated multi-view video.
#[derive(Debug, Parser)]
#[command(name = "hullsplat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: GlobalArgs,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the `[synth]` scene into a dataset, rig file and true particles.
    Synth,
    /// Track body centers and headings into track.csv.
    Frame,
    /// Carve visual hulls into volumes/.
    Carve,
    /// Splat volumes into particles/ and render every camera into renders/.
    Render,
    /// Refine particle colors and opacities into fitted/.
    Fit,
    /// Score particles against the dataset into metrics.csv.
    Metrics,
    /// Compute heading-decorrelated embeddings into embeddings.csv.
    Embed,
    /// carve, render, fit and metrics (plus frame when the grid is egocentric).
    Run,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Pipeline TOML; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    rig: Option<PathBuf>,
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Half-open frame range START:END.
    #[arg(long, global = true, value_parser = parse_frames)]
    frames: Option<FrameRange>,
    /// Worker threads; falls back to HULLSPLAT_THREADS, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Carving grid resolution per axis.
    #[arg(long, global = true)]
    resolution: Option<usize>,
    #[arg(long, global = true)]
    lambda_color: Option<f64>,
    /// Opacity descent steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true, value_enum)]
    color_mode: Option<ColorModeArg>,
    /// Particle set read by metrics and embed.
    #[arg(long, global = true, value_enum)]
    source: Option<SourceArg>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum ColorModeArg {
    LeastSquares,
    Gradient,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum SourceArg {
    Particles,
    Fitted,
}

fn parse_frames(text: &str) -> Result<FrameRange, String> {
    FrameRange::parse(text).map_err(|e| e.to_string())
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            dataset: self.dataset.clone(),
            rig: self.rig.clone(),
            output: self.output.clone(),
            frames: self.frames,
            resolution: self.resolution,
            lambda_color: self.lambda_color,
            opacity_steps: self.steps,
            learning_rate: self.learning_rate,
            color_mode: self.color_mode.map(|m| match m {
                ColorModeArg::LeastSquares => ColorMode::LeastSquares,
                ColorModeArg::Gradient => ColorMode::Gradient,
            }),
            source: self.source.map(|s| match s {
                SourceArg::Particles => ParticleSource::Particles,
                SourceArg::Fitted => ParticleSource::Fitted,
            }),
        }
    }

    fn threads(&self) -> Result<Option<usize>, CliError> {
        if let Some(n) = self.threads {
            return Ok(Some(n));
        }
        match std::env::var("HULLSPLAT_THREADS") {
            Ok(v) => v
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| CliError::InvalidConfig(format!("HULLSPLAT_THREADS=`{v}` is not a count"))),
            Err(_) => Ok(None),
        }
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.global.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    cfg.apply(&cli.global.overrides());
    cfg.validate()?;
    if let Some(n) = cli.global.threads()? {
        if n == 0 {
            return Err(CliError::InvalidConfig("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::InvalidConfig(format!("thread pool: {e}")))?;
    }
    output::write_bytes(&cfg.output.join("effective_config.toml"), cfg.to_toml()?.as_bytes())?;
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Frame => commands::frame(&cfg).map(drop),
        Command::Carve => commands::carve(&cfg),
        Command::Render => commands::render(&cfg),
        Command::Fit => commands::fit(&cfg),
        Command::Metrics => commands::metrics(&cfg),
        Command::Embed => commands::embed(&cfg),
        Command::Run => commands::run(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
