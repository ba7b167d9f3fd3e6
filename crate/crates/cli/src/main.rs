//! `gpic`: prepare data, train, sample and evaluate diversity.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};

mod commands;
mod report;

#[derive(Parser, Debug)]
#[command(name = "gpic", version, about = "Diffusion-based line-drawing colorization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic two-palette dataset and its manifest.
    Prepare(PrepareArgs),
    /// Train a denoiser on a manifest.
    Train(TrainArgs),
    /// Colorize a line drawing.
    Sample(SampleArgs),
    /// Pairwise perceptual distances over a directory of images.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    #[arg(long, value_parser = positive)]
    pub count: u64,
    #[arg(long, default_value_t = 32, value_parser = positive)]
    pub resolution: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated palette names (red, blue).
    #[arg(long, default_value = "red,blue")]
    pub palettes: String,
    /// Split recorded in the manifest header.
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Validation manifest; selects `best.gpic` when given.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Model used from `--switch-at` down to t = 1.
    #[arg(long)]
    pub checkpoint_fine: Option<PathBuf>,
    #[arg(long, requires = "checkpoint_fine")]
    pub switch_at: Option<usize>,
    #[arg(long)]
    pub line: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = positive)]
    pub n: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Initial colour `R,G,B`, each in [-1, 1].
    #[arg(long, allow_hyphen_values = true)]
    pub bias: Option<String>,
    /// Corrector iterations per step.
    #[arg(long)]
    pub corrector: Option<usize>,
    #[arg(long, requires = "mask_alpha")]
    pub mask_rgb: Option<PathBuf>,
    #[arg(long, requires = "mask_rgb")]
    pub mask_alpha: Option<PathBuf>,
    /// Sampling steps; defaults to the checkpoint's T.
    #[arg(long, value_parser = positive)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub images_dir: PathBuf,
    /// random, trained or identity.
    #[arg(long, default_value = "random")]
    pub extractor: String,
    /// Required by the trained extractor.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub extractor_seed: Option<u64>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn positive(s: &str) -> Result<u64, String> {
    match s.parse::<u64>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

/// Clap's message followed by the usage of the subcommand that was invoked.
fn usage_error(err: clap::Error) -> ExitCode {
    if matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
        err.exit();
    }
    let _ = err.print();
    if err.render().to_string().contains("Usage:") {
        return ExitCode::from(2);
    }
    let mut cmd = Cli::command();
    cmd.build();
    let name = std::env::args().nth(1).unwrap_or_default();
    let usage = match cmd.find_subcommand_mut(&name) {
        Some(sub) => sub.render_usage(),
        None => cmd.render_usage(),
    };
    eprintln!("{usage}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => return usage_error(err),
    };
    let result = commands::init_threads().and_then(|()| match cli.command {
        Command::Prepare(a) => commands::prepare(&a),
        Command::Train(a) => commands::train(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::Eval(a) => commands::eval(&a),
    });
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", report::error_line(&e));
            ExitCode::FAILURE
        }
    }
}
