//! `atlasforge` command-line interface.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "atlasforge",
    version,
    about = "Learn conditional deformable templates and register images to them"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// JSON file with training configuration fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed overriding the configured one.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (a file path for `template`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Attribute values for conditional templates.
#[derive(Debug, Clone, Args, Serialize)]
pub struct AttrArgs {
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub rotation: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Unconditional,
    Conditional,
    Latent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    Oracle,
    Class,
    ClassScale,
    ClassScaleRot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a template and registration network on a dataset.
    Train(TrainArgs),
    /// Write the template for given attribute values.
    Template(TemplateArgs),
    /// Register one image: velocity, deformation, inverse and warped template.
    Register(RegisterArgs),
    /// Export the inverse deformation for one image.
    Invert(RegisterArgs),
    /// Centrality, regularity and reconstruction metrics, optionally with baselines.
    Evaluate(EvaluateArgs),
    /// Principal components of predicted velocities and montages along them.
    Pca(PcaArgs),
    /// Build a simulated or ground-truth dataset.
    SynthData(SynthArgs),
    /// Finite-difference verification of every primitive and the full objective.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Image directory with attributes.csv, or an IDX image file.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub iters: Option<u64>,
    /// Training items to drop, e.g. `classes=3,4,5;scale=0.9:1.1` or `class=5;max=5`.
    #[arg(long)]
    pub holdout: Option<String>,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TemplateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub attrs: AttrArgs,
    /// Image to encode (latent mode).
    #[arg(long)]
    pub image: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RegisterArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[command(flatten)]
    pub attrs: AttrArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Also train and evaluate the exemplar and decoder-only baselines.
    #[arg(long)]
    pub baselines: bool,
    /// Iterations for each baseline (defaults to the checkpoint's).
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub holdout: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PcaArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, default_value_t = 2)]
    pub components: usize,
    #[command(flatten)]
    pub attrs: AttrArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum, default_value = "oracle")]
    pub kind: SynthKind,
    /// Images in total (oracle) or per class.
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 3.0)]
    pub amplitude: f64,
    /// Class prototype for the oracle kind.
    #[arg(long, default_value_t = 3)]
    pub class: usize,
    /// Existing dataset to transform instead of generated glyphs.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GradCheckArgs {
    #[command(flatten)]
    pub common: Common,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<atlasforge::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
        if cause.downcast_ref::<commands::Usage>().is_some() {
            return 1;
        }
    }
    2
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("ATLASFORGE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| commands::Usage(format!("ATLASFORGE_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(commands::Usage("ATLASFORGE_THREADS must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Template(a) => commands::template(&a),
        Command::Register(a) => commands::register(&a, false),
        Command::Invert(a) => commands::register(&a, true),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Pca(a) => commands::pca(&a),
        Command::SynthData(a) => commands::synth_data(&a),
        Command::GradCheck(a) => commands::grad_check(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
