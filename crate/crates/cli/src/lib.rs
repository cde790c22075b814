//! Command-line driver for `latentedit`.
//!
//! The binary is a thin wrapper over [`run`], so tests can drive every
//! subcommand in-process.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod sweep;

#[derive(Debug, Parser)]
#[command(
    name = "latentedit",
    version,
    about = "Similarity-guided latent fusion editing"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Invert the source latent and write every trajectory entry.
    Invert(RunArgs),
    /// Edit with fusion against the inverted source trajectory.
    Edit(RunArgs),
    /// Edit with fusion against forward-diffused pseudo-references (no inversion).
    EditInvfree(RunArgs),
    /// Print MSE, PSNR and SSIM between two files.
    Metrics(MetricsArgs),
    /// Write one channel of a latent file as an 8-bit PGM.
    Export(ExportArgs),
    /// Run the editor over a parameter grid and emit one CSV row per run.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    pub config: PathBuf,
    /// Output directory; overrides `[output] directory`.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    /// Inputs are binary PGM images instead of latent files.
    #[arg(long)]
    pub images: bool,
    /// Peak value for PSNR and the SSIM range. Defaults to 255 for images
    /// and to the value span of the first input otherwise.
    #[arg(long)]
    pub range: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RangeArg {
    /// [0, 1] maps to [0, 255].
    Unit,
    /// [-1, 1] maps to [0, 255].
    Signed,
    /// The channel's own min and max map to 0 and 255.
    Minmax,
}

impl From<RangeArg> for latentedit::io::GrayScale {
    fn from(r: RangeArg) -> Self {
        match r {
            RangeArg::Unit => Self::Unit,
            RangeArg::Signed => Self::Signed,
            RangeArg::Minmax => Self::MinMax,
        }
    }
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Latent file; similarity maps are stored as one-channel latents.
    pub input: PathBuf,
    pub output: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
    #[arg(long, value_enum, default_value_t = RangeArg::Minmax)]
    pub range: RangeArg,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, short)]
    pub config: PathBuf,
    /// CSV destination; stdout when absent.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub modes: Vec<ModeArg>,
    #[arg(long, value_delimiter = ',')]
    pub steps: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub gammas: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub block_sizes: Vec<usize>,
    /// Run seeds. For generated scenarios the seed also regenerates the scenario.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum ModeArg {
    Inversion,
    #[value(name = "inversion_free", alias = "inversion-free")]
    InversionFree,
}

impl From<ModeArg> for latentedit::EditMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Inversion => Self::Inversion,
            ModeArg::InversionFree => Self::InversionFree,
        }
    }
}

/// Runs one parsed command, writing its normal output to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn std::io::Write) -> anyhow::Result<()> {
    match cli.command {
        Command::Invert(a) => commands::invert(&a, stdout),
        Command::Edit(a) => commands::edit(&a, latentedit::EditMode::Inversion, stdout),
        Command::EditInvfree(a) => commands::edit(&a, latentedit::EditMode::InversionFree, stdout),
        Command::Metrics(a) => commands::metrics(&a, stdout),
        Command::Export(a) => commands::export(&a, stdout),
        Command::Sweep(a) => sweep::run(&a, stdout),
    }
}
