use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "dgae", version, about = "Diffusion autoencoder with group-supervised latent disentanglement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Experiment configuration (JSON).
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory (defaults to the run directory).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides the step budget of the stage being trained.
    #[arg(long, value_name = "N")]
    pub steps: Option<usize>,
    /// DDIM ladder length for sampling and inversion.
    #[arg(long = "T-sample", value_name = "N")]
    pub t_sample: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Pretrain,
    Refine,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NoiseArg {
    /// x_T from DDIM inversion of the identity donor.
    Inferred,
    /// x_T drawn from N(0, I) with --seed.
    Random,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the full dataset grid to PNGs plus a CSV manifest.
    Dataset {
        #[command(flatten)]
        common: Common,
    },
    /// Run one training stage.
    Train {
        #[arg(value_enum)]
        stage: StageArg,
        #[command(flatten)]
        common: Common,
        /// Continue from this stage's own checkpoint when one exists.
        #[arg(long)]
        resume: bool,
        /// Joint stage only: start from fresh weights (unsupported, unstable).
        #[arg(long)]
        from_scratch: bool,
    },
    /// Exchange one attribute between two images.
    Swap {
        #[command(flatten)]
        common: Common,
        /// First image: a PNG path or `tuple:ID,BG,POSE`.
        #[arg(long)]
        a: String,
        /// Second image: a PNG path or `tuple:ID,BG,POSE`.
        #[arg(long)]
        b: String,
        /// Attribute to exchange; every attribute when omitted.
        #[arg(long)]
        attr: Option<String>,
    },
    /// Combine attributes taken from several donor images.
    Recombine {
        #[command(flatten)]
        common: Common,
        /// Donor per attribute as `NAME=IMAGE` (IMAGE as for swap).
        #[arg(long = "donor", value_name = "NAME=IMAGE", required = true)]
        donors: Vec<String>,
        #[arg(long, value_enum, default_value = "random")]
        noise: NoiseArg,
    },
    /// Interpolate between two images.
    Interpolate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        /// Number of interior frames, evenly spaced in (0, 1).
        #[arg(long, default_value_t = 7)]
        frames: usize,
        /// Interpolate only this attribute's slice.
        #[arg(long)]
        attr: Option<String>,
    },
    /// Compute the metrics of a trained run.
    Eval {
        #[command(flatten)]
        common: Common,
    },
}
