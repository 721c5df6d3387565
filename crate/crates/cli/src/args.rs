use clap::{Args, Parser, Subcommand};
use grail_core::pipeline::Method;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "grail", version, about = "Training-free structured compression with Gram-based compensation")]
pub struct Cli {
    /// Worker threads for parallel stages.
    #[arg(long, global = true, env = "GRAIL_THREADS", value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,

    /// Seed for every stochastic component.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Report measured wall times; without it timing fields are written as 0.
    #[arg(long, global = true)]
    pub timings: bool,

    /// Only log errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compress a model and merge the compensation into its consumers.
    Compress(CompressArgs),
    /// Evaluate a model on stored inputs and targets.
    Eval(EvalArgs),
    /// Compressed-vs-compensated sweep over a synthetic task.
    Sweep(ConfigArgs),
    /// Calibration-size ablation over a synthetic task.
    Ablate(ConfigArgs),
    /// Write the consumer-input Gram of one block.
    GramDump(GramDumpArgs),
    /// Describe a .grlw, .grlc or .grlg file.
    Inspect(InspectArgs),
    /// Generate a synthetic teacher with calibration and evaluation data.
    Synth(SynthArgs),
}

pub fn parse_ratio(s: &str) -> Result<f64, String> {
    let r: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..1.0).contains(&r) {
        Ok(r)
    } else {
        Err(format!("ratio must lie in [0, 1), got {s}"))
    }
}

pub fn parse_alpha(s: &str) -> Result<f64, String> {
    let a: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if a > 0.0 && a < 1.0 {
        Ok(a)
    } else {
        Err(format!("alpha must lie in (0, 1), got {s}"))
    }
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Calibration inputs; may instead come from the plan's `calib` entry.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// JSON compression plan with per-block entries.
    #[arg(long, conflicts_with_all = ["method", "ratio", "compensate", "alpha", "blocks"])]
    pub plan: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(Method))]
    pub method: Option<Method>,
    #[arg(long, value_parser = parse_ratio)]
    pub ratio: Option<f64>,
    /// Merge the ridge reconstruction into each consumer.
    #[arg(long)]
    pub compensate: bool,
    #[arg(long, value_parser = parse_alpha)]
    pub alpha: Option<f64>,
    /// Blocks to compress (default: all).
    #[arg(long, value_delimiter = ',')]
    pub blocks: Option<Vec<usize>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Inputs, `N × input shape`.
    #[arg(long)]
    pub data: PathBuf,
    /// Targets: rank 1 holds class labels, anything else regression targets.
    #[arg(long)]
    pub targets: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON document with `task`, `model` and the grids.
    #[arg(long)]
    pub config: PathBuf,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GramDumpArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub block: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON document with `task` and optional `model`.
    #[arg(long)]
    pub config: PathBuf,
    /// Directory for model.grlw, calib.grlc, eval_inputs.grlc and eval_targets.grlc.
    #[arg(long)]
    pub out_dir: PathBuf,
}
