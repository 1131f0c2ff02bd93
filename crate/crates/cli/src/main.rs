//! `lsmvos` — segment video sequences, evaluate results under the DAVIS
//! J/F protocol, benchmark the pipeline, and self-verify the kernels.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "lsmvos",
    about = "Video object segmentation by long/short-term similarity matching",
    version
)]
struct Cli {
    /// Worker threads (default: all cores; LSMVOS_THREADS is honored too)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Propagate the first-frame annotation through a sequence
    Segment(SegmentArgs),
    /// Score predicted label maps against ground truth
    Eval(EvalArgs),
    /// Run the pipeline on procedural clips and report timings
    Bench(BenchArgs),
    /// Run the oracle-equivalence and gradient suites
    Selftest,
}

#[derive(Args)]
#[command(group(ArgGroup::new("weights_src").required(true).args(["weights", "seed"])))]
struct SegmentArgs {
    /// Dataset root containing JPEGImages/ and Annotations/
    #[arg(long)]
    data: PathBuf,
    /// Sequence name
    #[arg(long)]
    seq: String,
    /// Resolution set directory
    #[arg(long, default_value = "480p")]
    set: String,
    /// Weights container file
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Seed for deterministic random weights instead of a file
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for indexed PNGs and the run manifest
    #[arg(long)]
    out: PathBuf,
    /// Zero-fill the long-term similarity inputs
    #[arg(long)]
    disable_long: bool,
    /// Zero-fill the short-term similarity inputs
    #[arg(long)]
    disable_short: bool,
    /// Zero-fill the previous-mask decoder input
    #[arg(long)]
    disable_prev_mask: bool,
    /// Background threshold for the object merge
    #[arg(long, default_value_t = 0.5)]
    theta: f32,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted label maps (PNG)
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth label maps (PNG)
    #[arg(long)]
    gt: PathBuf,
    /// Where to write the JSON report
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Frame size as WxH
    #[arg(long, default_value = "854x480")]
    size: String,
    /// Object count
    #[arg(long, default_value_t = 1)]
    objects: usize,
    /// Frames to segment (the clip has one extra init frame)
    #[arg(long, default_value_t = 10)]
    frames: usize,
    /// Seed for weights and the procedural clip
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Optional JSON report path
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also run the object-count scaling table (K = 1, 2, 4, 8)
    #[arg(long)]
    scale_objects: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let threads = cli
        .threads
        .or_else(|| std::env::var("LSMVOS_THREADS").ok()?.parse().ok());
    if let Some(n) = threads {
        if n > 0 {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                eprintln!("warning: could not set thread count: {e}");
            }
        }
    }

    let result = match cli.command {
        Command::Segment(args) => commands::segment(args, threads),
        Command::Eval(args) => commands::eval(args),
        Command::Bench(args) => commands::bench(args, threads),
        Command::Selftest => commands::selftest(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
