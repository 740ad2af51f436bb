mod commands;
mod source;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use tokenbridge_core::harness::Solution;

use crate::source::SourceArgs;

#[derive(Parser)]
#[command(
    name = "tokenbridge",
    version,
    about = "Local-first video QA with edge token offloading"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct GlobalArgs {
    /// TOML config file; `TB_*` environment variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Network model as `up_mbps,down_mbps,rtt_ms`.
    #[arg(long, global = true, value_name = "UP,DOWN,RTT")]
    network: Option<String>,
    /// Write the JSON result here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Repeat for more logging.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Read container metadata (frame count, rate, keyframes) without decoding.
    Probe { video: PathBuf },
    /// Select the frames to encode for a video.
    Sample {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        n_min: Option<u64>,
        #[arg(long)]
        n_max: Option<u64>,
    },
    /// Fit a temperature to one model's logits in a trace.
    Calibrate {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_parser = ["small", "large"])]
        role: String,
    },
    /// Train the frozen extractor and arm statistics on a profiling trace.
    /// `--out` names the `TBX1` bundle (default `model.tbx`); a summary goes
    /// to stdout.
    TrainExtractor {
        #[arg(long)]
        profiling: PathBuf,
    },
    /// Run an edge node over TCP.
    ServeEdge {
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        /// Large-model temperature, or a `calibrate` output file. Fitted on
        /// the profiling split when absent.
        #[arg(long)]
        temperature: Option<String>,
        #[command(flatten)]
        source: SourceArgs,
    },
    /// Serve the test split on this device, offloading to a live edge node.
    RunDevice {
        #[arg(long)]
        edge: String,
        #[arg(long, default_value = "quickgrasp")]
        solution: Solution,
        /// Serve at most this many test queries.
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        source: SourceArgs,
    },
    /// One solution, one run, with the simulated network.
    Simulate {
        #[arg(long, default_value = "quickgrasp")]
        solution: Solution,
        #[command(flatten)]
        source: SourceArgs,
    },
    /// Repeated-seed comparison of several solutions, or `bench pipeline`.
    #[command(args_conflicts_with_subcommands = true)]
    Bench {
        #[command(subcommand)]
        kind: Option<BenchKind>,
        /// Comma-separated; defaults to the four main solutions.
        #[arg(long, value_delimiter = ',')]
        solution: Vec<Solution>,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[command(flatten)]
        source: SourceArgs,
    },
}

#[derive(Subcommand)]
enum BenchKind {
    /// Time the three-stage tokenization pipeline with sleeping stages.
    Pipeline {
        /// Per-batch decode, preprocess and encode times in ms.
        #[arg(long, value_delimiter = ',', default_value = "10,5,8")]
        stage_times: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        batches: usize,
        #[arg(long, default_value_t = 2)]
        capacity: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = commands::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
