use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Clustering-based fast vocabulary projection: synthesize, record, train, project, decode, bench.
#[derive(Debug, Parser)]
#[command(name = "clustervocab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate blocked weights plus one record file per block and a held-out hidden file.
    Synth(SynthArgs),
    /// Record the exact top-K tokens for every vector of a hidden file.
    Record(RecordArgs),
    /// Cluster recorded vectors and save the centroid-to-active-set map.
    TrainMap(TrainMapArgs),
    /// Project hidden vectors through a map (or exactly) and write per-row results.
    Project(ProjectArgs),
    /// Greedy or beam decoding driven by a stub hidden source.
    Decode(DecodeArgs),
    /// Sweep r and K, or evaluate saved maps, against the exact baseline.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub blocks: usize,
    /// Training vectors, split evenly across blocks.
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_weights: PathBuf,
    /// Record files are written as `{prefix}B{b}En.hrec`, plus `{prefix}heldout.hrec`.
    #[arg(long)]
    pub out_records_prefix: String,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Held-out vectors drawn from the full mixture (default: count / 5).
    #[arg(long)]
    pub heldout: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f32,
    #[arg(long, default_value_t = 4.0)]
    pub scale: f32,
    #[arg(long, default_value_t = 0.3)]
    pub std: f32,
}

#[derive(Debug, Args)]
pub struct RecordArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Any record file; only its vectors are used.
    #[arg(long)]
    pub hidden: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub tag: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainMapArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub records: Vec<PathBuf>,
    #[arg(long)]
    pub r: usize,
    #[arg(long, default_value_t = clustervocab::kmeans::DEFAULT_ITERS)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep records whose tag ends in this target code.
    #[arg(long)]
    pub target: Option<String>,
    /// Restrict to these source codes (requires --target).
    #[arg(long, value_delimiter = ',', requires = "target")]
    pub sources: Vec<String>,
    /// Truncate recorded top-K lists (default: keep the recorded K).
    #[arg(long)]
    pub k: Option<usize>,
    /// Vocabulary size; read from --weights when omitted.
    #[arg(long, required_unless_present = "weights")]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Reuse the centroids of this map instead of running kmeans.
    #[arg(long)]
    pub centroids_from: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long, required_unless_present = "exact")]
    pub map: Option<PathBuf>,
    #[arg(long)]
    pub hidden: PathBuf,
    #[arg(long)]
    pub out_csv: PathBuf,
    /// Run the exact baseline instead of the map.
    #[arg(long)]
    pub exact: bool,
    #[arg(long, default_value_t = 40)]
    pub batch: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    Greedy,
    Beam,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long, required_unless_present = "exact")]
    pub map: Option<PathBuf>,
    #[arg(long)]
    pub exact: bool,
    #[arg(long, value_enum, default_value_t = Mode::Greedy)]
    pub mode: Mode,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    #[arg(long)]
    pub steps: usize,
    /// constant, walk or mixture_cycle.
    #[arg(long, default_value = "constant")]
    pub source_kind: String,
    /// Vectors feeding the stub source.
    #[arg(long)]
    pub hidden: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub std: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of sequences to decode (default: one per hidden vector).
    #[arg(long)]
    pub inputs: Option<usize>,
    #[arg(long)]
    pub eos: Option<u32>,
    /// Optional CSV of `input,score,tokens`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Training records for a sweep.
    #[arg(long, num_args = 1.., required_unless_present = "map", conflicts_with = "map")]
    pub records: Vec<PathBuf>,
    /// Saved maps to evaluate instead of sweeping.
    #[arg(long, num_args = 1..)]
    pub map: Vec<PathBuf>,
    /// Held-out hidden vectors.
    #[arg(long)]
    pub eval: PathBuf,
    #[arg(long, value_delimiter = ',', num_args = 1.., required_unless_present = "map")]
    pub r_list: Vec<usize>,
    #[arg(long, value_delimiter = ',', num_args = 1.., required_unless_present = "map")]
    pub k_list: Vec<usize>,
    #[arg(long, value_delimiter = ',', num_args = 1.., default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = clustervocab::kmeans::DEFAULT_ITERS)]
    pub iters: usize,
    #[arg(long, default_value_t = 40)]
    pub batch: usize,
    /// Timing repeats per cell (at least 3); timing is skipped when omitted.
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
    #[arg(long)]
    pub raw_log: Option<PathBuf>,
    /// Per-cluster active percentages of every trained map.
    #[arg(long)]
    pub profile_csv: Option<PathBuf>,
}

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("CLUSTERVOCAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| format!("CLUSTERVOCAB_THREADS must be a non-negative integer, got {raw:?}"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let outcome = std::panic::catch_unwind(|| match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Record(a) => commands::record(a),
        Command::TrainMap(a) => commands::train_map(a),
        Command::Project(a) => commands::project(a),
        Command::Decode(a) => commands::decode(a),
        Command::Bench(a) => commands::bench(a),
    });
    match outcome {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(commands::Failure::Usage(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Ok(Err(commands::Failure::Data(e))) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(_) => ExitCode::from(4),
    }
}
