mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "mlab", version, about = "Compress, distill and evaluate a small learned MT metric")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled synthetic dataset (JSON lines).
    Datagen(DatagenArgs),
    /// Train the teacher-sized model on oracle labels.
    TrainTeacherMimic(TrainCmd),
    /// Distill a student from oracle labels.
    Distill(TrainCmd),
    /// Quantize a float model.
    Quantize(QuantizeArgs),
    /// Sparsify weights or drop tail layers, optionally followed by BitFit.
    Prune(PruneArgs),
    /// Kendall correlation of model scores with oracle labels.
    Evaluate(EvaluateArgs),
    /// Throughput, batch search and tracked peak memory.
    Bench(BenchArgs),
    /// Energy and carbon estimate for scoring a corpus.
    EstimateCost(CostArgs),
}

#[derive(Args, Debug)]
struct DatagenArgs {
    /// Number of language pairs, taken in the order de-en, ru-en, zh-en.
    #[arg(long, default_value_t = 3)]
    pairs: usize,
    /// Total labeled examples, split evenly over pairs.
    #[arg(long)]
    size: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    min_len: usize,
    #[arg(long, default_value_t = 24)]
    max_len: usize,
    /// Largest number of edits per hypothesis (the smallest is 0).
    #[arg(long, default_value_t = 6)]
    max_ops: usize,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Preset {
    /// Rates sized for a from-scratch desk model.
    Desk,
    /// Published distillation rates.
    Published,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum RefArg {
    With,
    Without,
    Mixed,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_encoder: Option<f64>,
    #[arg(long)]
    lr_head: Option<f64>,
    /// Weight of the tag loss.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    warmup: Option<f64>,
    #[arg(long, value_enum)]
    reference: Option<RefArg>,
    /// Threads for gradient computation; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Debug)]
struct TrainCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Per-step training log (JSON lines).
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum QuantMethod {
    Affine,
    Absmax8,
    Nf4,
    Gptq,
}

#[derive(Args, Debug)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    method: QuantMethod,
    #[arg(long, default_value_t = 8)]
    bits: u8,
    /// Labeled data whose inputs serve as calibration sequences.
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    calib_size: usize,
    #[arg(long, default_value_t = mlab_core::quantize::DEFAULT_GROUP)]
    group_size: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum PruneMethod {
    Magnitude,
    Wanda,
    Layers,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Finetune {
    Bitfit,
}

#[derive(Args, Debug)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    method: PruneMethod,
    /// `2:4`, `4:8`, `unstructured` or `unstructured:<fraction>`.
    #[arg(long, default_value = "2:4")]
    pattern: String,
    /// Layers to drop for `--method layers`.
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    calib_size: usize,
    #[arg(long, value_enum)]
    finetune: Option<Finetune>,
    /// Training data for fine-tuning.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the pruning report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModeArg {
    WithReference,
    ReferenceFree,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Model to evaluate; omit when only combining reports.
    #[arg(long, required_unless_present = "combine")]
    model: Option<PathBuf>,
    #[arg(long, required_unless_present = "combine")]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::WithReference)]
    mode: ModeArg,
    /// Seed that produced the model, recorded in the report.
    #[arg(long)]
    seed: Option<u64>,
    /// Uncompressed model to measure the degradation against.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Pruning report to embed.
    #[arg(long)]
    prune_report: Option<PathBuf>,
    /// Average existing per-seed reports instead of evaluating.
    #[arg(long, num_args = 1.., conflicts_with_all = ["model", "data", "baseline"])]
    combine: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Throughput batch; defaults to the batch found under the memory cap, else 8.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    memory_cap_mb: Option<u64>,
    #[arg(long, default_value_t = mlab_core::bench::DEFAULT_CEILING)]
    ceiling: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CostArgs {
    #[arg(long, default_value_t = mlab_core::bench::FOOTNOTE_EXAMPLES)]
    examples: f64,
    #[arg(long, default_value_t = mlab_core::bench::FOOTNOTE_SEC_PER_EXAMPLE)]
    sec_per_example: f64,
    #[arg(long, default_value_t = mlab_core::bench::FOOTNOTE_WATTS)]
    watts: f64,
    /// kg CO2 per kWh.
    #[arg(long, default_value_t = mlab_core::bench::FOOTNOTE_KG_PER_KWH)]
    carbon_intensity: f64,
    /// Also write the estimate here (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .format_timestamp(None)
        .init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
