//! `spindle`: prepare corpora, train, sample, evaluate and verify.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use spindle_core::corpus::{InfoUnit, TokenizerKind};
use spindle_core::denoiser::TimeMode;
use spindle_core::Exec;

#[derive(Parser)]
#[command(
    name = "spindle",
    version,
    about = "Absorbing-state text diffusion with a per-token spindle noise schedule"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the vocabulary, surprisal table and corpus statistics.
    Prepare(PrepareArgs),
    /// Train a denoiser (optionally after masked-LM pretraining).
    Train(TrainArgs),
    /// Generate text from a checkpoint.
    Sample(SampleArgs),
    /// Likelihood bound, BLEU and self-BLEU for a checkpoint.
    Eval(EvalArgs),
    /// Run the oracle verification suite.
    Verify(VerifyArgs),
    /// Print retention curves for the tokens of a sentence as CSV.
    Schedule(ScheduleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
pub enum TokenizerArg {
    Word,
    Char,
}

impl From<TokenizerArg> for TokenizerKind {
    fn from(a: TokenizerArg) -> Self {
        match a {
            TokenizerArg::Word => TokenizerKind::Word,
            TokenizerArg::Char => TokenizerKind::Char,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum UnitArg {
    Nats,
    Bits,
}

impl From<UnitArg> for InfoUnit {
    fn from(a: UnitArg) -> Self {
        match a {
            UnitArg::Nats => InfoUnit::Nats,
            UnitArg::Bits => InfoUnit::Bits,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum TimeModeArg {
    Lte,
    Pte,
    Tad,
}

impl From<TimeModeArg> for TimeMode {
    fn from(a: TimeModeArg) -> Self {
        match a {
            TimeModeArg::Lte => TimeMode::Lte,
            TimeModeArg::Pte => TimeMode::Pte,
            TimeModeArg::Tad => TimeMode::Tad,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ExecArg {
    Sequential,
    Parallel,
}

impl From<ExecArg> for Exec {
    fn from(a: ExecArg) -> Self {
        match a {
            ExecArg::Sequential => Exec::Sequential,
            ExecArg::Parallel => Exec::Parallel,
        }
    }
}

#[derive(Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 8192)]
    pub vocab_size: usize,
    #[arg(long, value_enum, default_value = "word")]
    pub tokenizer: TokenizerArg,
    /// Pseudo-count added to every content token before computing surprisal.
    #[arg(long, default_value_t = 1.0)]
    pub smoothing: f64,
    #[arg(long, value_enum, default_value = "nats")]
    pub unit: UnitArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output directory of `prepare`.
    #[arg(long)]
    pub prepared: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub time_mode: Option<TimeModeArg>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Number of diffusion steps.
    #[arg(long = "T")]
    pub steps_t: Option<usize>,
    #[arg(long)]
    pub mlm_pretrain_steps: Option<u64>,
    /// Diffusion training steps.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub n_max: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub log_every: Option<u64>,
    #[arg(long, value_enum)]
    pub exec: Option<ExecArg>,
    /// Continue from the latest checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args)]
pub struct GenerationArgs {
    #[arg(long)]
    pub length: Option<usize>,
    /// Reverse iterations; must divide T.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Re-predict revealed positions every iteration.
    #[arg(long)]
    pub remask: bool,
    #[arg(long, value_enum)]
    pub exec: Option<ExecArg>,
}

#[derive(Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub num: usize,
    #[command(flatten)]
    pub gen: GenerationArgs,
    /// Write per-iteration states as JSON lines.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    /// Samples file (one sentence per line).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Samples for BLEU; the same number again is drawn for self-BLEU.
    #[arg(long, default_value_t = 100)]
    pub num_gen: usize,
    #[arg(long, default_value_t = 4)]
    pub t_samples: usize,
    #[command(flatten)]
    pub gen: GenerationArgs,
    /// Write a `k,temperature,bleu4,self_bleu4` CSV over the sweep grid.
    #[arg(long)]
    pub sweep: Option<PathBuf>,
    /// Sweep grid as `k:temperature` pairs.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "1:1,2:1,3:1,5:1,10:1,30:0.7,30:1,30:1.3,30:1.7,30:2.2"
    )]
    pub grid: Vec<String>,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "parallel")]
    pub exec: ExecArg,
}

#[derive(Args)]
pub struct ScheduleArgs {
    /// Output directory of `prepare`.
    #[arg(long, conflicts_with = "checkpoint")]
    pub prepared: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub text: String,
    #[arg(long = "T")]
    pub steps_t: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Prepare(a) => commands::prepare(a),
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Eval(a) => commands::eval(a),
        Command::Verify(a) => commands::verify(a),
        Command::Schedule(a) => commands::schedule(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
