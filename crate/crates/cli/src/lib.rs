//! The `lcmt` command line: synthesize data, extract constraints, train,
//! decode, evaluate and sweep the memory block position.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use lcmt_core::decode::DecodeMode;

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use config::{RunConfig, SweepConfig, TrainConfig, TrainMode};
pub use error::{CliError, Result, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};

pub const THREADS_ENV: &str = "LCMT_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "lcmt",
    version,
    about = "Lexically-constrained translation with a constraint memory"
)]
pub struct Cli {
    /// Worker threads for decoding [default: $LCMT_THREADS, else logical cores].
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic homograph corpus.
    Synth(SynthArgs),
    /// Extract phrase-pair constraints from aligned, parsed sentences.
    Extract(ExtractArgs),
    /// Train a base or memory-augmented model.
    Train(TrainArgs),
    /// Translate a corpus with base, dba or lcnmt decoding.
    Decode(DecodeArgs),
    /// Score decoding results.
    Eval(EvalArgs),
    /// Train and score one model per memory block position.
    SweepBlocks(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training sentences; dev and test default to 1/25 and 1/10 of it.
    #[arg(long)]
    pub sentences: Option<usize>,
    #[arg(long)]
    pub dev: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub homographs: Option<usize>,
    /// Source content words, homographs included.
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_phrase_len: Option<usize>,
    #[arg(long)]
    pub min_phrase_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training corpus (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub mode: Option<TrainMode>,
    #[arg(long)]
    pub memory_block: Option<usize>,
    #[arg(long)]
    pub lambda_att: Option<f64>,
    #[arg(long)]
    pub n_blocks: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub mode: Option<DecodeMode>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Fraction of the corpus's constraints given to the decoder.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Seed of the constraint sample.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Results files from `decode`; repeat to compare methods and ratios.
    #[arg(long, required = true, num_args = 1..)]
    pub hyp: Vec<PathBuf>,
    /// Reference corpus (JSONL).
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Corpus whose constraints are scored instead of the ones each
    /// results line was given.
    #[arg(long)]
    pub constraints: Option<PathBuf>,
    /// Homograph table written by `synth`, for homograph accuracy.
    #[arg(long)]
    pub homographs: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding train.jsonl and test.jsonl, as written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Block positions, `1..6` or `1,2,4`.
    #[arg(long)]
    pub blocks: Option<config::BlockList>,
    #[arg(long)]
    pub n_blocks: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Train plain models in every row.
    #[arg(long)]
    pub no_memory: bool,
}

/// Result of a command: text for stdout and the warnings raised on the way
/// (already logged).
#[derive(Debug, Default)]
pub struct Outcome {
    pub stdout: String,
    pub warnings: Vec<String>,
}

impl Outcome {
    pub fn warn(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        log::warn!("{msg}");
        self.warnings.push(msg);
    }
}

/// Worker thread count from the flag, else from the environment value.
/// `None` means one per logical core.
pub fn resolve_threads(flag: Option<usize>, env: Option<&str>) -> Result<Option<usize>> {
    let threads = match (flag, env) {
        (Some(n), _) => Some(n),
        (None, Some(v)) => Some(
            v.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
        ),
        (None, None) => None,
    };
    if threads == Some(0) {
        return Err(CliError::Usage("thread count must be positive".into()));
    }
    Ok(threads)
}

/// Runs a parsed command inside a worker pool of the requested size.
pub fn run(cli: &Cli) -> Result<Outcome> {
    let env = std::env::var(THREADS_ENV).ok();
    let threads = resolve_threads(cli.threads, env.as_deref())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {threads:?} worker threads: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Extract(a) => commands::extract(a),
        Command::Train(a) => commands::train(a),
        Command::Decode(a) => commands::decode(a),
        Command::Eval(a) => commands::eval(a),
        Command::SweepBlocks(a) => commands::sweep_blocks(a),
    })
}

/// Parses `args`, runs the command, prints its output and returns the exit
/// code.
pub fn main_with<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(out) => {
            print!("{}", out.stdout);
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
