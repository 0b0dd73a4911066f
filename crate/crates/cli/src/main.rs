//! `lla`: a single-binary workbench around the FFN locking pipeline.
//! Subcommands cover the whole artifact flow: synthesize a planted toy
//! model, lock it, run a model directory with a key, attack a locked
//! directory, simulate the locked layer on a systolic array, account FLOP
//! overhead, and compare two model runs.
//!
//! Every command reads an optional JSON config file (`--config`) and applies
//! explicit flags on top; flags win. `--seed` feeds every stochastic
//! component. Commands given `-o/--out` write their artifacts into that
//! directory together with a `manifest.json` recording the command, the
//! fully resolved config, inputs, outputs, tool version, and wall-clock
//! time; commands without `-o` only print.
//!
//! Exit codes: 0 on success, 2 on configuration errors (bad flags, bad
//! config file, inconsistent combinations, detectable before the pipeline
//! runs), 3 on runtime errors (missing or malformed artifacts, pipeline
//! failures).

mod commands;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "lla", version, about = "Lock, run, attack, and simulate FFN-locked toy models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Synthesize a toy transformer with planted activation outliers.
    Synth(SynthArgs),
    /// Plan and embed a lock; writes the locked directory and the key file.
    Lock(LockArgs),
    /// Run a model directory (plain, locked + key, or negation-locked + key).
    Run(RunArgs),
    /// Recover key material from a locked directory.
    Attack(AttackArgs),
    /// Simulate the locked layer on a systolic array and check the result.
    Simulate(SimulateArgs),
    /// Account the locking FLOP overhead for an FFN shape.
    Flops(FlopsArgs),
    /// Compare two model runs: JSD, perplexity, and key agreement.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Standard,
    Gated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ActivationArg {
    Relu,
    Silu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeArg {
    /// Group-local permutation behind a rotation (the full pipeline).
    Permutation,
    /// Per-neuron sign negation (the baseline scheme).
    Negation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    Genetic,
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GuidanceArg {
    OracleGuided,
    OracleLess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataflowArg {
    /// Weight-stationary.
    Ws,
    /// Output-stationary.
    Os,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathArg {
    /// Rotation applied by fast Walsh-Hadamard transform.
    Fwht,
    /// Rotation applied as a dense n x n multiply.
    Dense,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output model directory.
    #[arg(short = 'o', long)]
    pub out: PathBuf,
    /// JSON config file; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    /// Number of transformer blocks.
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    #[arg(long, value_enum)]
    pub activation: Option<ActivationArg>,
    /// Feature dimensions to plant outliers in (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub outlier_dims: Option<Vec<usize>>,
    /// Block whose outputs carry the planted outliers.
    #[arg(long)]
    pub outlier_block: Option<usize>,
    #[arg(long)]
    pub outlier_gain: Option<f64>,
    /// Neurons given oversized post-activation magnitudes (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub neuron_outliers: Option<Vec<usize>>,
    #[arg(long)]
    pub neuron_gain: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct LockArgs {
    /// Input model directory.
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory for the locked model.
    #[arg(short = 'o', long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Outlier threshold: a feature is an outlier above tau times the mean.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Number of protected neurons (a power of two).
    #[arg(long)]
    pub n: Option<usize>,
    /// Fabric group size (a power of two dividing n).
    #[arg(long)]
    pub m: Option<usize>,
    /// Force this block instead of the outlier-selected one.
    #[arg(long)]
    pub block: Option<usize>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// Ablation: skip the rotation (permutation scheme only).
    #[arg(long)]
    pub no_rotation: bool,
    /// Key file path; defaults to a sibling of the output directory. Must
    /// not point inside the locked directory.
    #[arg(long)]
    pub key_out: Option<PathBuf>,
    /// Probe sequences used for outlier detection and neuron scoring.
    #[arg(long)]
    pub probe_count: Option<usize>,
    #[arg(long)]
    pub probe_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct RunArgs {
    /// Model directory: plain, locked, or negation-locked.
    pub model: PathBuf,
    /// Key file (.llak); required for locked directories.
    #[arg(long)]
    pub key: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Token file: one sequence per line, space-separated ids. Generated
    /// from the seed when absent.
    #[arg(long)]
    pub tokens: Option<PathBuf>,
    #[arg(long)]
    pub probe_count: Option<usize>,
    #[arg(long)]
    pub probe_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for logits and metrics.
    #[arg(short = 'o', long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct AttackArgs {
    /// Locked (or negation-locked) model directory under attack.
    pub locked: PathBuf,
    /// Original model directory: the oracle for oracle-guided search and
    /// the reference for post-attack metrics. The oracle-less attack never
    /// queries it during search.
    #[arg(long)]
    pub oracle: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[arg(long, value_enum)]
    pub guidance: Option<GuidanceArg>,
    /// Generations (genetic) or optimizer steps (gradient).
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Wall-clock cap in seconds.
    #[arg(long)]
    pub time_limit: Option<f64>,
    /// Probe token file for oracle-guided fitness; generated when absent.
    #[arg(long)]
    pub probes: Option<PathBuf>,
    /// Corpus token file for oracle-less fitness; generated when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub probe_count: Option<usize>,
    #[arg(long)]
    pub probe_len: Option<usize>,
    #[arg(long)]
    pub corpus_count: Option<usize>,
    #[arg(long)]
    pub corpus_len: Option<usize>,
    /// True key file; enables fidelity reporting.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub population: Option<usize>,
    #[arg(long)]
    pub tournament: Option<usize>,
    #[arg(long)]
    pub mutation_rate: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for result.json.
    #[arg(short = 'o', long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Locked model directory (permutation scheme).
    pub locked: PathBuf,
    /// Key file (.llak) driving the fabric.
    #[arg(long)]
    pub key: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Systolic array height.
    #[arg(long)]
    pub rows: Option<usize>,
    /// Systolic array width; must be a multiple of the lock's group size.
    #[arg(long)]
    pub cols: Option<usize>,
    #[arg(long, value_enum)]
    pub dataflow: Option<DataflowArg>,
    /// Force this many accumulation rounds for the key-matrix phase.
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Token file providing the layer input; generated when absent.
    #[arg(long)]
    pub tokens: Option<PathBuf>,
    #[arg(long)]
    pub probe_count: Option<usize>,
    #[arg(long)]
    pub probe_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for the trace, summary, and simulated output.
    #[arg(short = 'o', long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct FlopsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model width d_model.
    #[arg(long)]
    pub dm: Option<usize>,
    /// FFN width d_ff.
    #[arg(long)]
    pub dff: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    /// Which rotation implementation the headline ratio uses.
    #[arg(long, value_enum)]
    pub path: Option<PathArg>,
    /// Output directory for report.json.
    #[arg(short = 'o', long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// First model directory.
    #[arg(long)]
    pub a: PathBuf,
    /// Second model directory.
    #[arg(long)]
    pub b: PathBuf,
    /// Key file for side a (required when a is locked).
    #[arg(long)]
    pub key_a: Option<PathBuf>,
    /// Key file for side b (required when b is locked).
    #[arg(long)]
    pub key_b: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Token file; generated from the seed when absent.
    #[arg(long)]
    pub tokens: Option<PathBuf>,
    #[arg(long)]
    pub probe_count: Option<usize>,
    #[arg(long)]
    pub probe_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for report.json.
    #[arg(short = 'o', long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();
    let outcome = match cli.command {
        Command::Synth(args) => commands::synth(args, started),
        Command::Lock(args) => commands::lock(args, started),
        Command::Run(args) => commands::run(args, started),
        Command::Attack(args) => commands::attack(args, started),
        Command::Simulate(args) => commands::simulate(args, started),
        Command::Flops(args) => commands::flops(args, started),
        Command::Eval(args) => commands::eval(args, started),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            use std::io::Write;
            let _ = writeln!(std::io::stderr(), "error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
