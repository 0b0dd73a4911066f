//! Command implementations: resolve config (file, then flag overrides),
//! run the pipeline, write artifacts plus a manifest, print a short report.

use crate::{
    ActivationArg, AttackArgs, DataflowArg, EvalArgs, FlopsArgs, GuidanceArg, KindArg, LockArgs,
    MethodArg, PathArg, RunArgs, SchemeArg, SimulateArgs, SynthArgs,
};
use lla_core::attack::{
    cross_entropy_on, fidelity as perm_fidelity, genetic_attack, gradient_attack,
    hpnn_gradient_attack, mean_jsd_on, read_token_file, AttackConfig, AttackResult, Guidance,
};
use lla_core::fabric::{load_key, save_key, KeyBits};
use lla_core::hwsim::{locked_layer_sim, software_reference, Dataflow, SystolicConfig};
use lla_core::linalg::DenseMatrix;
use lla_core::locker::{
    flop_overhead_report, hpnn_lock_model, load_hpnn_model, load_locked_model, lock_model_with,
    plan_lock, save_hpnn_model, save_locked_model, HpnnModel, LockedModel, PlanOptions,
    HPNN_FORMAT, LOCKED_FORMAT,
};
use lla_core::model::{
    load_model, manifest_format, probe_tokens, save_model, save_tensor, synth_model, Activation,
    FfnKind, SynthConfig, ToyModel, MODEL_FORMAT,
};
use lla_core::rng::{derive_seed, streams, Seed, SplitMix64};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

// ---------------------------------------------------------------------------
// Errors and exit codes.

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config file, or an inconsistent combination: exit 2.
    Config(String),
    /// The pipeline itself failed (missing or malformed artifacts, core
    /// errors): exit 3.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) | CliError::Runtime(msg) => write!(f, "{msg}"),
        }
    }
}

impl From<lla_core::Error> for CliError {
    fn from(e: lla_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

// ---------------------------------------------------------------------------
// Config files, manifests, small IO helpers.

fn load_settings<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| {
                config_err(format!("cannot read config {}: {e}", p.display()))
            })?;
            serde_json::from_str(&text)
                .map_err(|e| config_err(format!("config {}: {e}", p.display())))
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("cannot serialize {}: {e}", path.display())))?;
    fs::write(path, text + "\n")
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

#[derive(Serialize)]
struct RunManifest<C: Serialize> {
    command: &'static str,
    tool_version: &'static str,
    seed: Option<u64>,
    config: C,
    inputs: Vec<String>,
    outputs: Vec<String>,
    wall_clock_seconds: f64,
}

/// Drop `manifest.json` next to the artifacts. The wall-clock field makes
/// the manifest itself a log, not a byte-comparable artifact.
fn write_manifest<C: Serialize>(
    dir: &Path,
    command: &'static str,
    seed: Option<u64>,
    config: &C,
    inputs: &[&Path],
    outputs: &[PathBuf],
    started: Instant,
) -> CliResult<()> {
    let manifest = RunManifest {
        command,
        tool_version: env!("CARGO_PKG_VERSION"),
        seed,
        config,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

/// Tokens from a file when given, otherwise `count` sequences of `len`
/// drawn from the seed's stream.
fn tokens_or_probes(
    file: Option<&Path>,
    vocab: usize,
    count: usize,
    len: usize,
    seed: Seed,
    stream: u64,
) -> CliResult<Vec<Vec<u32>>> {
    match file {
        Some(p) => Ok(read_token_file(p)?),
        None => {
            if count == 0 || len < 2 {
                return Err(config_err(
                    "probe generation needs a positive count and length of at least 2",
                ));
            }
            Ok(probe_tokens(vocab, count, len, derive_seed(seed, stream)))
        }
    }
}

fn is_power_of_two(x: usize) -> bool {
    x != 0 && x & (x - 1) == 0
}

/// Perplexities of untrained synthetic models can be astronomically large;
/// switch to scientific notation instead of printing a wall of digits.
fn fmt_ppl(p: f64) -> String {
    if p.is_finite() && p < 1e6 {
        format!("{p:.4}")
    } else {
        format!("{p:.4e}")
    }
}

/// Print one report line; when the consumer closed the pipe (`lla ... |
/// head`), stop quietly instead of panicking.
fn emit(line: String) {
    use std::io::Write;
    if writeln!(std::io::stdout(), "{line}").is_err() {
        std::process::exit(0);
    }
}

macro_rules! say {
    ($($arg:tt)*) => { emit(format!($($arg)*)) };
}

// ---------------------------------------------------------------------------
// synth

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynthSettings {
    vocab: usize,
    d_model: usize,
    d_ff: usize,
    blocks: usize,
    kind: FfnKind,
    activation: Activation,
    outlier_dims: Vec<usize>,
    outlier_block: usize,
    outlier_gain: f64,
    neuron_outliers: Vec<usize>,
    neuron_gain: f64,
    seed: u64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            vocab: 48,
            d_model: 24,
            d_ff: 96,
            blocks: 2,
            kind: FfnKind::Standard,
            activation: Activation::Relu,
            outlier_dims: vec![3, 11],
            outlier_block: 0,
            outlier_gain: 30.0,
            neuron_outliers: Vec::new(),
            neuron_gain: 1.0,
            seed: 7,
        }
    }
}

pub fn synth(args: SynthArgs, started: Instant) -> CliResult<()> {
    let mut s: SynthSettings = load_settings(args.config.as_deref())?;
    if let Some(v) = args.vocab {
        s.vocab = v;
    }
    if let Some(v) = args.d_model {
        s.d_model = v;
    }
    if let Some(v) = args.d_ff {
        s.d_ff = v;
    }
    if let Some(v) = args.blocks {
        s.blocks = v;
    }
    if let Some(v) = args.kind {
        s.kind = kind_of(v);
    }
    if let Some(v) = args.activation {
        s.activation = activation_of(v);
    }
    if let Some(v) = args.outlier_dims {
        s.outlier_dims = v;
    }
    if let Some(v) = args.outlier_block {
        s.outlier_block = v;
    }
    if let Some(v) = args.outlier_gain {
        s.outlier_gain = v;
    }
    if let Some(v) = args.neuron_outliers {
        s.neuron_outliers = v;
    }
    if let Some(v) = args.neuron_gain {
        s.neuron_gain = v;
    }
    if let Some(v) = args.seed {
        s.seed = v;
    }

    let cfg = SynthConfig {
        vocab: s.vocab,
        d_model: s.d_model,
        d_ff: s.d_ff,
        n_blocks: s.blocks,
        kind: s.kind,
        activation: s.activation,
        outlier_dims: s.outlier_dims.clone(),
        outlier_block: s.outlier_block,
        outlier_gain: s.outlier_gain,
        neuron_outliers: s.neuron_outliers.clone(),
        neuron_gain: s.neuron_gain,
    };
    let model: ToyModel<f32> = synth_model(&cfg, Seed(s.seed))?;
    save_model(&args.out, &model)?;

    say!(
        "model: vocab {}, d_model {}, d_ff {}, {} blocks ({}, {})",
        s.vocab,
        s.d_model,
        s.d_ff,
        s.blocks,
        kind_label(s.kind),
        activation_label(s.activation)
    );
    if !s.outlier_dims.is_empty() && s.outlier_gain != 1.0 {
        say!(
            "planted feature outliers {:?} in block {} at gain {}",
            s.outlier_dims, s.outlier_block, s.outlier_gain
        );
    }
    if !s.neuron_outliers.is_empty() && s.neuron_gain != 1.0 {
        say!("boosted neurons {:?} at gain {}", s.neuron_outliers, s.neuron_gain);
    }
    say!("wrote {}", args.out.display());
    write_manifest(&args.out, "synth", Some(s.seed), &s, &[], &[args.out.clone()], started)
}

fn kind_of(k: KindArg) -> FfnKind {
    match k {
        KindArg::Standard => FfnKind::Standard,
        KindArg::Gated => FfnKind::Gated,
    }
}

fn kind_label(k: FfnKind) -> &'static str {
    match k {
        FfnKind::Standard => "standard",
        FfnKind::Gated => "gated",
    }
}

fn activation_of(a: ActivationArg) -> Activation {
    match a {
        ActivationArg::Relu => Activation::Relu,
        ActivationArg::Silu => Activation::Silu,
    }
}

fn activation_label(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Silu => "silu",
    }
}

// ---------------------------------------------------------------------------
// lock

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LockSettings {
    tau: f64,
    n: usize,
    m: usize,
    block: Option<usize>,
    scheme: SchemeArg,
    rotation: bool,
    probe_count: usize,
    probe_len: usize,
    seed: u64,
}

impl Default for LockSettings {
    fn default() -> Self {
        LockSettings {
            tau: 5.0,
            n: 64,
            m: 16,
            block: None,
            scheme: SchemeArg::Permutation,
            rotation: true,
            probe_count: 8,
            probe_len: 16,
            seed: 7,
        }
    }
}

pub fn lock(args: LockArgs, started: Instant) -> CliResult<()> {
    let mut s: LockSettings = load_settings(args.config.as_deref())?;
    if let Some(v) = args.tau {
        s.tau = v;
    }
    if let Some(v) = args.n {
        s.n = v;
    }
    if let Some(v) = args.m {
        s.m = v;
    }
    if let Some(v) = args.block {
        s.block = Some(v);
    }
    if let Some(v) = args.scheme {
        s.scheme = v;
    }
    if args.no_rotation {
        s.rotation = false;
    }
    if let Some(v) = args.probe_count {
        s.probe_count = v;
    }
    if let Some(v) = args.probe_len {
        s.probe_len = v;
    }
    if let Some(v) = args.seed {
        s.seed = v;
    }

    if !is_power_of_two(s.n) {
        return Err(config_err(format!("--n {} must be a power of two", s.n)));
    }
    if s.scheme == SchemeArg::Permutation && (!is_power_of_two(s.m) || s.n % s.m != 0) {
        return Err(config_err(format!(
            "--m {} must be a power of two dividing --n {}",
            s.m, s.n
        )));
    }
    if !(s.tau > 1.0) {
        return Err(config_err(format!("--tau {} must exceed 1", s.tau)));
    }
    if s.probe_count == 0 || s.probe_len == 0 {
        return Err(config_err("probe count and length must be positive"));
    }

    // The key must never land inside the locked directory; default to a
    // sibling file named after it.
    let key_out = match args.key_out {
        Some(p) => p,
        None => {
            let stem = args.out.file_name().ok_or_else(|| {
                config_err("cannot derive a key path from the output directory; pass --key-out")
            })?;
            let mut name = stem.to_os_string();
            name.push(".llak");
            args.out.with_file_name(name)
        }
    };
    if key_out.starts_with(&args.out) {
        return Err(config_err(format!(
            "--key-out {} lies inside the locked directory {}",
            key_out.display(),
            args.out.display()
        )));
    }

    let model: ToyModel<f32> = load_model(&args.model)?;
    let probes = probe_tokens(
        model.vocab,
        s.probe_count,
        s.probe_len,
        derive_seed(Seed(s.seed), streams::PROBES),
    );

    let mut outputs = vec![args.out.clone(), key_out.clone()];
    match s.scheme {
        SchemeArg::Permutation => {
            let opts = PlanOptions {
                tau: s.tau,
                n: s.n,
                m: s.m,
                force_block: s.block,
                seed: Seed(s.seed),
            };
            let plan = plan_lock(&model, &probes, &opts)?;
            let (locked, key) = lock_model_with(&model, &plan.spec, s.rotation)?;
            save_locked_model(&args.out, &locked)?;
            save_key(&key_out, &key.key_bits())?;
            let mut line = format!(
                "protected block {}: {} neurons in groups of {} (tau {})",
                plan.spec.protected_block, s.n, s.m, opts.tau
            );
            if plan.tau_lowered {
                line.push_str(&format!(" [lowered to {:.4}]", plan.effective_tau));
            }
            emit(line);
            if !s.rotation {
                say!("rotation disabled");
            }
            say!(
                "key: {} bits ({} per protected neuron) -> {}",
                key.total_bits(),
                key.bits_per_lane(),
                key_out.display()
            );
        }
        SchemeArg::Negation => {
            // Reuse the planner for block and neuron selection; the group
            // size is meaningless here, so plan with singleton groups.
            let opts = PlanOptions {
                tau: s.tau,
                n: s.n,
                m: 1,
                force_block: s.block,
                seed: Seed(s.seed),
            };
            let plan = plan_lock(&model, &probes, &opts)?;
            let neurons = plan.spec.protected_neurons.clone();
            let mut rng = SplitMix64::new(derive_seed(Seed(s.seed), streams::KEY_PERM));
            let bits: Vec<bool> = (0..neurons.len()).map(|_| rng.next_u64() & 1 == 1).collect();
            let hpnn = hpnn_lock_model(&model, plan.spec.protected_block, &neurons, &bits)?;
            save_hpnn_model(&args.out, &hpnn)?;
            save_key(&key_out, &KeyBits { n: neurons.len(), m: 0, bits })?;
            let mut line = format!(
                "protected block {}: {} neurons, negation scheme (tau {})",
                plan.spec.protected_block, s.n, opts.tau
            );
            if plan.tau_lowered {
                line.push_str(&format!(" [lowered to {:.4}]", plan.effective_tau));
            }
            emit(line);
            say!(
                "key: {} bits (1 per protected neuron) -> {}",
                neurons.len(),
                key_out.display()
            );
        }
    }
    say!("wrote {}", args.out.display());
    outputs.sort();
    write_manifest(
        &args.out,
        "lock",
        Some(s.seed),
        &s,
        &[args.model.as_path()],
        &outputs,
        started,
    )
}

// ---------------------------------------------------------------------------
// run

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunSettings {
    probe_count: usize,
    probe_len: usize,
    seed: u64,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings { probe_count: 8, probe_len: 16, seed: 7 }
    }
}

#[derive(Serialize)]
struct RunMetrics {
    sequences: usize,
    positions: usize,
    cross_entropy: f64,
    perplexity: f64,
}

/// A loaded model directory with whatever key material its kind requires.
enum Runner {
    Plain(ToyModel<f64>),
    Locked(LockedModel<f64>, KeyBits),
    Negation(HpnnModel<f64>, Vec<bool>),
}

impl Runner {
    fn vocab(&self) -> usize {
        match self {
            Runner::Plain(m) => m.vocab,
            Runner::Locked(m, _) => m.base.vocab,
            Runner::Negation(m, _) => m.base.vocab,
        }
    }

    fn label(&self) -> String {
        match self {
            Runner::Plain(_) => "plain".into(),
            Runner::Locked(_, key) => format!("locked, key {} bits", key.bits.len()),
            Runner::Negation(_, bits) => format!("negation-locked, key {} bits", bits.len()),
        }
    }

    fn logits(&self, tokens: &[u32]) -> lla_core::Result<DenseMatrix<f64>> {
        match self {
            Runner::Plain(m) => m.logits(tokens),
            Runner::Locked(m, key) => m.forward_with_key(tokens, key),
            Runner::Negation(m, bits) => m.forward_with_bits(tokens, bits),
        }
    }
}

fn dir_format(dir: &Path) -> CliResult<String> {
    manifest_format(dir).map_err(|e| {
        CliError::Runtime(format!("cannot read model directory {}: {e}", dir.display()))
    })
}

/// Open a model directory of any kind, enforcing its key requirement. The
/// format probe is metadata-only, so a missing key is still a flag error.
fn open_runner(dir: &Path, key: Option<&Path>) -> CliResult<Runner> {
    let format = dir_format(dir)?;
    match format.as_str() {
        MODEL_FORMAT => {
            if key.is_some() {
                return Err(config_err(format!(
                    "{} holds a plain model; it takes no --key",
                    dir.display()
                )));
            }
            Ok(Runner::Plain(load_model(dir)?.cast()))
        }
        LOCKED_FORMAT => {
            let key = key.ok_or_else(|| {
                config_err(format!("{} is a locked model; pass --key", dir.display()))
            })?;
            let bits = load_key(key)?;
            if bits.m == 0 {
                return Err(config_err(format!(
                    "{} carries a negation key; this directory needs a fabric key",
                    key.display()
                )));
            }
            Ok(Runner::Locked(load_locked_model(dir)?.cast(), bits))
        }
        HPNN_FORMAT => {
            let key = key.ok_or_else(|| {
                config_err(format!("{} is a negation-locked model; pass --key", dir.display()))
            })?;
            let bits = load_key(key)?;
            if bits.m != 0 {
                return Err(config_err(format!(
                    "{} carries a fabric key; this directory needs a negation key",
                    key.display()
                )));
            }
            Ok(Runner::Negation(load_hpnn_model(dir)?.cast(), bits.bits))
        }
        other => Err(CliError::Runtime(format!(
            "{} holds an unsupported artifact kind {other:?}",
            dir.display()
        ))),
    }
}

pub fn run(args: RunArgs, started: Instant) -> CliResult<()> {
    let mut s: RunSettings = load_settings(args.config.as_deref())?;
    if let Some(v) = args.probe_count {
        s.probe_count = v;
    }
    if let Some(v) = args.probe_len {
        s.probe_len = v;
    }
    if let Some(v) = args.seed {
        s.seed = v;
    }

    let runner = open_runner(&args.model, args.key.as_deref())?;
    let seqs = tokens_or_probes(
        args.tokens.as_deref(),
        runner.vocab(),
        s.probe_count,
        s.probe_len,
        Seed(s.seed),
        streams::PROBES,
    )?;

    let ce = cross_entropy_on(|t| runner.logits(t), &seqs)?;
    let positions: usize = seqs.iter().map(|t| t.len() - 1).sum();
    let metrics = RunMetrics {
        sequences: seqs.len(),
        positions,
        cross_entropy: ce,
        perplexity: ce.exp(),
    };

    say!("model {} ({})", args.model.display(), runner.label());
    say!("sequences {}, predicted positions {}", metrics.sequences, metrics.positions);
    say!(
        "cross-entropy {:.4} nats, perplexity {}",
        metrics.cross_entropy,
        fmt_ppl(metrics.perplexity)
    );

    if let Some(out) = args.out {
        ensure_dir(&out)?;
        let mut outputs = Vec::new();
        for (i, seq) in seqs.iter().enumerate() {
            let logits = runner.logits(seq)?;
            let logits32 =
                DenseMatrix::from_fn(logits.rows(), logits.cols(), |r, c| logits.get(r, c) as f32);
            let path = out.join(format!("logits_{i:03}.llat"));
            save_tensor(&path, &logits32)?;
            outputs.push(path);
        }
        let metrics_path = out.join("metrics.json");
        write_json(&metrics_path, &metrics)?;
        outputs.push(metrics_path);
        say!("wrote {}", out.display());
        let mut inputs: Vec<&Path> = vec![args.model.as_path()];
        if let Some(k) = args.key.as_deref() {
            inputs.push(k);
        }
        if let Some(t) = args.tokens.as_deref() {
            inputs.push(t);
        }
        write_manifest(&out, "run", Some(s.seed), &s, &inputs, &outputs, started)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// attack

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AttackSettings {
    method: MethodArg,
    guidance: Guidance,
    /// None picks a per-method default: 200 genetic generations, 2000
    /// optimizer steps for the gradient attacks.
    iterations: Option<u64>,
    time_limit: f64,
    probe_count: usize,
    probe_len: usize,
    corpus_count: usize,
    corpus_len: usize,
    population: usize,
    tournament: usize,
    mutation_rate: f64,
    learning_rate: f64,
    seed: u64,
}

impl Default for AttackSettings {
    fn default() -> Self {
        AttackSettings {
            method: MethodArg::Genetic,
            guidance: Guidance::OracleGuided,
            iterations: None,
            time_limit: 7200.0,
            probe_count: 8,
            probe_len: 16,
            corpus_count: 8,
            corpus_len: 16,
            population: 64,
            tournament: 4,
            mutation_rate: 1.0,
            learning_rate: 0.03,
            seed: 7,
        }
    }
}

enum Target {
    Locked(LockedModel<f64>),
    Negation(HpnnModel<f64>),
}

pub fn attack(args: AttackArgs, started: Instant) -> CliResult<()> {
    let mut s: AttackSettings = load_settings(args.config.as_deref())?;
    if let Some(v) = args.method {
        s.method = v;
    }
    if let Some(v) = args.guidance {
        s.guidance = match v {
            GuidanceArg::OracleGuided => Guidance::OracleGuided,
            GuidanceArg::OracleLess => Guidance::OracleLess,
        };
    }
    if let Some(v) = args.iterations {
        s.iterations = Some(v);
    }
    if let Some(v) = args.time_limit {
        s.time_limit = v;
    }
    if let Some(v) = args.probe_count {
        s.probe_count = v;
    }
    if let Some(v) = args.probe_len {
        s.probe_len = v;
    }
    if let Some(v) = args.corpus_count {
        s.corpus_count = v;
    }
    if let Some(v) = args.corpus_len {
        s.corpus_len = v;
    }
    if let Some(v) = args.population {
        s.population = v;
    }
    if let Some(v) = args.tournament {
        s.tournament = v;
    }
    if let Some(v) = args.mutation_rate {
        s.mutation_rate = v;
    }
    if let Some(v) = args.learning_rate {
        s.learning_rate = v;
    }
    if let Some(v) = args.seed {
        s.seed = v;
    }

    let target = match dir_format(&args.locked)?.as_str() {
        LOCKED_FORMAT => Target::Locked(load_locked_model(&args.locked)?.cast()),
        HPNN_FORMAT => {
            if s.method == MethodArg::Genetic && args.method.is_some() {
                return Err(config_err(
                    "negation-locked directories support only the gradient attack",
                ));
            }
            Target::Negation(load_hpnn_model(&args.locked)?.cast())
        }
        other => {
            return Err(config_err(format!(
                "{} holds a {other} artifact; attack needs a locked directory",
                args.locked.display()
            )))
        }
    };
    let oracle: ToyModel<f64> = load_model(&args.oracle)?.cast();

    let mut cfg = AttackConfig::new(Seed(s.seed));
    cfg.guidance = s.guidance;
    cfg.time_limit = Some(s.time_limit);
    cfg.population = s.population;
    cfg.tournament = s.tournament;
    cfg.mutation_rate = s.mutation_rate;
    cfg.learning_rate = s.learning_rate;
    cfg.probes = tokens_or_probes(
        args.probes.as_deref(),
        oracle.vocab,
        s.probe_count,
        s.probe_len,
        Seed(s.seed),
        streams::PROBES,
    )?;
    cfg.corpus = tokens_or_probes(
        args.corpus.as_deref(),
        oracle.vocab,
        s.corpus_count,
        s.corpus_len,
        Seed(s.seed),
        streams::CORPUS,
    )?;

    // Truth key, when provided, must match the target's scheme.
    let mut truth_perm: Option<Vec<usize>> = None;
    let mut truth_bits: Option<Vec<bool>> = None;
    if let Some(path) = args.truth.as_deref() {
        let key = load_key(path)?;
        match (&target, key.m) {
            (Target::Locked(_), 0) => {
                return Err(config_err(format!(
                    "{} is a negation key; the target is permutation-locked",
                    path.display()
                )))
            }
            (Target::Negation(_), m) if m != 0 => {
                return Err(config_err(format!(
                    "{} is a fabric key; the target is negation-locked",
                    path.display()
                )))
            }
            (Target::Locked(_), _) => truth_perm = Some(key.permutation()?),
            (Target::Negation(_), _) => truth_bits = Some(key.bits),
        }
    }

    let (method_label, result) = match (&target, s.method) {
        (Target::Locked(locked), MethodArg::Genetic) => {
            cfg.iterations = s.iterations.unwrap_or(200);
            ("genetic", genetic_attack(locked, &oracle, &cfg, truth_perm.as_deref())?)
        }
        (Target::Locked(locked), MethodArg::Gradient) => {
            cfg.iterations = s.iterations.unwrap_or(2000);
            ("gradient", gradient_attack(locked, &oracle, &cfg, truth_perm.as_deref())?)
        }
        (Target::Negation(hpnn), _) => {
            cfg.iterations = s.iterations.unwrap_or(2000);
            ("negation-gradient", hpnn_gradient_attack(hpnn, &oracle, &cfg, truth_bits.as_deref())?)
        }
    };

    let guidance_label = match s.guidance {
        Guidance::OracleGuided => "oracle-guided",
        Guidance::OracleLess => "oracle-less",
    };
    say!(
        "method {} ({}), {} iterations in {:.2}s",
        method_label, guidance_label, result.iterations, result.elapsed_seconds
    );
    say!("final loss {:.6e}", result.final_loss);
    if let Some(f) = result.fidelity {
        let mut line = format!("fidelity {:.4} (random baseline {:.4})", f, result.random_baseline);
        if let Some(r) = result.repaired_fidelity {
            line.push_str(&format!(", repaired {r:.4}"));
        }
        emit(line);
    }
    if let Some(j) = result.post_jsd {
        say!("post-attack jsd {j:.6e}");
    }
    if let Some(p) = result.post_perplexity {
        say!("post-attack perplexity {}", fmt_ppl(p));
    }

    if let Some(out) = args.out {
        ensure_dir(&out)?;
        // Zero the timing in the stored artifact so identical reruns stay
        // byte-identical; the manifest carries the real wall clock.
        let stored = AttackResult { elapsed_seconds: 0.0, ..result };
        let result_path = out.join("result.json");
        write_json(&result_path, &stored)?;
        say!("wrote {}", result_path.display());
        let mut inputs: Vec<&Path> = vec![args.locked.as_path(), args.oracle.as_path()];
        for p in [args.probes.as_deref(), args.corpus.as_deref(), args.truth.as_deref()] {
            if let Some(p) = p {
                inputs.push(p);
            }
        }
        write_manifest(&out, "attack", Some(s.seed), &s, &inputs, &[result_path], started)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SimulateSettings {
    rows: usize,
    cols: usize,
    dataflow: DataflowArg,
    rounds: Option<usize>,
    probe_count: usize,
    probe_len: usize,
    seed: u64,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        SimulateSettings {
            rows: 8,
            cols: 16,
            dataflow: DataflowArg::Ws,
            rounds: None,
            probe_count: 2,
            probe_len: 8,
            seed: 7,
        }
    }
}

pub fn simulate(args: SimulateArgs, started: Instant) -> CliResult<()> {
    let mut s: SimulateSettings = load_settings(args.config.as_deref())?;
    if let Some(v) = args.rows {
        s.rows = v;
    }
    if let Some(v) = args.cols {
        s.cols = v;
    }
    if let Some(v) = args.dataflow {
        s.dataflow = v;
    }
    if let Some(v) = args.rounds {
        s.rounds = Some(v);
    }
    if let Some(v) = args.probe_count {
        s.probe_count = v;
    }
    if let Some(v) = args.probe_len {
        s.probe_len = v;
    }
    if let Some(v) = args.seed {
        s.seed = v;
    }

    match dir_format(&args.locked)?.as_str() {
        LOCKED_FORMAT => {}
        other => {
            return Err(config_err(format!(
                "{} holds a {other} artifact; the array simulates permutation locks",
                args.locked.display()
            )))
        }
    }
    let locked = load_locked_model(&args.locked)?;
    if s.cols % locked.m != 0 {
        return Err(config_err(format!(
            "--cols {} must be a multiple of the lock's group size {}",
            s.cols, locked.m
        )));
    }
    let cfg = SystolicConfig {
        rows: s.rows,
        cols: s.cols,
        dataflow: match s.dataflow {
            DataflowArg::Ws => Dataflow::WeightStationary,
            DataflowArg::Os => Dataflow::OutputStationary,
        },
        m: locked.m,
    };
    cfg.validate().map_err(|e| config_err(e.to_string()))?;

    let bits = load_key(&args.key)?;
    let seqs = tokens_or_probes(
        args.tokens.as_deref(),
        locked.base.vocab,
        s.probe_count,
        s.probe_len,
        Seed(s.seed),
        streams::PROBES,
    )?;

    // The array sees the protected block's FFN input: stack it over all
    // probe sequences.
    let mut slabs = Vec::new();
    let mut total_rows = 0;
    for seq in &seqs {
        let x = ffn_input_at_protected(&locked, seq)?;
        total_rows += x.rows();
        slabs.push(x);
    }
    let d_model = locked.base.d_model;
    let mut x = DenseMatrix::zeros(total_rows, d_model);
    let mut at = 0;
    for slab in &slabs {
        for r in 0..slab.rows() {
            x.row_mut(at).copy_from_slice(slab.row(r));
            at += 1;
        }
    }

    let ffn = locked.protected_ffn();
    let (output, trace) = locked_layer_sim(&ffn, &bits, &x, &cfg, s.rounds)?;
    let reference = software_reference(&ffn, &bits, &x)?;

    let mut max_diff = 0.0f64;
    let mut ref_max = 0.0f64;
    for (a, b) in output.data().iter().zip(reference.data()) {
        max_diff = max_diff.max((*a as f64 - *b as f64).abs());
        ref_max = ref_max.max((*b as f64).abs());
    }
    let rel = if ref_max > 0.0 { max_diff / ref_max } else { max_diff };
    let summary = trace.summary();

    say!(
        "array {}x{} {}, groups of {}, rounds {}",
        s.rows,
        s.cols,
        match s.dataflow {
            DataflowArg::Ws => "weight-stationary",
            DataflowArg::Os => "output-stationary",
        },
        locked.m,
        match s.rounds {
            Some(r) => r.to_string(),
            None => "auto".into(),
        }
    );
    say!(
        "input {}x{}, cycles {}, macs {}, drains {}",
        total_rows, d_model, summary.cycles, summary.macs, summary.drains
    );
    say!(
        "fabric applications {} (off-key {})",
        summary.fabric_applications, summary.fabric_applications_off_key
    );
    say!("max |array - reference| = {max_diff:.3e} (relative {rel:.3e})");

    if let Some(out) = args.out {
        ensure_dir(&out)?;
        let trace_path = out.join("trace.txt");
        fs::write(&trace_path, trace.text_lines())
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", trace_path.display())))?;
        let summary_path = out.join("summary.json");
        write_json(&summary_path, &summary)?;
        let output_path = out.join("output.llat");
        save_tensor(&output_path, &output)?;
        say!("wrote {}", out.display());
        let mut inputs: Vec<&Path> = vec![args.locked.as_path(), args.key.as_path()];
        if let Some(t) = args.tokens.as_deref() {
            inputs.push(t);
        }
        write_manifest(
            &out,
            "simulate",
            Some(s.seed),
            &s,
            &inputs,
            &[trace_path, summary_path, output_path],
            started,
        )?;
    }
    Ok(())
}

/// FFN input at the protected block (after the mixing residual), captured by
/// walking the unmodified prefix. What runs after the capture is irrelevant.
fn ffn_input_at_protected(
    locked: &LockedModel<f32>,
    tokens: &[u32],
) -> lla_core::Result<DenseMatrix<f32>> {
    let pb = locked.protected_block;
    let mut captured = None;
    locked.base.forward_with(tokens, |b, ffn, x| {
        if b == pb && captured.is_none() {
            captured = Some(x.clone());
        }
        ffn.forward(x)
    })?;
    Ok(captured.expect("protected block index was validated on load"))
}

// ---------------------------------------------------------------------------
// flops

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FlopsSettings {
    dm: usize,
    dff: usize,
    n: usize,
    m: usize,
    kind: FfnKind,
    path: PathArg,
}

impl Default for FlopsSettings {
    fn default() -> Self {
        FlopsSettings {
            dm: 4096,
            dff: 16384,
            n: 2048,
            m: 16,
            kind: FfnKind::Standard,
            path: PathArg::Fwht,
        }
    }
}

pub fn flops(args: FlopsArgs, started: Instant) -> CliResult<()> {
    let mut s: FlopsSettings = load_settings(args.config.as_deref())?;
    if let Some(v) = args.dm {
        s.dm = v;
    }
    if let Some(v) = args.dff {
        s.dff = v;
    }
    if let Some(v) = args.n {
        s.n = v;
    }
    if let Some(v) = args.m {
        s.m = v;
    }
    if let Some(v) = args.kind {
        s.kind = kind_of(v);
    }
    if let Some(v) = args.path {
        s.path = v;
    }

    let report =
        flop_overhead_report(s.dm, s.dff, s.kind, s.n, s.m).map_err(|e| config_err(e.to_string()))?;

    say!(
        "{} ffn d_model {}, d_ff {}: {} flops/token",
        kind_label(s.kind),
        s.dm,
        s.dff,
        report.base_flops
    );
    say!("lock: n={} m={}, {} key bits", s.n, s.m, report.key_bits);
    let (path_label, extra, ratio) = match s.path {
        PathArg::Fwht => ("fwht", report.rotation_fwht_flops, report.fwht_ratio),
        PathArg::Dense => ("dense", report.rotation_dense_flops, report.dense_ratio),
    };
    say!("{} rotation: {} flops, ratio {:.4}%", path_label, extra, ratio * 100.0);
    if s.path == PathArg::Dense && report.dense_exceeds_budget {
        say!("dense path exceeds the 0.1% overhead budget; use the fwht path");
    }

    if let Some(out) = args.out {
        ensure_dir(&out)?;
        let report_path = out.join("report.json");
        write_json(&report_path, &report)?;
        say!("wrote {}", report_path.display());
        write_manifest(&out, "flops", None, &s, &[], &[report_path], started)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalSettings {
    probe_count: usize,
    probe_len: usize,
    seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { probe_count: 8, probe_len: 16, seed: 7 }
    }
}

#[derive(Serialize)]
struct EvalReport {
    jsd: f64,
    cross_entropy_a: f64,
    cross_entropy_b: f64,
    perplexity_a: f64,
    perplexity_b: f64,
    /// Restored-lane fraction between two fabric keys, or recovered-bit
    /// fraction between two negation keys; absent without two keys.
    key_fidelity: Option<f64>,
}

pub fn eval(args: EvalArgs, started: Instant) -> CliResult<()> {
    let mut s: EvalSettings = load_settings(args.config.as_deref())?;
    if let Some(v) = args.probe_count {
        s.probe_count = v;
    }
    if let Some(v) = args.probe_len {
        s.probe_len = v;
    }
    if let Some(v) = args.seed {
        s.seed = v;
    }

    let side_a = open_runner(&args.a, args.key_a.as_deref())?;
    let side_b = open_runner(&args.b, args.key_b.as_deref())?;
    if side_a.vocab() != side_b.vocab() {
        return Err(config_err(format!(
            "vocabularies differ: {} vs {}",
            side_a.vocab(),
            side_b.vocab()
        )));
    }
    let seqs = tokens_or_probes(
        args.tokens.as_deref(),
        side_a.vocab(),
        s.probe_count,
        s.probe_len,
        Seed(s.seed),
        streams::PROBES,
    )?;

    let jsd = mean_jsd_on(|t| side_a.logits(t), |t| side_b.logits(t), &seqs)?;
    let ce_a = cross_entropy_on(|t| side_a.logits(t), &seqs)?;
    let ce_b = cross_entropy_on(|t| side_b.logits(t), &seqs)?;

    let key_fidelity = match (&side_a, &side_b) {
        (Runner::Locked(_, ka), Runner::Locked(_, kb)) => {
            Some(perm_fidelity(&ka.permutation()?, &kb.permutation()?)?)
        }
        (Runner::Negation(_, ba), Runner::Negation(_, bb)) => {
            Some(lla_core::attack::bit_fidelity(ba, bb)?)
        }
        _ => None,
    };

    let report = EvalReport {
        jsd,
        cross_entropy_a: ce_a,
        cross_entropy_b: ce_b,
        perplexity_a: ce_a.exp(),
        perplexity_b: ce_b.exp(),
        key_fidelity,
    };

    say!("jsd {:.6e}", report.jsd);
    say!(
        "perplexity a {}, b {}",
        fmt_ppl(report.perplexity_a),
        fmt_ppl(report.perplexity_b)
    );
    if let Some(f) = report.key_fidelity {
        say!("key fidelity {f:.4}");
    }

    if let Some(out) = args.out {
        ensure_dir(&out)?;
        let report_path = out.join("report.json");
        write_json(&report_path, &report)?;
        say!("wrote {}", report_path.display());
        let mut inputs: Vec<&Path> = vec![args.a.as_path(), args.b.as_path()];
        for p in [args.key_a.as_deref(), args.key_b.as_deref(), args.tokens.as_deref()] {
            if let Some(p) = p {
                inputs.push(p);
            }
        }
        write_manifest(&out, "eval", Some(s.seed), &s, &inputs, &[report_path], started)?;
    }
    Ok(())
}
