//! Desk-scale transformer-like toy model.
//!
//! A model is an embedding table, a stack of blocks, and an unembedding
//! projection. Each block is a fixed random linear mixing stub followed by an
//! FFN, both wired through residual adds:
//!
//! ```text
//! h <- h + h * W_mix
//! h <- h + ffn(h)
//! ```
//!
//! The FFN is `act(X * W_up) * W_down` (standard) or
//! `(act(X * W_gate) .* (X * W_up)) * W_down` (gated). The mixing stub stands
//! in for attention: it is token-local on purpose, because the locking
//! pipeline only needs a realistic FFN with a residual stream around it.
//!
//! Synthetic models can plant feature outliers: selected down-projection
//! columns in all blocks from `outlier_block` on are scaled so those output
//! features dominate their block's FFN output. Planting is verified after
//! construction on held-out probe tokens and re-scaled if the first gain is
//! too timid.
//!
//! Tensors are stored in the `LLAT` container (f32, row-major,
//! little-endian); a model directory is a JSON manifest naming one tensor
//! file per role.

use crate::error::{Error, Result};
use crate::linalg::{matmul, DenseMatrix};
use crate::rng::{derive_seed, streams, Seed, SplitMix64};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Silu,
}

impl Activation {
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Relu => {
                if x > S::zero() {
                    x
                } else {
                    S::zero()
                }
            }
            Activation::Silu => x / (S::one() + (-x).exp()),
        }
    }

    /// Derivative at x; relu'(0) is pinned to 0.
    pub fn derivative<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Relu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Silu => {
                let sig = S::one() / (S::one() + (-x).exp());
                sig * (S::one() + x * (S::one() - sig))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnKind {
    Standard,
    Gated,
}

/// One FFN: up (and optionally gate) projection, activation, down projection.
/// `w_up`/`w_gate` are d_model x d_ff, `w_down` is d_ff x d_model.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnBlock<S> {
    pub kind: FfnKind,
    pub activation: Activation,
    pub w_up: DenseMatrix<S>,
    pub w_gate: Option<DenseMatrix<S>>,
    pub w_down: DenseMatrix<S>,
}

impl<S: Scalar> FfnBlock<S> {
    pub fn standard(w_up: DenseMatrix<S>, w_down: DenseMatrix<S>, activation: Activation) -> Result<Self> {
        let ffn = FfnBlock { kind: FfnKind::Standard, activation, w_up, w_gate: None, w_down };
        ffn.validate()?;
        Ok(ffn)
    }

    pub fn gated(
        w_gate: DenseMatrix<S>,
        w_up: DenseMatrix<S>,
        w_down: DenseMatrix<S>,
        activation: Activation,
    ) -> Result<Self> {
        let ffn = FfnBlock { kind: FfnKind::Gated, activation, w_up, w_gate: Some(w_gate), w_down };
        ffn.validate()?;
        Ok(ffn)
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_up.rows() != self.w_down.cols() || self.w_up.cols() != self.w_down.rows() {
            return Err(Error::Shape(format!(
                "up {}x{} does not match down {}x{}",
                self.w_up.rows(),
                self.w_up.cols(),
                self.w_down.rows(),
                self.w_down.cols()
            )));
        }
        match (self.kind, &self.w_gate) {
            (FfnKind::Standard, None) => {}
            (FfnKind::Gated, Some(g)) => {
                if g.rows() != self.w_up.rows() || g.cols() != self.w_up.cols() {
                    return Err(Error::Shape("gate and up projections differ in shape".into()));
                }
            }
            (FfnKind::Standard, Some(_)) => {
                return Err(Error::Shape("standard FFN carries a gate projection".into()))
            }
            (FfnKind::Gated, None) => {
                return Err(Error::Shape("gated FFN is missing its gate projection".into()))
            }
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.w_up.rows()
    }

    pub fn d_ff(&self) -> usize {
        self.w_up.cols()
    }

    /// Post-activation values (T x d_ff): what feeds the down projection.
    pub fn intermediate(&self, x: &DenseMatrix<S>) -> Result<DenseMatrix<S>> {
        if x.cols() != self.d_model() {
            return Err(Error::Shape(format!(
                "input width {} vs d_model {}",
                x.cols(),
                self.d_model()
            )));
        }
        match self.kind {
            FfnKind::Standard => {
                let mut pre = matmul(x, &self.w_up)?;
                for v in pre.data_mut() {
                    *v = self.activation.apply(*v);
                }
                Ok(pre)
            }
            FfnKind::Gated => {
                let gate = matmul(x, self.w_gate.as_ref().expect("validated"))?;
                let up = matmul(x, &self.w_up)?;
                let mut out = up;
                for (o, g) in out.data_mut().iter_mut().zip(gate.data()) {
                    *o = self.activation.apply(*g) * *o;
                }
                Ok(out)
            }
        }
    }

    /// Full FFN output (T x d_model).
    pub fn forward(&self, x: &DenseMatrix<S>) -> Result<DenseMatrix<S>> {
        matmul(&self.intermediate(x)?, &self.w_down)
    }

    pub fn cast<T: Scalar>(&self) -> FfnBlock<T> {
        FfnBlock {
            kind: self.kind,
            activation: self.activation,
            w_up: self.w_up.cast(),
            w_gate: self.w_gate.as_ref().map(DenseMatrix::cast),
            w_down: self.w_down.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<S> {
    pub mix: DenseMatrix<S>,
    pub ffn: FfnBlock<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<S> {
    pub vocab: usize,
    pub d_model: usize,
    pub embed: DenseMatrix<S>,
    pub blocks: Vec<Block<S>>,
    pub unembed: DenseMatrix<S>,
}

/// Per-block observables from one forward pass: the FFN output and the mean
/// absolute post-activation per neuron (always non-negative).
#[derive(Debug, Clone)]
pub struct HiddenCapture<S> {
    pub ffn_output: DenseMatrix<S>,
    pub post_activation_mean: Vec<f64>,
}

impl<S: Scalar> ToyModel<S> {
    pub fn validate(&self) -> Result<()> {
        if self.embed.rows() != self.vocab || self.embed.cols() != self.d_model {
            return Err(Error::Shape("embedding table shape".into()));
        }
        if self.unembed.rows() != self.d_model || self.unembed.cols() != self.vocab {
            return Err(Error::Shape("unembedding shape".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.mix.rows() != self.d_model || b.mix.cols() != self.d_model {
                return Err(Error::Shape(format!("block {i} mixing stub shape")));
            }
            b.ffn.validate()?;
            if b.ffn.d_model() != self.d_model {
                return Err(Error::Shape(format!("block {i} FFN width")));
            }
        }
        Ok(())
    }

    pub fn embed_tokens(&self, tokens: &[u32]) -> Result<DenseMatrix<S>> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        let mut h = DenseMatrix::zeros(tokens.len(), self.d_model);
        for (t, &tok) in tokens.iter().enumerate() {
            if tok as usize >= self.vocab {
                return Err(Error::Input(format!(
                    "token {tok} outside vocabulary of {}",
                    self.vocab
                )));
            }
            h.row_mut(t).copy_from_slice(self.embed.row(tok as usize));
        }
        Ok(h)
    }

    /// Forward pass with a custom FFN evaluator per block; returns logits.
    /// The evaluator sees the residual input of the block's FFN and must
    /// return the FFN output.
    pub fn forward_with<F>(&self, tokens: &[u32], mut ffn_eval: F) -> Result<DenseMatrix<S>>
    where
        F: FnMut(usize, &FfnBlock<S>, &DenseMatrix<S>) -> Result<DenseMatrix<S>>,
    {
        let mut h = self.embed_tokens(tokens)?;
        for (b, block) in self.blocks.iter().enumerate() {
            let mixed = matmul(&h, &block.mix)?;
            for (hv, mv) in h.data_mut().iter_mut().zip(mixed.data()) {
                *hv += *mv;
            }
            let y = ffn_eval(b, &block.ffn, &h)?;
            if y.rows() != h.rows() || y.cols() != h.cols() {
                return Err(Error::Shape("FFN output shape".into()));
            }
            for (hv, yv) in h.data_mut().iter_mut().zip(y.data()) {
                *hv += *yv;
            }
        }
        matmul(&h, &self.unembed)
    }

    /// Standard forward pass: logits plus per-block captures.
    pub fn forward(&self, tokens: &[u32]) -> Result<(DenseMatrix<S>, Vec<HiddenCapture<S>>)> {
        let mut captures = Vec::with_capacity(self.blocks.len());
        let logits = self.forward_with(tokens, |_, ffn, x| {
            let inter = ffn.intermediate(x)?;
            let t = inter.rows();
            let mut mean = vec![0.0f64; inter.cols()];
            for i in 0..t {
                for (j, v) in inter.row(i).iter().enumerate() {
                    mean[j] += v.as_f64().abs();
                }
            }
            for v in &mut mean {
                *v /= t as f64;
            }
            let y = matmul(&inter, &ffn.w_down)?;
            captures.push(HiddenCapture { ffn_output: y.clone(), post_activation_mean: mean });
            Ok(y)
        })?;
        Ok((logits, captures))
    }

    pub fn logits(&self, tokens: &[u32]) -> Result<DenseMatrix<S>> {
        self.forward_with(tokens, |_, ffn, x| ffn.forward(x))
    }

    pub fn d_ff(&self, block: usize) -> usize {
        self.blocks[block].ffn.d_ff()
    }

    pub fn cast<T: Scalar>(&self) -> ToyModel<T> {
        ToyModel {
            vocab: self.vocab,
            d_model: self.d_model,
            embed: self.embed.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block { mix: b.mix.cast(), ffn: b.ffn.cast() })
                .collect(),
            unembed: self.unembed.cast(),
        }
    }
}

/// Aggregated per-block forward statistics over a probe set.
#[derive(Debug, Clone)]
pub struct FfnStats {
    /// Mean |FFN output| per output feature (length d_model).
    pub y_abs_mean: Vec<f64>,
    /// Mean |post-activation| per neuron (length d_ff).
    pub u_abs_mean: Vec<f64>,
    pub token_count: usize,
}

/// Run every probe sequence and aggregate mean absolute FFN outputs and
/// post-activations per block, token-weighted.
pub fn collect_ffn_stats<S: Scalar>(model: &ToyModel<S>, probes: &[Vec<u32>]) -> Result<Vec<FfnStats>> {
    if probes.is_empty() {
        return Err(Error::Input("empty probe set".into()));
    }
    let mut stats: Vec<FfnStats> = model
        .blocks
        .iter()
        .map(|b| FfnStats {
            y_abs_mean: vec![0.0; model.d_model],
            u_abs_mean: vec![0.0; b.ffn.d_ff()],
            token_count: 0,
        })
        .collect();
    for seq in probes {
        let (_, captures) = model.forward(seq)?;
        for (b, cap) in captures.iter().enumerate() {
            let t = cap.ffn_output.rows();
            for i in 0..t {
                for (j, v) in cap.ffn_output.row(i).iter().enumerate() {
                    stats[b].y_abs_mean[j] += v.as_f64().abs();
                }
            }
            for (j, &u) in cap.post_activation_mean.iter().enumerate() {
                stats[b].u_abs_mean[j] += u * t as f64;
            }
            stats[b].token_count += t;
        }
    }
    for s in &mut stats {
        for v in &mut s.y_abs_mean {
            *v /= s.token_count as f64;
        }
        for v in &mut s.u_abs_mean {
            *v /= s.token_count as f64;
        }
    }
    Ok(stats)
}

/// Uniform random token sequences from the pinned stream.
pub fn probe_tokens(vocab: usize, sequences: usize, len: usize, seed: Seed) -> Vec<Vec<u32>> {
    let mut rng = SplitMix64::new(seed);
    (0..sequences)
        .map(|_| (0..len).map(|_| rng.next_below(vocab as u64) as u32).collect())
        .collect()
}

/// exp(mean negative log-likelihood) over all next-token positions, natural
/// log, accumulated in f64.
pub fn perplexity<S: Scalar>(model: &ToyModel<S>, corpus: &[Vec<u32>]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    let mut nll = 0.0f64;
    let mut count = 0usize;
    for seq in corpus {
        if seq.len() < 2 {
            return Err(Error::Input("sequence too short to score (needs >= 2 tokens)".into()));
        }
        let logits = model.logits(seq)?;
        nll += nll_of_logits(&logits, seq)?;
        count += seq.len() - 1;
    }
    Ok((nll / count as f64).exp())
}

/// Total negative log-likelihood of the observed continuations under the
/// given logits (one row per position).
pub fn nll_of_logits<S: Scalar>(logits: &DenseMatrix<S>, seq: &[u32]) -> Result<f64> {
    if logits.rows() != seq.len() {
        return Err(Error::Shape("one logit row per token expected".into()));
    }
    let mut total = 0.0f64;
    for t in 0..seq.len() - 1 {
        let row = logits.row(t);
        let target = seq[t + 1] as usize;
        if target >= row.len() {
            return Err(Error::Input(format!("token {target} outside vocabulary")));
        }
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        total -= row[target].as_f64() - lse;
    }
    Ok(total)
}

/// Synthetic model recipe. `outlier_gain = 1` (or no dims) produces a plain
/// random model with no planted outliers.
///
/// `neuron_outliers` / `neuron_gain` additionally boost the up-projection
/// columns of selected neurons in the outlier block, giving those neurons the
/// oversized post-activation magnitudes large language models exhibit. The
/// feature-dim planting above cannot create that effect (it only scales the
/// down projection, downstream of the activation), and rotation smoothing is
/// only observable when it exists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_blocks: usize,
    pub kind: FfnKind,
    pub activation: Activation,
    pub outlier_dims: Vec<usize>,
    pub outlier_block: usize,
    pub outlier_gain: f64,
    #[serde(default)]
    pub neuron_outliers: Vec<usize>,
    #[serde(default = "default_neuron_gain")]
    pub neuron_gain: f64,
}

fn default_neuron_gain() -> f64 {
    1.0
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab: 64,
            d_model: 24,
            d_ff: 64,
            n_blocks: 2,
            kind: FfnKind::Standard,
            activation: Activation::Relu,
            outlier_dims: Vec::new(),
            outlier_block: 0,
            outlier_gain: 1.0,
            neuron_outliers: Vec::new(),
            neuron_gain: 1.0,
        }
    }
}

/// Threshold used when verifying planted outliers (the pipeline default).
const PLANT_TAU: f64 = 5.0;
const PLANT_RETRIES: usize = 16;

pub fn synth_model<S: Scalar>(cfg: &SynthConfig, seed: Seed) -> Result<ToyModel<S>> {
    if cfg.n_blocks == 0 {
        return Err(Error::Construction("model needs at least one block".into()));
    }
    if cfg.vocab < 2 || cfg.d_model == 0 || cfg.d_ff == 0 {
        return Err(Error::Construction("degenerate model dimensions".into()));
    }
    let planting = !cfg.outlier_dims.is_empty() && cfg.outlier_gain != 1.0;
    if planting {
        if cfg.outlier_gain <= 1.0 {
            return Err(Error::Construction(format!(
                "outlier gain {} cannot create outliers",
                cfg.outlier_gain
            )));
        }
        if cfg.outlier_block >= cfg.n_blocks {
            return Err(Error::Construction(format!(
                "outlier block {} out of {} blocks",
                cfg.outlier_block, cfg.n_blocks
            )));
        }
        let mut sorted = cfg.outlier_dims.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != cfg.outlier_dims.len() || sorted.iter().any(|&d| d >= cfg.d_model) {
            return Err(Error::Construction("outlier dims must be distinct and in range".into()));
        }
        // A feature above tau * mean needs the mean to stay low: with p
        // planted dims of equal weight the ratio tops out near d_model / p.
        if PLANT_TAU * sorted.len() as f64 >= cfg.d_model as f64 {
            return Err(Error::Construction(format!(
                "{} planted dims cannot all exceed {PLANT_TAU}x the mean of {} features",
                sorted.len(),
                cfg.d_model
            )));
        }
    }

    let weights_seed = derive_seed(seed, streams::WEIGHTS);
    let gaussian = |tag: u64, rows: usize, cols: usize, std: f64| {
        let mut rng = SplitMix64::new(derive_seed(weights_seed, tag));
        DenseMatrix::<S>::from_fn(rows, cols, |_, _| S::from_f64(rng.next_gaussian() * std))
    };

    let dm = cfg.d_model as f64;
    let dff = cfg.d_ff as f64;
    let embed = gaussian(0, cfg.vocab, cfg.d_model, 1.0);
    let unembed = gaussian(1, cfg.d_model, cfg.vocab, 1.0 / dm.sqrt());
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for b in 0..cfg.n_blocks {
        let tag = 16 + 8 * b as u64;
        let mix = gaussian(tag, cfg.d_model, cfg.d_model, 0.5 / dm.sqrt());
        let w_up = gaussian(tag + 1, cfg.d_model, cfg.d_ff, 1.0 / dm.sqrt());
        let w_down = gaussian(tag + 2, cfg.d_ff, cfg.d_model, 1.0 / dff.sqrt());
        let ffn = match cfg.kind {
            FfnKind::Standard => FfnBlock::standard(w_up, w_down, cfg.activation)?,
            FfnKind::Gated => {
                let w_gate = gaussian(tag + 3, cfg.d_model, cfg.d_ff, 1.0 / dm.sqrt());
                FfnBlock::gated(w_gate, w_up, w_down, cfg.activation)?
            }
        };
        blocks.push(Block { mix, ffn });
    }
    let mut model = ToyModel { vocab: cfg.vocab, d_model: cfg.d_model, embed, blocks, unembed };
    model.validate()?;

    if !cfg.neuron_outliers.is_empty() && cfg.neuron_gain != 1.0 {
        if cfg.neuron_gain <= 0.0 || !cfg.neuron_gain.is_finite() {
            return Err(Error::Construction(format!(
                "neuron gain {} is not a usable scale",
                cfg.neuron_gain
            )));
        }
        if cfg.outlier_block >= cfg.n_blocks {
            return Err(Error::Construction(format!(
                "outlier block {} out of {} blocks",
                cfg.outlier_block, cfg.n_blocks
            )));
        }
        let mut sorted = cfg.neuron_outliers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != cfg.neuron_outliers.len() || sorted.iter().any(|&j| j >= cfg.d_ff) {
            return Err(Error::Construction(
                "neuron outliers must be distinct and in range".into(),
            ));
        }
        // Scaling the up projection scales the post-activation directly (the
        // gated product is linear in it; relu commutes with positive scales).
        let gain = S::from_f64(cfg.neuron_gain);
        for &j in &cfg.neuron_outliers {
            model.blocks[cfg.outlier_block].ffn.w_up.scale_column(j, gain);
        }
    }

    if !planting {
        return Ok(model);
    }

    let probes = probe_tokens(cfg.vocab, 8, 64, derive_seed(seed, streams::VERIFY));
    let base = collect_ffn_stats(&model, &probes)?;
    let mut want = cfg.outlier_dims.clone();
    want.sort_unstable();
    // Per-block scale factors for the planted columns, equalized within each
    // block so all planted dims respond at the same level. Verification then
    // demands the planted dims are picked exactly at the outlier block and
    // keep outlier status downstream; failing blocks get re-equalized against
    // their measured response and doubled. Blocks converge front to back
    // (planting changes only downstream inputs), so a handful of rounds
    // settles the whole stack.
    let equalized = |y: &[f64], gain: f64| -> Vec<f64> {
        let max_resp = cfg
            .outlier_dims
            .iter()
            .map(|&d| y[d])
            .fold(0.0f64, f64::max)
            .max(1e-9);
        cfg.outlier_dims
            .iter()
            .map(|&d| gain * max_resp / y[d].max(max_resp * 1e-3))
            .collect()
    };
    let mut factors: Vec<Vec<f64>> = (0..cfg.n_blocks)
        .map(|b| {
            if b < cfg.outlier_block {
                Vec::new()
            } else {
                equalized(&base[b].y_abs_mean, cfg.outlier_gain)
            }
        })
        .collect();
    let pristine = model.clone();
    let mut measured: Vec<(usize, Vec<usize>)> = Vec::new();
    for _attempt in 0..=PLANT_RETRIES {
        model = pristine.clone();
        for b in cfg.outlier_block..cfg.n_blocks {
            for (&d, &f) in cfg.outlier_dims.iter().zip(&factors[b]) {
                model.blocks[b].ffn.w_down.scale_column(d, S::from_f64(f));
            }
        }
        let stats = collect_ffn_stats(&model, &probes)?;
        measured.clear();
        let mut all_ok = true;
        for b in cfg.outlier_block..cfg.n_blocks {
            let (_, picked) = crate::outlier::outliers_from_means(&stats[b].y_abs_mean, PLANT_TAU);
            let ok = if b == cfg.outlier_block {
                picked == want
            } else {
                want.iter().all(|d| picked.binary_search(d).is_ok())
            };
            if !ok {
                all_ok = false;
                let correction = equalized(&stats[b].y_abs_mean, 2.0);
                for (f, c) in factors[b].iter_mut().zip(correction) {
                    *f *= c;
                }
            }
            measured.push((b, picked));
        }
        if all_ok {
            return Ok(model);
        }
    }
    Err(Error::Construction(format!(
        "planting gain {} too small even after {PLANT_RETRIES} correction rounds: \
         wanted dims {:?}, measured per block {:?}",
        cfg.outlier_gain, cfg.outlier_dims, measured
    )))
}

// ---------------------------------------------------------------------------
// Tensor container and model directory layout.

const TENSOR_MAGIC: &[u8; 4] = b"LLAT";
const TENSOR_VERSION: u32 = 1;

/// Write a 2-D f32 tensor: magic, u32 LE version, u32 LE ndims, ndims u64 LE
/// dims, then row-major little-endian payload.
pub fn save_tensor(path: &Path, t: &DenseMatrix<f32>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(TENSOR_MAGIC)?;
    f.write_all(&TENSOR_VERSION.to_le_bytes())?;
    f.write_all(&2u32.to_le_bytes())?;
    f.write_all(&(t.rows() as u64).to_le_bytes())?;
    f.write_all(&(t.cols() as u64).to_le_bytes())?;
    let mut payload = Vec::with_capacity(t.data().len() * 4);
    for v in t.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&payload)?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<DenseMatrix<f32>> {
    let raw = fs::read(path)?;
    if raw.len() < 12 {
        return Err(Error::Format("tensor file shorter than its header".into()));
    }
    if &raw[0..4] != TENSOR_MAGIC {
        return Err(Error::Format("bad tensor magic".into()));
    }
    let version = u32::from_le_bytes(raw[4..8].try_into().unwrap());
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let ndims = u32::from_le_bytes(raw[8..12].try_into().unwrap());
    if ndims != 2 {
        return Err(Error::Format(format!("expected a 2-D tensor, got {ndims} dims")));
    }
    if raw.len() < 28 {
        return Err(Error::Format("tensor file truncated in its dims".into()));
    }
    let rows = u64::from_le_bytes(raw[12..20].try_into().unwrap());
    let cols = u64::from_le_bytes(raw[20..28].try_into().unwrap());
    let count = rows
        .checked_mul(cols)
        .and_then(|c| usize::try_from(c).ok())
        .ok_or_else(|| Error::Format("tensor dims overflow".into()))?;
    let want = 28 + count * 4;
    if raw.len() != want {
        return Err(Error::Format(format!(
            "tensor file is {} bytes, dims need {want}",
            raw.len()
        )));
    }
    let mut data = Vec::with_capacity(count);
    for chunk in raw[28..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    DenseMatrix::from_vec(rows as usize, cols as usize, data)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct FfnManifest {
    pub kind: FfnKind,
    pub activation: Activation,
    pub w_up: String,
    pub w_gate: Option<String>,
    pub w_down: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct BlockManifest {
    pub mix: String,
    pub ffn: FfnManifest,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    format: String,
    version: u32,
    vocab: usize,
    d_model: usize,
    embed: String,
    unembed: String,
    blocks: Vec<BlockManifest>,
}

pub const MODEL_FORMAT: &str = "lla-model";
pub const MANIFEST_FILE: &str = "model.json";

pub(crate) fn write_ffn_tensors(
    dir: &Path,
    prefix: &str,
    ffn: &FfnBlock<f32>,
) -> Result<FfnManifest> {
    let up = format!("{prefix}_up.llat");
    let down = format!("{prefix}_down.llat");
    save_tensor(&dir.join(&up), &ffn.w_up)?;
    save_tensor(&dir.join(&down), &ffn.w_down)?;
    let w_gate = match &ffn.w_gate {
        Some(g) => {
            let gate = format!("{prefix}_gate.llat");
            save_tensor(&dir.join(&gate), g)?;
            Some(gate)
        }
        None => None,
    };
    Ok(FfnManifest {
        kind: ffn.kind,
        activation: ffn.activation,
        w_up: up,
        w_gate,
        w_down: down,
    })
}

pub(crate) fn read_ffn_tensors(dir: &Path, m: &FfnManifest) -> Result<FfnBlock<f32>> {
    let w_up = load_tensor(&dir.join(&m.w_up))?;
    let w_down = load_tensor(&dir.join(&m.w_down))?;
    match (m.kind, &m.w_gate) {
        (FfnKind::Standard, None) => FfnBlock::standard(w_up, w_down, m.activation),
        (FfnKind::Gated, Some(g)) => {
            FfnBlock::gated(load_tensor(&dir.join(g))?, w_up, w_down, m.activation)
        }
        _ => Err(Error::Format("FFN kind and gate tensor disagree".into())),
    }
}

pub(crate) fn write_block_tensors(dir: &Path, model: &ToyModel<f32>) -> Result<Vec<BlockManifest>> {
    let mut blocks = Vec::with_capacity(model.blocks.len());
    for (i, b) in model.blocks.iter().enumerate() {
        let mix = format!("b{i}_mix.llat");
        save_tensor(&dir.join(&mix), &b.mix)?;
        let ffn = write_ffn_tensors(dir, &format!("b{i}"), &b.ffn)?;
        blocks.push(BlockManifest { mix, ffn });
    }
    Ok(blocks)
}

/// Write a model directory: `model.json` plus one LLAT file per tensor role.
pub fn save_model(dir: &Path, model: &ToyModel<f32>) -> Result<()> {
    model.validate()?;
    fs::create_dir_all(dir)?;
    save_tensor(&dir.join("embed.llat"), &model.embed)?;
    save_tensor(&dir.join("unembed.llat"), &model.unembed)?;
    let blocks = write_block_tensors(dir, model)?;
    let manifest = ModelManifest {
        format: MODEL_FORMAT.into(),
        version: 1,
        vocab: model.vocab,
        d_model: model.d_model,
        embed: "embed.llat".into(),
        unembed: "unembed.llat".into(),
        blocks,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<ToyModel<f32>> {
    let manifest: ModelManifest =
        serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != MODEL_FORMAT {
        return Err(Error::Format(format!(
            "directory holds a {} artifact, expected {MODEL_FORMAT}",
            manifest.format
        )));
    }
    let embed = load_tensor(&dir.join(&manifest.embed))?;
    let unembed = load_tensor(&dir.join(&manifest.unembed))?;
    let mut blocks = Vec::with_capacity(manifest.blocks.len());
    for b in &manifest.blocks {
        blocks.push(Block {
            mix: load_tensor(&dir.join(&b.mix))?,
            ffn: read_ffn_tensors(dir, &b.ffn)?,
        });
    }
    let model = ToyModel {
        vocab: manifest.vocab,
        d_model: manifest.d_model,
        embed,
        blocks,
        unembed,
    };
    model.validate()?;
    Ok(model)
}

/// Detect which artifact family a directory holds by its manifest `format`.
pub fn manifest_format(dir: &Path) -> Result<String> {
    let value: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    value
        .get("format")
        .and_then(|v| v.as_str())
        .map(str::to_owned)
        .ok_or_else(|| Error::Format("manifest has no format field".into()))
}

/// Parse token-id text: one sequence per line, space-separated decimal ids.
/// Blank lines are skipped.
pub fn parse_token_lines(text: &str) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut seq = Vec::new();
        for tok in line.split_whitespace() {
            seq.push(tok.parse::<u32>().map_err(|_| {
                Error::Format(format!("line {}: {tok:?} is not a token id", ln + 1))
            })?);
        }
        out.push(seq);
    }
    if out.is_empty() {
        return Err(Error::Format("no token sequences in file".into()));
    }
    Ok(out)
}

pub fn format_token_lines(seqs: &[Vec<u32>]) -> String {
    let mut out = String::new();
    for seq in seqs {
        let line: Vec<String> = seq.iter().map(u32::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}
