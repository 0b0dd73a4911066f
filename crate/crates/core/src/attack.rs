//! Key-recovery attacks against locked models, and the metrics that score
//! them.
//!
//! The adversary holds the locked weights and may query an oracle (the
//! original model, or a transcript of it) for logits on arbitrary token
//! sequences, but never sees internal states or key bits. Two search
//! strategies are implemented over the group-local permutation space:
//!
//! * [`genetic_attack`]: tournament-selection evolution of whole
//!   permutations, with uniform crossover of permutation groups and
//!   within-group transposition mutations.
//! * [`gradient_attack`]: each group's hard m x m permutation matrix is
//!   relaxed to a column-stochastic matrix G whose column j is
//!   softmax(L[:, j]); the logit matrices L are trained with Adam and
//!   projected back to hard assignments at the end.
//!
//! [`hpnn_gradient_attack`] is the analogous relaxation for the negation
//! baseline: each key bit becomes tanh(theta) scaling the neuron's
//! pre-activation, thresholded at zero after training.
//!
//! Guidance is either oracle-guided (minimize mean Jensen-Shannon
//! divergence against oracle output distributions over a probe set) or
//! oracle-less (minimize next-token cross-entropy on a synthetic corpus).
//!
//! # Backward pass of the relaxed attack
//!
//! Only L is trainable; every weight is fixed, so the chain rule is written
//! by hand. Per sequence, with the protected block's rotated intermediate
//! Z (T x d_ff, constant in L) and per-group relaxations G_g:
//!
//! ```text
//! routed[:, gm..gm+m] = Z[:, gm..gm+m] * G_g        (lanes past n copied)
//! y_p  = routed * W_down                            (protected block FFN out)
//! h    = x_p + y_p                                  (residual)
//! then for each later block:  h += h*mix;  h += ffn(h)
//! logits = h * unembed
//! ```
//!
//! Backward, top to bottom: dh = dlogits * unembed^T; through each later
//! block dh1 = dh + dffn(dh) and dh = dh1 + dh1 * mix^T, where for a
//! standard FFN with pre = h1*W_up, dffn = (dh (.) nothing) chains as
//! dU = dh*W_down^T, dpre = dU (.) act'(pre), dffn = dpre*W_up^T, and the
//! gated variant adds the product-rule split over gate and up paths. At the
//! protected block drouted = dh * W_down^T and
//!
//! ```text
//! dG_g[i][j]  = sum_t Z[t, gm+i] * drouted[t, gm+j]
//! dL_g[k][j]  = p_k * (dG_g[k][j] - sum_i p_i dG_g[i][j]),  p = G_g[:, j]
//! ```
//!
//! the last line being the softmax Jacobian applied per column. The loss
//! seeds: for Jensen-Shannon divergence against fixed q,
//! dJSD/dp_k = ln(p_k / mid_k) / 2 with mid = (p+q)/2, pushed through the
//! output softmax; for cross-entropy, dlogit = p - onehot(target). A
//! central-difference check validates all of this end to end.

use crate::error::{Error, Result};
use crate::fabric::random_group_local_permutation;
use crate::linalg::{apply_permutation, is_permutation, matmul, softmax_in_place, DenseMatrix};
use crate::locker::{HpnnModel, LockedModel};
use crate::model::{FfnKind, ToyModel};
use crate::rng::{derive_seed, streams, Seed, SplitMix64};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::time::Instant;

/// Query interface the adversary gets: token sequences in, logits out.
/// Implementations must be deterministic for fixed inputs and expose no
/// internal state.
pub trait Oracle<S: Scalar> {
    fn logits(&self, tokens: &[u32]) -> Result<DenseMatrix<S>>;
}

impl<S: Scalar> Oracle<S> for ToyModel<S> {
    fn logits(&self, tokens: &[u32]) -> Result<DenseMatrix<S>> {
        ToyModel::logits(self, tokens)
    }
}

/// An oracle replayed from recorded transcripts; queries outside the
/// recording fail.
#[derive(Debug, Clone)]
pub struct TranscriptOracle<S> {
    recorded: BTreeMap<Vec<u32>, DenseMatrix<S>>,
}

impl<S: Scalar> TranscriptOracle<S> {
    pub fn record(model: &ToyModel<S>, sequences: &[Vec<u32>]) -> Result<Self> {
        let mut recorded = BTreeMap::new();
        for seq in sequences {
            recorded.insert(seq.clone(), model.logits(seq)?);
        }
        Ok(TranscriptOracle { recorded })
    }

    pub fn len(&self) -> usize {
        self.recorded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recorded.is_empty()
    }
}

impl<S: Scalar> Oracle<S> for TranscriptOracle<S> {
    fn logits(&self, tokens: &[u32]) -> Result<DenseMatrix<S>> {
        self.recorded
            .get(tokens)
            .cloned()
            .ok_or_else(|| Error::Input("sequence not in the recorded transcript".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Guidance {
    /// Minimize mean JSD against oracle outputs on the probe set.
    OracleGuided,
    /// Minimize next-token cross-entropy on a corpus; no oracle queries.
    OracleLess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMethod {
    Genetic,
    Gradient,
    HpnnGradient,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub guidance: Guidance,
    /// Iteration budget: generations for the genetic attack, Adam steps for
    /// the gradient attacks. Zero evaluates the initial candidate only.
    pub iterations: u64,
    /// Optional wall-clock cap in seconds, checked between iterations and
    /// reported; never the sole stop condition in tests.
    pub time_limit: Option<f64>,
    /// Probe sequences for oracle-guided fitness and for post-attack JSD.
    pub probes: Vec<Vec<u32>>,
    /// Token corpus for oracle-less fitness and post-attack perplexity.
    pub corpus: Vec<Vec<u32>>,
    pub seed: Seed,
    pub population: usize,
    pub tournament: usize,
    /// Probability that a child receives one within-group transposition.
    pub mutation_rate: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AttackConfig {
    /// Pinned defaults: population 64 and tournament 4 (reproducibility
    /// pins; no canonical values exist), Adam at learning rate 0.03 with
    /// betas 0.9/0.999 and epsilon 1e-8.
    pub fn new(seed: Seed) -> Self {
        AttackConfig {
            guidance: Guidance::OracleGuided,
            iterations: 200,
            time_limit: None,
            probes: Vec::new(),
            corpus: Vec::new(),
            seed,
            population: 64,
            tournament: 4,
            mutation_rate: 1.0,
            learning_rate: 0.03,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.population == 0 || self.tournament == 0 || self.tournament > self.population {
            return Err(Error::Input(format!(
                "tournament of {} within a population of {}",
                self.tournament, self.population
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Input("learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::Input("mutation rate must lie in [0, 1]".into()));
        }
        if let Some(t) = self.time_limit {
            if !(t > 0.0) {
                return Err(Error::Input("time limit must be positive".into()));
            }
        }
        match self.guidance {
            Guidance::OracleGuided => {
                if self.probes.is_empty() {
                    return Err(Error::Input("oracle-guided attack needs a probe set".into()));
                }
            }
            Guidance::OracleLess => {
                if self.corpus.is_empty() {
                    return Err(Error::Input("oracle-less attack needs a corpus".into()));
                }
                if self.corpus.iter().any(|s| s.len() < 2) {
                    return Err(Error::Input(
                        "corpus sequences need at least two tokens for next-token loss".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackResult {
    pub method: AttackMethod,
    pub guidance: Guidance,
    /// Best executable candidate permutation (the repaired one for the
    /// gradient attack).
    pub permutation: Option<Vec<usize>>,
    /// Raw column-argmax projection: entry j is the row that column j's
    /// argmax selected. May fail to be a permutation; reported as-is.
    pub argmax_projection: Option<Vec<usize>>,
    pub projection_is_permutation: Option<bool>,
    /// Recovered negation bits (negation attack only).
    pub key_bits: Option<Vec<bool>>,
    /// Headline fidelity against the true key, when the caller supplied it:
    /// restored-index fraction for permutations (projection-based for the
    /// gradient attack), recovered-bit fraction for negation.
    pub fidelity: Option<f64>,
    /// Fidelity of the repaired assignment (gradient attack only).
    pub repaired_fidelity: Option<f64>,
    /// Mean JSD between the attacked model and the oracle on the probes.
    pub post_jsd: Option<f64>,
    /// Perplexity of the attacked model on the corpus.
    pub post_perplexity: Option<f64>,
    pub final_loss: f64,
    pub iterations: u64,
    pub elapsed_seconds: f64,
    /// Analytic random-guess floor: 1/m for permutations, 1/2 for bits.
    pub random_baseline: f64,
}

// ---------------------------------------------------------------------------
// Metrics.

/// Jensen-Shannon divergence between two distributions, natural log,
/// 0*log(0) taken as 0. Symmetric, non-negative, at most ln 2.
pub fn jsd<S: Scalar>(p: &[S], q: &[S]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Input(format!(
            "distributions of different support: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let check = |d: &[S]| -> Result<()> {
        let mut sum = 0.0;
        for &v in d {
            let v = v.as_f64();
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Input(format!("invalid probability {v}")));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!("distribution sums to {sum}, not 1")));
        }
        Ok(())
    };
    check(p)?;
    check(q)?;
    let mut acc = 0.0;
    for (&pv, &qv) in p.iter().zip(q) {
        let (pv, qv) = (pv.as_f64(), qv.as_f64());
        // p/mid written as 2p/(p+q): the halved midpoint can flush to zero
        // at the denormal floor, this form cannot, and it stays in (0, 2].
        let sum = pv + qv;
        if pv > 0.0 {
            acc += 0.5 * pv * (2.0 * pv / sum).ln();
        }
        if qv > 0.0 {
            acc += 0.5 * qv * (2.0 * qv / sum).ln();
        }
    }
    Ok(acc.max(0.0))
}

/// Mean JSD between two logit matrices, row-softmaxed, averaged over rows.
pub fn mean_jsd_logits<S: Scalar>(a: &DenseMatrix<S>, b: &DenseMatrix<S>) -> Result<f64> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Shape("logit matrices of different shape".into()));
    }
    let mut acc = 0.0;
    for r in 0..a.rows() {
        let mut p: Vec<f64> = a.row(r).iter().map(|v| v.as_f64()).collect();
        let mut q: Vec<f64> = b.row(r).iter().map(|v| v.as_f64()).collect();
        softmax_in_place(&mut p);
        softmax_in_place(&mut q);
        acc += jsd(&p, &q)?;
    }
    Ok(acc / a.rows() as f64)
}

/// Mean JSD between two models' outputs over a probe set, every token
/// position weighted equally.
pub fn mean_jsd_on<S: Scalar>(
    mut a: impl FnMut(&[u32]) -> Result<DenseMatrix<S>>,
    mut b: impl FnMut(&[u32]) -> Result<DenseMatrix<S>>,
    probes: &[Vec<u32>],
) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Input("empty probe set".into()));
    }
    let mut acc = 0.0;
    let mut rows = 0usize;
    for seq in probes {
        let la = a(seq)?;
        let lb = b(seq)?;
        acc += mean_jsd_logits(&la, &lb)? * la.rows() as f64;
        rows += la.rows();
    }
    Ok(acc / rows as f64)
}

/// Fraction of lanes whose original index is restored.
pub fn fidelity(candidate: &[usize], truth: &[usize]) -> Result<f64> {
    if candidate.len() != truth.len() {
        return Err(Error::Input(format!(
            "candidate covers {} lanes, truth covers {}",
            candidate.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Input("empty permutations".into()));
    }
    let hits = candidate.iter().zip(truth).filter(|(c, t)| c == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Fraction of recovered key bits.
pub fn bit_fidelity(candidate: &[bool], truth: &[bool]) -> Result<f64> {
    if candidate.len() != truth.len() || truth.is_empty() {
        return Err(Error::Input("bit vectors of different or zero length".into()));
    }
    let hits = candidate.iter().zip(truth).filter(|(c, t)| c == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Expected fidelity of a uniform random group-local candidate: a uniform
/// permutation of m lanes has one fixed point in expectation, so the
/// restored fraction is (n/m) * 1 / n = 1/m.
pub fn random_guess_fidelity(m: usize) -> f64 {
    1.0 / m as f64
}

/// Next-token cross-entropy of a model over a corpus (natural log),
/// averaged over all predicted positions. Probabilities are computed in
/// f64 regardless of the model's width.
pub fn cross_entropy_on<S: Scalar>(
    mut forward: impl FnMut(&[u32]) -> Result<DenseMatrix<S>>,
    corpus: &[Vec<u32>],
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for seq in corpus {
        if seq.len() < 2 {
            return Err(Error::Input("corpus sequence shorter than two tokens".into()));
        }
        let logits = forward(seq)?;
        for t in 0..seq.len() - 1 {
            let mut p: Vec<f64> = logits.row(t).iter().map(|v| v.as_f64()).collect();
            softmax_in_place(&mut p);
            let target = seq[t + 1] as usize;
            if target >= p.len() {
                return Err(Error::Input(format!("token {target} outside the vocabulary")));
            }
            acc -= p[target].max(f64::MIN_POSITIVE).ln();
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// exp of the mean next-token cross-entropy.
pub fn perplexity_on<S: Scalar>(
    forward: impl FnMut(&[u32]) -> Result<DenseMatrix<S>>,
    corpus: &[Vec<u32>],
) -> Result<f64> {
    Ok(cross_entropy_on(forward, corpus)?.exp())
}

// ---------------------------------------------------------------------------
// Token file IO: one sequence per line, space-separated decimal ids.

pub fn write_token_file(path: &std::path::Path, sequences: &[Vec<u32>]) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::Input(format!("cannot create {}: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(file);
    for seq in sequences {
        let line: Vec<String> = seq.iter().map(u32::to_string).collect();
        writeln!(w, "{}", line.join(" "))
            .map_err(|e| Error::Input(format!("write {}: {e}", path.display())))?;
    }
    Ok(())
}

pub fn read_token_file(path: &std::path::Path) -> Result<Vec<Vec<u32>>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
    let mut sequences = Vec::new();
    for (ln, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::Input(format!("read {}: {e}", path.display())))?;
        if line.trim().is_empty() {
            return Err(Error::Format(format!("{}:{}: empty sequence", path.display(), ln + 1)));
        }
        let seq: Vec<u32> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<u32>().map_err(|_| {
                    Error::Format(format!("{}:{}: bad token id {tok:?}", path.display(), ln + 1))
                })
            })
            .collect::<Result<_>>()?;
        sequences.push(seq);
    }
    if sequences.is_empty() {
        return Err(Error::Format(format!("{}: no sequences", path.display())));
    }
    Ok(sequences)
}

// ---------------------------------------------------------------------------
// Shared evaluation plumbing: candidate-independent prefix, swappable lane
// routing, suffix replay.

/// Everything about one sequence that no candidate can change: the FFN
/// input at the protected block, the rotated intermediate Z, and (oracle
/// guidance) the oracle's output distribution.
struct SeqData<S> {
    tokens: Vec<u32>,
    x_pb: DenseMatrix<S>,
    z_pb: DenseMatrix<S>,
    target_probs: Option<DenseMatrix<S>>,
}

fn prefix_pass<S: Scalar>(
    locked: &LockedModel<S>,
    tokens: &[u32],
) -> Result<(DenseMatrix<S>, DenseMatrix<S>)> {
    let pb = locked.protected_block;
    let mut h = locked.base.embed_tokens(tokens)?;
    for b in 0..pb {
        residual_mix(&mut h, &locked.base.blocks[b].mix)?;
        let y = locked.base.blocks[b].ffn.forward(&h)?;
        add_into(&mut h, &y);
    }
    residual_mix(&mut h, &locked.base.blocks[pb].mix)?;
    let x_pb = h;
    let mut z = locked.base.blocks[pb].ffn.intermediate(&x_pb)?;
    locked.rotation().apply_rows(&mut z);
    Ok((x_pb, z))
}

/// h += h * mix.
fn residual_mix<S: Scalar>(h: &mut DenseMatrix<S>, mix: &DenseMatrix<S>) -> Result<()> {
    let mixed = matmul(h, mix)?;
    add_into(h, &mixed);
    Ok(())
}

fn add_into<S: Scalar>(dst: &mut DenseMatrix<S>, src: &DenseMatrix<S>) {
    debug_assert_eq!(dst.rows(), src.rows());
    debug_assert_eq!(dst.cols(), src.cols());
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += *s;
    }
}

fn build_seq_data<S: Scalar>(
    locked: &LockedModel<S>,
    sequences: &[Vec<u32>],
    oracle: Option<&dyn Oracle<S>>,
) -> Result<Vec<SeqData<S>>> {
    sequences
        .iter()
        .map(|tokens| {
            let (x_pb, z_pb) = prefix_pass(locked, tokens)?;
            let target_probs = match oracle {
                Some(o) => {
                    let mut probs = o.logits(tokens)?;
                    for r in 0..probs.rows() {
                        softmax_in_place(probs.row_mut(r));
                    }
                    Some(probs)
                }
                None => None,
            };
            Ok(SeqData { tokens: tokens.clone(), x_pb, z_pb, target_probs })
        })
        .collect()
}

/// Per-block caches of one suffix forward, for the hand backward pass:
/// the pre-activations of the up projection and (gated FFNs) the gate.
struct BlockCache<S> {
    pre: DenseMatrix<S>,
    gate: Option<DenseMatrix<S>>,
}

/// Run blocks pb+1.. of the base model on `h` (the output of block pb,
/// residual included) through to logits. `caches` collects what the
/// backward pass needs when supplied.
fn base_suffix_forward<S: Scalar>(
    model: &ToyModel<S>,
    pb: usize,
    mut h: DenseMatrix<S>,
    mut caches: Option<&mut Vec<BlockCache<S>>>,
) -> Result<DenseMatrix<S>> {
    for b in pb + 1..model.blocks.len() {
        let block = &model.blocks[b];
        residual_mix(&mut h, &block.mix)?;
        let pre = matmul(&h, &block.ffn.w_up)?;
        let gate = match block.ffn.kind {
            FfnKind::Standard => None,
            FfnKind::Gated => Some(matmul(&h, block.ffn.w_gate.as_ref().expect("validated"))?),
        };
        let mut u = pre.clone();
        match &gate {
            None => {
                for v in u.data_mut() {
                    *v = block.ffn.activation.apply(*v);
                }
            }
            Some(g) => {
                for (v, gv) in u.data_mut().iter_mut().zip(g.data()) {
                    *v *= block.ffn.activation.apply(*gv);
                }
            }
        }
        if let Some(store) = caches.as_deref_mut() {
            store.push(BlockCache { pre, gate });
        }
        let y = matmul(&u, &block.ffn.w_down)?;
        add_into(&mut h, &y);
    }
    matmul(&h, &model.unembed)
}

/// Backward counterpart of [`base_suffix_forward`]: from dlogits to the
/// gradient at block pb's output. Residual structure per block:
/// h_out = h1 + ffn(h1) with h1 = h0 + h0*mix, so dh1 = dh_out + dffn and
/// dh0 = dh1 + dh1*mix^T.
fn base_suffix_backward<S: Scalar>(
    model: &ToyModel<S>,
    pb: usize,
    caches: &[BlockCache<S>],
    dlogits: &DenseMatrix<S>,
) -> Result<DenseMatrix<S>> {
    let mut dh = matmul(dlogits, &model.unembed.transpose())?;
    for (ci, b) in (pb + 1..model.blocks.len()).enumerate().collect::<Vec<_>>().into_iter().rev() {
        let block = &model.blocks[b];
        let cache = &caches[ci];
        let du = matmul(&dh, &block.ffn.w_down.transpose())?;
        let dffn_input = match &cache.gate {
            None => {
                let mut dpre = du;
                for (dv, pv) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
                    *dv *= block.ffn.activation.derivative(*pv);
                }
                matmul(&dpre, &block.ffn.w_up.transpose())?
            }
            Some(gate) => {
                // u = act(gate) (.) up: product rule over both paths.
                let mut dup = du.clone();
                for (dv, gv) in dup.data_mut().iter_mut().zip(gate.data()) {
                    *dv *= block.ffn.activation.apply(*gv);
                }
                let mut dgate = du;
                for ((dv, pv), gv) in
                    dgate.data_mut().iter_mut().zip(cache.pre.data()).zip(gate.data())
                {
                    *dv *= *pv * block.ffn.activation.derivative(*gv);
                }
                let w_gate = block.ffn.w_gate.as_ref().expect("validated");
                let mut d = matmul(&dup, &block.ffn.w_up.transpose())?;
                let dg = matmul(&dgate, &w_gate.transpose())?;
                add_into(&mut d, &dg);
                d
            }
        };
        let mut dh1 = dh;
        add_into(&mut dh1, &dffn_input);
        let dmix = matmul(&dh1, &block.mix.transpose())?;
        let mut dh0 = dh1;
        add_into(&mut dh0, &dmix);
        dh = dh0;
    }
    Ok(dh)
}

/// From the routed intermediate at the protected block to logits.
fn suffix_forward<S: Scalar>(
    locked: &LockedModel<S>,
    seq: &SeqData<S>,
    routed: &DenseMatrix<S>,
    caches: Option<&mut Vec<BlockCache<S>>>,
) -> Result<DenseMatrix<S>> {
    let pb = locked.protected_block;
    let y = matmul(routed, &locked.base.blocks[pb].ffn.w_down)?;
    let mut h = seq.x_pb.clone();
    add_into(&mut h, &y);
    base_suffix_forward(&locked.base, pb, h, caches)
}

/// Apply a hard candidate permutation to the protected lanes of Z.
fn route_hard<S: Scalar>(z: &DenseMatrix<S>, perm: &[usize]) -> Result<DenseMatrix<S>> {
    let mut routed = z.clone();
    for r in 0..routed.rows() {
        let row = routed.row_mut(r);
        let moved = apply_permutation(perm, &row[..perm.len()])?;
        row[..perm.len()].copy_from_slice(&moved);
    }
    Ok(routed)
}

/// Evaluate a candidate permutation's logits on a prepared sequence.
fn candidate_logits<S: Scalar>(
    locked: &LockedModel<S>,
    seq: &SeqData<S>,
    perm: &[usize],
) -> Result<DenseMatrix<S>> {
    let routed = route_hard(&seq.z_pb, perm)?;
    suffix_forward(locked, seq, &routed, None)
}

/// Mean JSD of a candidate against the recorded oracle distributions.
fn candidate_jsd<S: Scalar>(
    locked: &LockedModel<S>,
    data: &[SeqData<S>],
    perm: &[usize],
) -> Result<f64> {
    let mut acc = 0.0;
    let mut rows = 0usize;
    for seq in data {
        let logits = candidate_logits(locked, seq, perm)?;
        let targets = seq.target_probs.as_ref().expect("oracle-guided data");
        for r in 0..logits.rows() {
            let mut p: Vec<f64> = logits.row(r).iter().map(|v| v.as_f64()).collect();
            softmax_in_place(&mut p);
            let q: Vec<f64> = targets.row(r).iter().map(|v| v.as_f64()).collect();
            acc += jsd(&p, &q)?;
        }
        rows += logits.rows();
    }
    Ok(acc / rows as f64)
}

/// Next-token cross-entropy of a candidate over prepared corpus sequences.
fn candidate_ce<S: Scalar>(
    locked: &LockedModel<S>,
    data: &[SeqData<S>],
    perm: &[usize],
) -> Result<f64> {
    let mut acc = 0.0;
    let mut count = 0usize;
    for seq in data {
        let logits = candidate_logits(locked, seq, perm)?;
        for t in 0..seq.tokens.len() - 1 {
            let mut p: Vec<f64> = logits.row(t).iter().map(|v| v.as_f64()).collect();
            softmax_in_place(&mut p);
            acc -= p[seq.tokens[t + 1] as usize].max(f64::MIN_POSITIVE).ln();
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

fn candidate_fitness<S: Scalar>(
    locked: &LockedModel<S>,
    guidance: Guidance,
    data: &[SeqData<S>],
    perm: &[usize],
) -> Result<f64> {
    match guidance {
        Guidance::OracleGuided => candidate_jsd(locked, data, perm),
        Guidance::OracleLess => candidate_ce(locked, data, perm),
    }
}

/// Post-attack metrics for an executable candidate.
fn final_metrics<S: Scalar>(
    locked: &LockedModel<S>,
    oracle: &dyn Oracle<S>,
    cfg: &AttackConfig,
    perm: &[usize],
) -> Result<(Option<f64>, Option<f64>)> {
    let post_jsd = if cfg.probes.is_empty() {
        None
    } else {
        Some(mean_jsd_on(
            |seq| locked.forward_with_perm(seq, perm),
            |seq| oracle.logits(seq),
            &cfg.probes,
        )?)
    };
    let post_ppl = if cfg.corpus.is_empty() {
        None
    } else {
        Some(perplexity_on(|seq| locked.forward_with_perm(seq, perm), &cfg.corpus)?)
    };
    Ok((post_jsd, post_ppl))
}

fn guidance_sequences(cfg: &AttackConfig) -> &[Vec<u32>] {
    match cfg.guidance {
        Guidance::OracleGuided => &cfg.probes,
        Guidance::OracleLess => &cfg.corpus,
    }
}

// ---------------------------------------------------------------------------
// Genetic attack.

/// Evolve group-local permutations under tournament selection. Individual 0
/// of the initial population is the identity; crossover exchanges whole
/// permutation groups uniformly between two parents; mutation applies one
/// within-group transposition at the configured rate. Fitness evaluations
/// are independent across the population (safe to parallelize); all random
/// choices come from streams derived from the seed, so results are
/// reproducible either way.
pub fn genetic_attack<S: Scalar>(
    locked: &LockedModel<S>,
    oracle: &dyn Oracle<S>,
    cfg: &AttackConfig,
    truth: Option<&[usize]>,
) -> Result<AttackResult> {
    cfg.validate()?;
    let start = Instant::now();
    let n = locked.n();
    let m = locked.m;
    let groups = n / m;
    let attack_seed = derive_seed(cfg.seed, streams::ATTACK);
    let oracle_ref: Option<&dyn Oracle<S>> = match cfg.guidance {
        Guidance::OracleGuided => Some(oracle),
        Guidance::OracleLess => None,
    };
    let data = build_seq_data(locked, guidance_sequences(cfg), oracle_ref)?;

    let mut population: Vec<Vec<usize>> = Vec::with_capacity(cfg.population);
    population.push((0..n).collect());
    for i in 1..cfg.population {
        population.push(random_group_local_permutation(n, m, derive_seed(attack_seed, i as u64))?);
    }
    let mut fitness: Vec<f64> = population
        .iter()
        .map(|p| candidate_fitness(locked, cfg.guidance, &data, p))
        .collect::<Result<_>>()?;

    let best_index = |fit: &[f64]| {
        let mut best = 0;
        for (i, f) in fit.iter().enumerate() {
            if *f < fit[best] {
                best = i;
            }
        }
        best
    };
    let mut best = best_index(&fitness);
    let mut best_perm = population[best].clone();
    let mut best_fit = fitness[best];

    let mut rng = SplitMix64::new(derive_seed(attack_seed, u64::MAX));
    let mut generations = 0u64;
    for _ in 0..cfg.iterations {
        if let Some(limit) = cfg.time_limit {
            if start.elapsed().as_secs_f64() >= limit {
                break;
            }
        }
        let mut next: Vec<Vec<usize>> = Vec::with_capacity(cfg.population);
        next.push(best_perm.clone());
        while next.len() < cfg.population {
            let pick = |rng: &mut SplitMix64| {
                let mut winner = rng.next_below(cfg.population as u64) as usize;
                for _ in 1..cfg.tournament {
                    let c = rng.next_below(cfg.population as u64) as usize;
                    if fitness[c] < fitness[winner] {
                        winner = c;
                    }
                }
                winner
            };
            let a = pick(&mut rng);
            let b = pick(&mut rng);
            let mut child = vec![0usize; n];
            for g in 0..groups {
                let from = if rng.next_u64() & 1 == 0 { a } else { b };
                child[g * m..(g + 1) * m].copy_from_slice(&population[from][g * m..(g + 1) * m]);
            }
            if m > 1 && (rng.next_u64() as f64 / u64::MAX as f64) < cfg.mutation_rate {
                let g = rng.next_below(groups as u64) as usize;
                let i = rng.next_below(m as u64) as usize;
                let mut j = rng.next_below(m as u64) as usize;
                if i == j {
                    j = (j + 1) % m;
                }
                child.swap(g * m + i, g * m + j);
            }
            next.push(child);
        }
        population = next;
        fitness = population
            .iter()
            .map(|p| candidate_fitness(locked, cfg.guidance, &data, p))
            .collect::<Result<_>>()?;
        best = best_index(&fitness);
        if fitness[best] < best_fit {
            best_fit = fitness[best];
            best_perm = population[best].clone();
        }
        generations += 1;
    }

    let (post_jsd, post_perplexity) = final_metrics(locked, oracle, cfg, &best_perm)?;
    let fid = match truth {
        Some(t) => Some(fidelity(&best_perm, t)?),
        None => None,
    };
    Ok(AttackResult {
        method: AttackMethod::Genetic,
        guidance: cfg.guidance,
        permutation: Some(best_perm),
        argmax_projection: None,
        projection_is_permutation: None,
        key_bits: None,
        fidelity: fid,
        repaired_fidelity: None,
        post_jsd,
        post_perplexity,
        final_loss: best_fit,
        iterations: generations,
        elapsed_seconds: start.elapsed().as_secs_f64(),
        random_baseline: random_guess_fidelity(m),
    })
}

// ---------------------------------------------------------------------------
// Gradient attack over relaxed permutations.

/// The differentiable surrogate the gradient attack descends: per-group
/// logit matrices L, columns softmaxed into a relaxed routing matrix, run
/// through the fixed locked network to the guidance loss. Public so the
/// analytic gradient can be checked against finite differences.
pub struct SoftPermObjective<'a, S: Scalar> {
    locked: &'a LockedModel<S>,
    guidance: Guidance,
    data: Vec<SeqData<S>>,
    n: usize,
    m: usize,
}

impl<'a, S: Scalar> SoftPermObjective<'a, S> {
    pub fn new(
        locked: &'a LockedModel<S>,
        oracle: &dyn Oracle<S>,
        cfg: &AttackConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let oracle_ref: Option<&dyn Oracle<S>> = match cfg.guidance {
            Guidance::OracleGuided => Some(oracle),
            Guidance::OracleLess => None,
        };
        let data = build_seq_data(locked, guidance_sequences(cfg), oracle_ref)?;
        Ok(SoftPermObjective {
            locked,
            guidance: cfg.guidance,
            data,
            n: locked.n(),
            m: locked.m,
        })
    }

    pub fn groups(&self) -> usize {
        self.n / self.m
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Initial logit matrices: small Gaussian entries so every column
    /// starts near uniform.
    pub fn init(&self, seed: Seed) -> Vec<DenseMatrix<S>> {
        let mut rng = SplitMix64::new(derive_seed(seed, streams::ATTACK));
        (0..self.groups())
            .map(|_| {
                DenseMatrix::from_fn(self.m, self.m, |_, _| {
                    S::from_f64(0.01 * rng.next_gaussian())
                })
            })
            .collect()
    }

    /// Column-softmax of the logit matrices.
    pub fn relax(&self, l: &[DenseMatrix<S>]) -> Vec<DenseMatrix<S>> {
        l.iter()
            .map(|lg| {
                let mut g = lg.clone();
                for j in 0..self.m {
                    let mut col: Vec<S> = (0..self.m).map(|i| g.get(i, j)).collect();
                    softmax_in_place(&mut col);
                    for (i, v) in col.into_iter().enumerate() {
                        g.set(i, j, v);
                    }
                }
                g
            })
            .collect()
    }

    fn route_soft(&self, z: &DenseMatrix<S>, relaxed: &[DenseMatrix<S>]) -> DenseMatrix<S> {
        let mut routed = z.clone();
        for (g, gmat) in relaxed.iter().enumerate() {
            let base = g * self.m;
            for t in 0..z.rows() {
                for j in 0..self.m {
                    let mut acc = S::zero();
                    for i in 0..self.m {
                        acc += z.get(t, base + i) * gmat.get(i, j);
                    }
                    routed.set(t, base + j, acc);
                }
            }
        }
        routed
    }

    /// Loss and its gradient with respect to every logit matrix.
    pub fn loss_and_grad(&self, l: &[DenseMatrix<S>]) -> Result<(f64, Vec<DenseMatrix<S>>)> {
        self.evaluate(l, true)
    }

    pub fn loss(&self, l: &[DenseMatrix<S>]) -> Result<f64> {
        Ok(self.evaluate(l, false)?.0)
    }

    fn evaluate(
        &self,
        l: &[DenseMatrix<S>],
        with_grad: bool,
    ) -> Result<(f64, Vec<DenseMatrix<S>>)> {
        if l.len() != self.groups() || l.iter().any(|g| g.rows() != self.m || g.cols() != self.m) {
            return Err(Error::Shape(format!(
                "expected {} logit matrices of {}x{}",
                self.groups(),
                self.m,
                self.m
            )));
        }
        let relaxed = self.relax(l);
        let total_rows: usize = self
            .data
            .iter()
            .map(|s| match self.guidance {
                Guidance::OracleGuided => s.z_pb.rows(),
                Guidance::OracleLess => s.z_pb.rows() - 1,
            })
            .sum();
        let inv_total = S::from_f64(1.0 / total_rows as f64);
        let mut loss = 0.0;
        let mut dg: Vec<DenseMatrix<S>> =
            (0..self.groups()).map(|_| DenseMatrix::zeros(self.m, self.m)).collect();
        for seq in &self.data {
            let routed = self.route_soft(&seq.z_pb, &relaxed);
            let mut caches = Vec::new();
            let logits = suffix_forward(
                self.locked,
                seq,
                &routed,
                if with_grad { Some(&mut caches) } else { None },
            )?;
            let (contrib, dlogits) = loss_rows_common(
                self.guidance,
                &logits,
                &seq.tokens,
                seq.target_probs.as_ref(),
                inv_total,
                total_rows,
                with_grad,
            )?;
            loss += contrib;
            if !with_grad {
                continue;
            }
            let dy =
                base_suffix_backward(&self.locked.base, self.locked.protected_block, &caches, &dlogits)?;
            let drouted =
                matmul(&dy, &self.locked.base.blocks[self.locked.protected_block].ffn.w_down.transpose())?;
            for (g, dgm) in dg.iter_mut().enumerate() {
                let base = g * self.m;
                for i in 0..self.m {
                    for j in 0..self.m {
                        let mut acc = S::zero();
                        for t in 0..routed.rows() {
                            acc += seq.z_pb.get(t, base + i) * drouted.get(t, base + j);
                        }
                        let cur = dgm.get(i, j);
                        dgm.set(i, j, cur + acc);
                    }
                }
            }
        }
        if !with_grad {
            return Ok((loss, Vec::new()));
        }
        // Softmax Jacobian per column: dL[k][j] = p_k (dG[k][j] - sum_i p_i dG[i][j]).
        let mut dl: Vec<DenseMatrix<S>> =
            (0..self.groups()).map(|_| DenseMatrix::zeros(self.m, self.m)).collect();
        for g in 0..self.groups() {
            for j in 0..self.m {
                let mut dot = S::zero();
                for i in 0..self.m {
                    dot += relaxed[g].get(i, j) * dg[g].get(i, j);
                }
                for k in 0..self.m {
                    let p = relaxed[g].get(k, j);
                    dl[g].set(k, j, p * (dg[g].get(k, j) - dot));
                }
            }
        }
        Ok((loss, dl))
    }

}

/// Paper-literal projection of one relaxed group: per column, the row with
/// the largest entry (lowest index on ties). Entry j of the result is that
/// row. Need not form a permutation.
pub fn project_columns<S: Scalar>(g: &DenseMatrix<S>) -> Vec<usize> {
    let m = g.cols();
    (0..m)
        .map(|j| {
            let mut best = 0;
            for i in 1..m {
                if g.get(i, j) > g.get(best, j) {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Greedy repair of one relaxed group into a true permutation: repeatedly
/// take the largest remaining entry whose row and column are both free.
/// Entry i of the result is the column assigned to row i (perm[i] = j).
pub fn repair_assignment<S: Scalar>(g: &DenseMatrix<S>) -> Vec<usize> {
    let m = g.cols();
    let mut entries: Vec<(usize, usize)> = (0..m * m).map(|x| (x / m, x % m)).collect();
    entries.sort_by(|&(ia, ja), &(ib, jb)| {
        g.get(ib, jb)
            .partial_cmp(&g.get(ia, ja))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(ia.cmp(&ib))
            .then(ja.cmp(&jb))
    });
    let mut perm = vec![usize::MAX; m];
    let mut col_taken = vec![false; m];
    let mut assigned = 0;
    for (i, j) in entries {
        if perm[i] == usize::MAX && !col_taken[j] {
            perm[i] = j;
            col_taken[j] = true;
            assigned += 1;
            if assigned == m {
                break;
            }
        }
    }
    perm
}

/// Restored-index fraction of the raw column-argmax projection: column j
/// restores neuron i when it selects row i and the true key routes i to j.
pub fn projection_fidelity(projection: &[usize], truth: &[usize]) -> Result<f64> {
    if projection.len() != truth.len() || truth.is_empty() {
        return Err(Error::Input("projection and truth must have equal nonzero length".into()));
    }
    let hits = projection
        .iter()
        .enumerate()
        .filter(|&(j, &i)| i < truth.len() && truth[i] == j)
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

struct Adam<S> {
    m: Vec<DenseMatrix<S>>,
    v: Vec<DenseMatrix<S>>,
    t: i32,
}

impl<S: Scalar> Adam<S> {
    fn new(shapes: &[DenseMatrix<S>]) -> Self {
        Adam {
            m: shapes.iter().map(|s| DenseMatrix::zeros(s.rows(), s.cols())).collect(),
            v: shapes.iter().map(|s| DenseMatrix::zeros(s.rows(), s.cols())).collect(),
            t: 0,
        }
    }

    /// One bias-corrected update of every parameter matrix.
    fn step(&mut self, params: &mut [DenseMatrix<S>], grads: &[DenseMatrix<S>], cfg: &AttackConfig) {
        self.t += 1;
        let lr = S::from_f64(cfg.learning_rate);
        let b1 = S::from_f64(cfg.beta1);
        let b2 = S::from_f64(cfg.beta2);
        let eps = S::from_f64(cfg.epsilon);
        let c1 = S::from_f64(1.0 - cfg.beta1.powi(self.t));
        let c2 = S::from_f64(1.0 - cfg.beta2.powi(self.t));
        for ((p, g), (mm, vv)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((pv, &gv), (mv, sv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(mm.data_mut().iter_mut().zip(vv.data_mut().iter_mut()))
            {
                *mv = b1 * *mv + (S::one() - b1) * gv;
                *sv = b2 * *sv + (S::one() - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *sv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

fn ensure_finite(loss: f64, iteration: u64, max_param: f64) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    Err(Error::Numeric(format!(
        "non-finite loss {loss} at iteration {iteration} (max |parameter| {max_param:.3e})"
    )))
}

fn max_abs<S: Scalar>(mats: &[DenseMatrix<S>]) -> f64 {
    mats.iter()
        .flat_map(|m| m.data().iter())
        .map(|v| v.as_f64().abs())
        .fold(0.0f64, f64::max)
}

/// Relax, descend, project. Returns both the raw per-column argmax
/// (headline fidelity) and a repaired true permutation (used for the
/// post-attack metrics, since only a permutation is executable).
pub fn gradient_attack<S: Scalar>(
    locked: &LockedModel<S>,
    oracle: &dyn Oracle<S>,
    cfg: &AttackConfig,
    truth: Option<&[usize]>,
) -> Result<AttackResult> {
    let start = Instant::now();
    let objective = SoftPermObjective::new(locked, oracle, cfg)?;
    let m = locked.m;
    let mut l = objective.init(cfg.seed);
    let mut adam = Adam::new(&l);
    let mut iterations = 0u64;
    let mut last_loss = f64::NAN;
    for it in 0..cfg.iterations {
        if let Some(limit) = cfg.time_limit {
            if start.elapsed().as_secs_f64() >= limit {
                break;
            }
        }
        let (loss, grads) = objective.loss_and_grad(&l)?;
        ensure_finite(loss, it, max_abs(&l))?;
        adam.step(&mut l, &grads, cfg);
        last_loss = loss;
        iterations += 1;
    }
    if iterations == 0 {
        last_loss = objective.loss(&l)?;
        ensure_finite(last_loss, 0, max_abs(&l))?;
    }

    let relaxed = objective.relax(&l);
    let groups = objective.groups();
    let mut projection = Vec::with_capacity(locked.n());
    let mut repaired = Vec::with_capacity(locked.n());
    for (g, gmat) in relaxed.iter().enumerate() {
        let base = g * m;
        for row in project_columns(gmat) {
            projection.push(base + row);
        }
        for col in repair_assignment(gmat) {
            repaired.push(base + col);
        }
    }
    debug_assert_eq!(projection.len(), groups * m);
    // Column claims are a valid routing iff no two columns claim one row.
    let projection_is_permutation = is_permutation(&projection);

    let (post_jsd, post_perplexity) = final_metrics(locked, oracle, cfg, &repaired)?;
    let (fid, repaired_fid) = match truth {
        Some(t) => (
            Some(projection_fidelity(&projection, t)?),
            Some(fidelity(&repaired, t)?),
        ),
        None => (None, None),
    };
    Ok(AttackResult {
        method: AttackMethod::Gradient,
        guidance: cfg.guidance,
        permutation: Some(repaired),
        argmax_projection: Some(projection),
        projection_is_permutation: Some(projection_is_permutation),
        key_bits: None,
        fidelity: fid,
        repaired_fidelity: repaired_fid,
        post_jsd,
        post_perplexity,
        final_loss: last_loss,
        iterations,
        elapsed_seconds: start.elapsed().as_secs_f64(),
        random_baseline: random_guess_fidelity(m),
    })
}

// ---------------------------------------------------------------------------
// Gradient attack on the negation baseline.

/// Differentiable surrogate for the negation scheme: key bit j becomes
/// tanh(theta_j) scaling the pre-activation of protected neuron j, so the
/// sign of theta plays the bit. Public for finite-difference checks.
pub struct SoftNegationObjective<'a, S: Scalar> {
    hpnn: &'a HpnnModel<S>,
    guidance: Guidance,
    /// Iteration-invariant caches: FFN input at the protected block plus
    /// raw (unscaled) pre-activations.
    data: Vec<HpnnSeqData<S>>,
}

struct HpnnSeqData<S> {
    tokens: Vec<u32>,
    x_pb: DenseMatrix<S>,
    pre_raw: DenseMatrix<S>,
    gate_raw: Option<DenseMatrix<S>>,
    target_probs: Option<DenseMatrix<S>>,
}

impl<'a, S: Scalar> SoftNegationObjective<'a, S> {
    pub fn new(
        hpnn: &'a HpnnModel<S>,
        oracle: &dyn Oracle<S>,
        cfg: &AttackConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let pb = hpnn.protected_block;
        let mut data = Vec::new();
        for tokens in guidance_sequences(cfg) {
            let mut h = hpnn.base.embed_tokens(tokens)?;
            for b in 0..pb {
                residual_mix(&mut h, &hpnn.base.blocks[b].mix)?;
                let y = hpnn.base.blocks[b].ffn.forward(&h)?;
                add_into(&mut h, &y);
            }
            residual_mix(&mut h, &hpnn.base.blocks[pb].mix)?;
            let ffn = &hpnn.base.blocks[pb].ffn;
            let pre_raw = matmul(&h, &ffn.w_up)?;
            let gate_raw = match ffn.kind {
                FfnKind::Standard => None,
                FfnKind::Gated => Some(matmul(&h, ffn.w_gate.as_ref().expect("validated"))?),
            };
            let target_probs = match cfg.guidance {
                Guidance::OracleGuided => {
                    let mut probs = oracle.logits(tokens)?;
                    for r in 0..probs.rows() {
                        softmax_in_place(probs.row_mut(r));
                    }
                    Some(probs)
                }
                Guidance::OracleLess => None,
            };
            data.push(HpnnSeqData { tokens: tokens.clone(), x_pb: h, pre_raw, gate_raw, target_probs });
        }
        Ok(SoftNegationObjective { hpnn, guidance: cfg.guidance, data })
    }

    pub fn bits(&self) -> usize {
        self.hpnn.neurons.len()
    }

    /// Random initial thetas (zero-mean, scale 1/2), so the starting guess
    /// is itself random.
    pub fn init(&self, seed: Seed) -> Vec<S> {
        let mut rng = SplitMix64::new(derive_seed(seed, streams::ATTACK));
        (0..self.bits()).map(|_| S::from_f64(0.5 * rng.next_gaussian())).collect()
    }

    pub fn loss(&self, theta: &[S]) -> Result<f64> {
        Ok(self.evaluate(theta, false)?.0)
    }

    pub fn loss_and_grad(&self, theta: &[S]) -> Result<(f64, Vec<S>)> {
        self.evaluate(theta, true)
    }

    fn evaluate(&self, theta: &[S], with_grad: bool) -> Result<(f64, Vec<S>)> {
        if theta.len() != self.bits() {
            return Err(Error::Shape(format!(
                "{} thetas for {} key bits",
                theta.len(),
                self.bits()
            )));
        }
        let pb = self.hpnn.protected_block;
        let ffn = &self.hpnn.base.blocks[pb].ffn;
        let scales: Vec<S> = theta.iter().map(|t| t.tanh()).collect();
        let total_rows: usize = self
            .data
            .iter()
            .map(|s| match self.guidance {
                Guidance::OracleGuided => s.pre_raw.rows(),
                Guidance::OracleLess => s.pre_raw.rows() - 1,
            })
            .sum();
        let inv_total = S::from_f64(1.0 / total_rows as f64);
        let mut loss = 0.0;
        let mut dtheta = vec![S::zero(); theta.len()];
        for seq in &self.data {
            // Scale the protected columns, activate, finish the block.
            let mut pre = seq.pre_raw.clone();
            let mut gate = seq.gate_raw.clone();
            for (&neuron, &s) in self.hpnn.neurons.iter().zip(&scales) {
                pre.scale_column(neuron, s);
                if let Some(g) = gate.as_mut() {
                    g.scale_column(neuron, s);
                }
            }
            let mut u = pre.clone();
            match &gate {
                None => {
                    for v in u.data_mut() {
                        *v = ffn.activation.apply(*v);
                    }
                }
                Some(g) => {
                    for (v, gv) in u.data_mut().iter_mut().zip(g.data()) {
                        *v *= ffn.activation.apply(*gv);
                    }
                }
            }
            let y = matmul(&u, &ffn.w_down)?;
            let mut h = seq.x_pb.clone();
            add_into(&mut h, &y);
            let mut caches = Vec::new();
            let logits = base_suffix_forward(
                &self.hpnn.base,
                pb,
                h,
                if with_grad { Some(&mut caches) } else { None },
            )?;
            let (contrib, dlogits) = loss_rows_common(
                self.guidance,
                &logits,
                &seq.tokens,
                seq.target_probs.as_ref(),
                inv_total,
                total_rows,
                with_grad,
            )?;
            loss += contrib;
            if !with_grad {
                continue;
            }
            let dy = base_suffix_backward(&self.hpnn.base, pb, &caches, &dlogits)?;
            let du = matmul(&dy, &ffn.w_down.transpose())?;
            match &gate {
                None => {
                    for (j, (&neuron, &s)) in
                        self.hpnn.neurons.iter().zip(&scales).enumerate()
                    {
                        let sech2 = S::one() - s * s;
                        let mut acc = S::zero();
                        for t in 0..du.rows() {
                            let d_pre_scaled =
                                du.get(t, neuron) * ffn.activation.derivative(pre.get(t, neuron));
                            acc += d_pre_scaled * seq.pre_raw.get(t, neuron);
                        }
                        dtheta[j] += acc * sech2;
                    }
                }
                Some(g) => {
                    for (j, (&neuron, &s)) in
                        self.hpnn.neurons.iter().zip(&scales).enumerate()
                    {
                        let sech2 = S::one() - s * s;
                        let mut acc = S::zero();
                        for t in 0..du.rows() {
                            let duv = du.get(t, neuron);
                            let du_scaled = duv * ffn.activation.apply(g.get(t, neuron));
                            let dg_scaled = duv
                                * pre.get(t, neuron)
                                * ffn.activation.derivative(g.get(t, neuron));
                            acc += du_scaled * seq.pre_raw.get(t, neuron)
                                + dg_scaled * seq.gate_raw.as_ref().expect("gated").get(t, neuron);
                        }
                        dtheta[j] += acc * sech2;
                    }
                }
            }
        }
        Ok((loss, dtheta))
    }
}

/// Per-sequence loss contribution and dloss/dlogits, shared by both
/// gradient surrogates. Oracle-guided rows contribute JSD against the
/// recorded distribution; oracle-less rows contribute next-token
/// cross-entropy. Both are averaged over `total_rows`. The seed gradients:
/// dJSD/dp_k = ln(p_k/mid_k)/2 (taking 0*ln 0 = 0), dCE/dlogit = p - onehot,
/// with the JSD case pushed through the output softmax Jacobian.
fn loss_rows_common<S: Scalar>(
    guidance: Guidance,
    logits: &DenseMatrix<S>,
    tokens: &[u32],
    targets: Option<&DenseMatrix<S>>,
    inv_total: S,
    total_rows: usize,
    with_grad: bool,
) -> Result<(f64, DenseMatrix<S>)> {
    let mut dlogits = DenseMatrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    match guidance {
        Guidance::OracleGuided => {
            let targets = targets.expect("oracle-guided data");
            for r in 0..logits.rows() {
                let mut p: Vec<S> = logits.row(r).to_vec();
                softmax_in_place(&mut p);
                let q = targets.row(r);
                let mut row_loss = 0.0;
                let half = S::from_f64(0.5);
                let mut gp: Vec<S> = vec![S::zero(); p.len()];
                for k in 0..p.len() {
                    let (pk, qk) = (p[k].as_f64(), q[k].as_f64());
                    // 2p/(p+q) instead of p/mid: flush-proof, stays in (0, 2].
                    let sum = pk + qk;
                    if pk > 0.0 {
                        let ratio = (2.0 * pk / sum).ln();
                        row_loss += 0.5 * pk * ratio;
                        if with_grad {
                            gp[k] = half * S::from_f64(ratio);
                        }
                    }
                    if qk > 0.0 {
                        row_loss += 0.5 * qk * (2.0 * qk / sum).ln();
                    }
                }
                loss += row_loss.max(0.0) / total_rows as f64;
                if with_grad {
                    let mut dot = S::zero();
                    for k in 0..p.len() {
                        dot += p[k] * gp[k];
                    }
                    for k in 0..p.len() {
                        dlogits.set(r, k, p[k] * (gp[k] - dot) * inv_total);
                    }
                }
            }
        }
        Guidance::OracleLess => {
            for t in 0..tokens.len() - 1 {
                let mut p: Vec<S> = logits.row(t).to_vec();
                softmax_in_place(&mut p);
                let target = tokens[t + 1] as usize;
                loss -= p[target].as_f64().max(f64::MIN_POSITIVE).ln() / total_rows as f64;
                if with_grad {
                    for k in 0..p.len() {
                        let indicator = if k == target { S::one() } else { S::zero() };
                        dlogits.set(t, k, (p[k] - indicator) * inv_total);
                    }
                }
            }
        }
    }
    Ok((loss, dlogits))
}

/// Gradient attack on the negation baseline: Adam on the tanh relaxation,
/// bits thresholded at zero (negative means the bit is set).
pub fn hpnn_gradient_attack<S: Scalar>(
    hpnn: &HpnnModel<S>,
    oracle: &dyn Oracle<S>,
    cfg: &AttackConfig,
    truth: Option<&[bool]>,
) -> Result<AttackResult> {
    let start = Instant::now();
    let objective = SoftNegationObjective::new(hpnn, oracle, cfg)?;
    let mut theta = objective.init(cfg.seed);
    let mut mstate = vec![S::zero(); theta.len()];
    let mut vstate = vec![S::zero(); theta.len()];
    let mut iterations = 0u64;
    let mut last_loss = f64::NAN;
    for it in 0..cfg.iterations {
        if let Some(limit) = cfg.time_limit {
            if start.elapsed().as_secs_f64() >= limit {
                break;
            }
        }
        let (loss, grads) = objective.loss_and_grad(&theta)?;
        let max_param = theta.iter().map(|t| t.as_f64().abs()).fold(0.0f64, f64::max);
        ensure_finite(loss, it, max_param)?;
        let t = (it + 1) as i32;
        let lr = S::from_f64(cfg.learning_rate);
        let b1 = S::from_f64(cfg.beta1);
        let b2 = S::from_f64(cfg.beta2);
        let eps = S::from_f64(cfg.epsilon);
        let c1 = S::from_f64(1.0 - cfg.beta1.powi(t));
        let c2 = S::from_f64(1.0 - cfg.beta2.powi(t));
        for ((p, &g), (mv, vv)) in theta
            .iter_mut()
            .zip(&grads)
            .zip(mstate.iter_mut().zip(vstate.iter_mut()))
        {
            *mv = b1 * *mv + (S::one() - b1) * g;
            *vv = b2 * *vv + (S::one() - b2) * g * g;
            *p -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
        }
        last_loss = loss;
        iterations += 1;
    }
    if iterations == 0 {
        last_loss = objective.loss(&theta)?;
        let max_param = theta.iter().map(|t| t.as_f64().abs()).fold(0.0f64, f64::max);
        ensure_finite(last_loss, 0, max_param)?;
    }

    // Negative relaxed values mean the bit is set.
    let bits: Vec<bool> = theta.iter().map(|t| t.as_f64() < 0.0).collect();
    let post_jsd = if cfg.probes.is_empty() {
        None
    } else {
        Some(mean_jsd_on(
            |seq| hpnn.forward_with_bits(seq, &bits),
            |seq| oracle.logits(seq),
            &cfg.probes,
        )?)
    };
    let post_perplexity = if cfg.corpus.is_empty() {
        None
    } else {
        Some(perplexity_on(|seq| hpnn.forward_with_bits(seq, &bits), &cfg.corpus)?)
    };
    let fid = match truth {
        Some(t) => Some(bit_fidelity(&bits, t)?),
        None => None,
    };
    Ok(AttackResult {
        method: AttackMethod::HpnnGradient,
        guidance: cfg.guidance,
        permutation: None,
        argmax_projection: None,
        projection_is_permutation: None,
        key_bits: Some(bits),
        fidelity: fid,
        repaired_fidelity: None,
        post_jsd,
        post_perplexity,
        final_loss: last_loss,
        iterations,
        elapsed_seconds: start.elapsed().as_secs_f64(),
        random_baseline: 0.5,
    })
}
