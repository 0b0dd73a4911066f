//! Weight folding and the locked-model runtime.
//!
//! Locking rewrites one FFN so that a secret group-local permutation of its
//! protected neurons becomes load-bearing. Three orthogonal matrices are
//! involved, all d_ff x d_ff:
//!
//! * `P`  moves the protected neurons to the front lanes (a permutation),
//! * `R`  = blockdiag(H_n, I) with H_n a randomized Hadamard matrix, and
//! * `K`  = blockdiag(G, I) with G the secret permutation, realized at run
//!   time by the key-controlled switch fabric.
//!
//! The stored weights fold P into the up projection and K^T R^T P^T into the
//! down projection:
//!
//! ```text
//! W~up = W_up P        (and W~gate = W_gate P for gated FFNs)
//! W~down = K^T R^T P^T W_down
//! Y = sigma(X W~up) . R . [fabric K] . W~down
//! ```
//!
//! R stays a runtime step because the fabric sits between R and the down
//! projection; it is stored as (seed, n) and applied with a fast
//! Walsh-Hadamard transform. With the correct key the two permutations and
//! the rotation cancel and the output is the original FFN's; wrong keys
//! misroute the rotated lanes.

use crate::error::{Error, Result};
use crate::fabric::{key_material, random_group_local_permutation, GroupedKey, KeyBits};
use crate::linalg::{
    apply_permutation, fwht_apply, is_permutation, matmul, permutation_matrix,
    randomized_hadamard, DenseMatrix,
};
use crate::model::{FfnBlock, FfnKind, ToyModel};
use crate::outlier::{outliers_from_means, reports_from_stats, score_neurons, select_protected_block, NeuronScores, OutlierReport};
use crate::rng::{derive_seed, streams, Seed};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Everything needed to lock one FFN. `protected_neurons` is in rank order
/// (strongest first); `key_perm` is the secret group-local permutation over
/// the first n lanes. This type is deliberately not serializable: it carries
/// the key, and must never end up inside a stored artifact.
#[derive(Debug, Clone)]
pub struct LockSpec {
    pub protected_block: usize,
    pub protected_neurons: Vec<usize>,
    pub group_size: usize,
    pub hadamard_seed: Seed,
    pub key_perm: Vec<usize>,
    pub tau: f64,
}

impl LockSpec {
    pub fn n(&self) -> usize {
        self.protected_neurons.len()
    }

    pub fn validate(&self, d_ff: usize) -> Result<()> {
        let n = self.n();
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::Dimension(format!(
                "protected width {n} must be a nonzero power of two"
            )));
        }
        if n > d_ff {
            return Err(Error::Input(format!("{n} protected neurons in a {d_ff}-wide FFN")));
        }
        let m = self.group_size;
        if m == 0 || !m.is_power_of_two() {
            return Err(Error::Dimension(format!("group size {m} must be a power of two")));
        }
        if n % m != 0 {
            return Err(Error::Dimension(format!("group size {m} does not divide {n}")));
        }
        let mut seen = vec![false; d_ff];
        for &j in &self.protected_neurons {
            if j >= d_ff {
                return Err(Error::Input(format!("protected neuron {j} out of range {d_ff}")));
            }
            if seen[j] {
                return Err(Error::Input(format!("protected neuron {j} listed twice")));
            }
            seen[j] = true;
        }
        if self.key_perm.len() != n {
            return Err(Error::Input(format!(
                "key permutation covers {} lanes, expected {n}",
                self.key_perm.len()
            )));
        }
        // Full group-locality validation (including m = 1 degeneracy).
        key_material(&self.key_perm, m)?;
        Ok(())
    }
}

/// The front permutation of Eq-style transposition products: a permutation
/// `perm` with `perm[protected[t]] = t`, built by selection-style swaps so the
/// remaining lanes keep a deterministic order. `perm[i]` is where lane i's
/// value moves.
pub fn front_permutation(protected: &[usize], d_ff: usize) -> Result<Vec<usize>> {
    if protected.is_empty() || protected.len() > d_ff {
        return Err(Error::Input(format!(
            "{} protected neurons for width {d_ff}",
            protected.len()
        )));
    }
    // arrangement[pos] = which original lane currently sits at pos
    let mut arrangement: Vec<usize> = (0..d_ff).collect();
    for (t, &want) in protected.iter().enumerate() {
        if want >= d_ff {
            return Err(Error::Input(format!("protected neuron {want} out of range {d_ff}")));
        }
        let pos = arrangement[t..]
            .iter()
            .position(|&v| v == want)
            .map(|p| p + t)
            .ok_or_else(|| Error::Input(format!("protected neuron {want} listed twice")))?;
        arrangement.swap(t, pos);
    }
    let mut perm = vec![0usize; d_ff];
    for (pos, &orig) in arrangement.iter().enumerate() {
        perm[orig] = pos;
    }
    Ok(perm)
}

/// The runtime rotation R_n, stored as its sign diagonal. An empty sign
/// vector means R = I (the ablation variant without rotation).
#[derive(Debug, Clone, PartialEq)]
pub struct Rotation<S> {
    n: usize,
    signs: Vec<S>,
}

impl<S: Scalar> Rotation<S> {
    pub fn randomized(n: usize, seed: Seed) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::Dimension(format!(
                "rotation width {n} must be a nonzero power of two"
            )));
        }
        if n > crate::linalg::MAX_DIM {
            return Err(Error::Resource(format!(
                "rotation width {n} exceeds the {} cap",
                crate::linalg::MAX_DIM
            )));
        }
        Ok(Rotation { n, signs: crate::linalg::hadamard_signs(n, seed) })
    }

    pub fn identity(n: usize) -> Self {
        Rotation { n, signs: Vec::new() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_identity(&self) -> bool {
        self.signs.is_empty()
    }

    /// z[0..n] <- z[0..n] * R_n for a row vector z.
    pub fn apply_row(&self, row: &mut [S]) {
        if self.is_identity() {
            return;
        }
        debug_assert!(row.len() >= self.n);
        let scale = S::from_f64(1.0 / (self.n as f64).sqrt());
        // n is a validated power of two, so the transform cannot fail.
        fwht_apply(&mut row[..self.n]).expect("power-of-two slice");
        for (v, &s) in row[..self.n].iter_mut().zip(&self.signs) {
            *v *= s * scale;
        }
    }

    pub fn apply_rows(&self, z: &mut DenseMatrix<S>) {
        if self.is_identity() {
            return;
        }
        for r in 0..z.rows() {
            self.apply_row(z.row_mut(r));
        }
    }

    /// Fold R^T into the first n rows of a weight matrix: per column, a
    /// Walsh-Hadamard transform down the rows followed by the sign/scale
    /// diagonal.
    pub fn fold_into_rows(&self, w: &mut DenseMatrix<S>) {
        if self.is_identity() {
            return;
        }
        debug_assert!(w.rows() >= self.n);
        let scale = S::from_f64(1.0 / (self.n as f64).sqrt());
        let mut column = vec![S::zero(); self.n];
        for c in 0..w.cols() {
            for (i, v) in column.iter_mut().enumerate() {
                *v = w.get(i, c);
            }
            fwht_apply(&mut column).expect("power-of-two slice");
            for i in 0..self.n {
                w.set(i, c, column[i] * self.signs[i] * scale);
            }
        }
    }

    /// Dense n x n block, for oracles and on-array execution.
    pub fn dense_block(&self) -> DenseMatrix<S> {
        if self.is_identity() {
            return DenseMatrix::identity(self.n);
        }
        let mut h = crate::linalg::sylvester_hadamard::<S>(self.n.trailing_zeros())
            .expect("width validated at construction");
        let scale = S::from_f64(1.0 / (self.n as f64).sqrt());
        for (j, &s) in self.signs.iter().enumerate() {
            h.scale_column(j, s * scale);
        }
        h
    }

    /// Dense d_ff x d_ff blockdiag(R_n, I).
    pub fn dense_full(&self, d_ff: usize) -> DenseMatrix<S> {
        let block = self.dense_block();
        let mut r = DenseMatrix::identity(d_ff);
        for i in 0..self.n {
            for j in 0..self.n {
                r.set(i, j, block.get(i, j));
            }
        }
        r
    }

    pub fn cast<T: Scalar>(&self) -> Rotation<T> {
        Rotation {
            n: self.n,
            signs: self.signs.iter().map(|s| T::from_f64(s.as_f64())).collect(),
        }
    }
}

/// Dense versions of the three transform matrices, for testing and analysis.
#[derive(Debug, Clone)]
pub struct OrthogonalSet<S> {
    pub p: DenseMatrix<S>,
    pub r: DenseMatrix<S>,
    pub k: DenseMatrix<S>,
    /// The front permutation underlying P.
    pub front: Vec<usize>,
}

pub fn build_orthogonal_set<S: Scalar>(spec: &LockSpec, d_ff: usize) -> Result<OrthogonalSet<S>> {
    spec.validate(d_ff)?;
    let n = spec.n();
    let front = front_permutation(&spec.protected_neurons, d_ff)?;
    let p = permutation_matrix(&front)?;
    let r_n: DenseMatrix<S> = randomized_hadamard(n, spec.hadamard_seed)?;
    let mut r = DenseMatrix::identity(d_ff);
    for i in 0..n {
        for j in 0..n {
            r.set(i, j, r_n.get(i, j));
        }
    }
    let mut k = DenseMatrix::zeros(d_ff, d_ff);
    for (i, &pi) in spec.key_perm.iter().enumerate() {
        k.set(i, pi, S::one());
    }
    for i in n..d_ff {
        k.set(i, i, S::one());
    }
    Ok(OrthogonalSet { p, r, k, front })
}

/// Reorder every row's entries: out[perm[j]] = in[j] per row (right-multiply
/// by the permutation matrix of `perm`).
fn permute_columns<S: Scalar>(w: &DenseMatrix<S>, perm: &[usize]) -> DenseMatrix<S> {
    let mut out = DenseMatrix::zeros(w.rows(), w.cols());
    for r in 0..w.rows() {
        let permuted = apply_permutation(perm, w.row(r)).expect("validated permutation");
        out.row_mut(r).copy_from_slice(&permuted);
    }
    out
}

/// Move whole rows: row j of the input lands at row perm[j] (left-multiply by
/// the transpose of the permutation matrix).
fn permute_rows<S: Scalar>(w: &DenseMatrix<S>, perm: &[usize]) -> DenseMatrix<S> {
    let mut out = DenseMatrix::zeros(w.rows(), w.cols());
    for (j, &target) in perm.iter().enumerate() {
        out.row_mut(target).copy_from_slice(w.row(j));
    }
    out
}

fn permute_first_rows_in_place<S: Scalar>(w: &mut DenseMatrix<S>, perm: &[usize]) {
    let n = perm.len();
    let snapshot: Vec<Vec<S>> = (0..n).map(|i| w.row(i).to_vec()).collect();
    for (i, &target) in perm.iter().enumerate() {
        w.row_mut(target).copy_from_slice(&snapshot[i]);
    }
}

/// A locked FFN plus the metadata needed to run it: folded weights, the
/// runtime rotation, and the fabric group size.
#[derive(Debug, Clone, PartialEq)]
pub struct LockedFfn<S> {
    pub ffn: FfnBlock<S>,
    pub m: usize,
    pub rotation: Rotation<S>,
}

impl<S: Scalar> LockedFfn<S> {
    pub fn n(&self) -> usize {
        self.rotation.n()
    }

    pub fn d_model(&self) -> usize {
        self.ffn.d_model()
    }

    pub fn d_ff(&self) -> usize {
        self.ffn.d_ff()
    }

    /// sigma(X W~up) with R already applied: the lanes the fabric sees.
    pub fn rotated_intermediate(&self, x: &DenseMatrix<S>) -> Result<DenseMatrix<S>> {
        let mut z = self.ffn.intermediate(x)?;
        self.rotation.apply_rows(&mut z);
        Ok(z)
    }

    /// Run with an explicit candidate permutation in place of the fabric.
    pub fn forward_with_perm(&self, x: &DenseMatrix<S>, perm: &[usize]) -> Result<DenseMatrix<S>> {
        if perm.len() != self.n() || !is_permutation(perm) {
            return Err(Error::Input(format!(
                "candidate permutation must cover exactly {} lanes",
                self.n()
            )));
        }
        let mut z = self.rotated_intermediate(x)?;
        for r in 0..z.rows() {
            let row = z.row_mut(r);
            let moved = apply_permutation(perm, &row[..perm.len()])?;
            row[..perm.len()].copy_from_slice(&moved);
        }
        matmul(&z, &self.ffn.w_down)
    }
}

/// Run a locked FFN with fabric key bits: rotate, route every row's first n
/// lanes through the Benes groups, then the folded down projection.
pub fn run_locked_ffn<S: Scalar>(
    locked: &LockedFfn<S>,
    bits: &KeyBits,
    x: &DenseMatrix<S>,
) -> Result<DenseMatrix<S>> {
    if bits.n != locked.n() || bits.m != locked.m {
        return Err(Error::Input(format!(
            "key is shaped (n={}, m={}), lock expects (n={}, m={})",
            bits.n,
            bits.m,
            locked.n(),
            locked.m
        )));
    }
    bits.validate()?;
    let mut z = locked.rotated_intermediate(x)?;
    for r in 0..z.rows() {
        bits.apply_lanes(z.row_mut(r))?;
    }
    matmul(&z, &locked.ffn.w_down)
}

/// Fold the lock into one FFN's weights. Returns the folded block and the
/// runtime rotation. `rotate = false` builds the ablation variant with R = I.
pub fn fold_weights<S: Scalar>(
    ffn: &FfnBlock<S>,
    spec: &LockSpec,
    rotate: bool,
) -> Result<(FfnBlock<S>, Rotation<S>)> {
    spec.validate(ffn.d_ff())?;
    let perm = front_permutation(&spec.protected_neurons, ffn.d_ff())?;
    let w_up = permute_columns(&ffn.w_up, &perm);
    let w_gate = ffn.w_gate.as_ref().map(|g| permute_columns(g, &perm));
    let mut w_down = permute_rows(&ffn.w_down, &perm);
    let rotation = if rotate {
        Rotation::randomized(spec.n(), spec.hadamard_seed)?
    } else {
        Rotation::identity(spec.n())
    };
    rotation.fold_into_rows(&mut w_down);
    permute_first_rows_in_place(&mut w_down, &spec.key_perm);
    let folded = FfnBlock { kind: ffn.kind, activation: ffn.activation, w_up, w_gate, w_down };
    folded.validate()?;
    Ok((folded, rotation))
}

/// Dense-matrix oracle for the fold: straight matrix products with the
/// transform set. Slow; used to cross-check `fold_weights`.
pub fn fold_weights_dense<S: Scalar>(
    ffn: &FfnBlock<S>,
    set: &OrthogonalSet<S>,
) -> Result<FfnBlock<S>> {
    let w_up = matmul(&ffn.w_up, &set.p)?;
    let w_gate = match &ffn.w_gate {
        Some(g) => Some(matmul(g, &set.p)?),
        None => None,
    };
    let pt = set.p.transpose();
    let rt = set.r.transpose();
    let kt = set.k.transpose();
    let w_down = matmul(&kt, &matmul(&rt, &matmul(&pt, &ffn.w_down)?)?)?;
    let folded = FfnBlock { kind: ffn.kind, activation: ffn.activation, w_up, w_gate, w_down };
    folded.validate()?;
    Ok(folded)
}

/// A model whose protected block's FFN holds folded weights. The key is not
/// stored anywhere in this type; supply it per forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LockedModel<S> {
    pub base: ToyModel<S>,
    pub protected_block: usize,
    pub m: usize,
    pub hadamard_seed: Seed,
    rotation: Rotation<S>,
}

impl<S: Scalar> LockedModel<S> {
    pub fn n(&self) -> usize {
        self.rotation.n()
    }

    pub fn rotation(&self) -> &Rotation<S> {
        &self.rotation
    }

    pub fn rotated(&self) -> bool {
        !self.rotation.is_identity()
    }

    pub fn protected_ffn(&self) -> LockedFfn<S> {
        LockedFfn {
            ffn: self.base.blocks[self.protected_block].ffn.clone(),
            m: self.m,
            rotation: self.rotation.clone(),
        }
    }

    fn forward_with_lanes<F>(&self, tokens: &[u32], mut lanes: F) -> Result<DenseMatrix<S>>
    where
        F: FnMut(&mut [S]) -> Result<()>,
    {
        let pb = self.protected_block;
        let rotation = &self.rotation;
        self.base.forward_with(tokens, |b, ffn, x| {
            if b != pb {
                return ffn.forward(x);
            }
            let mut z = ffn.intermediate(x)?;
            rotation.apply_rows(&mut z);
            for r in 0..z.rows() {
                lanes(z.row_mut(r))?;
            }
            matmul(&z, &ffn.w_down)
        })
    }

    /// Logits with a candidate permutation standing in for the fabric.
    pub fn forward_with_perm(&self, tokens: &[u32], perm: &[usize]) -> Result<DenseMatrix<S>> {
        if perm.len() != self.n() || !is_permutation(perm) {
            return Err(Error::Input(format!(
                "candidate permutation must cover exactly {} lanes",
                self.n()
            )));
        }
        self.forward_with_lanes(tokens, |row| {
            let moved = apply_permutation(perm, &row[..perm.len()])?;
            row[..perm.len()].copy_from_slice(&moved);
            Ok(())
        })
    }

    /// Logits with fabric key bits.
    pub fn forward_with_key(&self, tokens: &[u32], bits: &KeyBits) -> Result<DenseMatrix<S>> {
        if bits.n != self.n() || bits.m != self.m {
            return Err(Error::Input(format!(
                "key is shaped (n={}, m={}), lock expects (n={}, m={})",
                bits.n,
                bits.m,
                self.n(),
                self.m
            )));
        }
        bits.validate()?;
        self.forward_with_lanes(tokens, |row| bits.apply_lanes(row))
    }

    pub fn cast<T: Scalar>(&self) -> LockedModel<T> {
        LockedModel {
            base: self.base.cast(),
            protected_block: self.protected_block,
            m: self.m,
            hadamard_seed: self.hadamard_seed,
            rotation: self.rotation.cast(),
        }
    }
}

/// Lock a model: fold the protected block's FFN and return the runnable
/// locked model plus the key material for the fabric.
pub fn lock_model<S: Scalar>(
    model: &ToyModel<S>,
    spec: &LockSpec,
) -> Result<(LockedModel<S>, GroupedKey)> {
    lock_model_with(model, spec, true)
}

/// As `lock_model`, with the rotation optionally disabled (ablation runs).
pub fn lock_model_with<S: Scalar>(
    model: &ToyModel<S>,
    spec: &LockSpec,
    rotate: bool,
) -> Result<(LockedModel<S>, GroupedKey)> {
    model.validate()?;
    if spec.protected_block >= model.blocks.len() {
        return Err(Error::Input(format!(
            "protected block {} out of {} blocks",
            spec.protected_block,
            model.blocks.len()
        )));
    }
    let ffn = &model.blocks[spec.protected_block].ffn;
    let (folded, rotation) = fold_weights(ffn, spec, rotate)?;
    let key = key_material(&spec.key_perm, spec.group_size)?;
    let mut base = model.clone();
    base.blocks[spec.protected_block].ffn = folded;
    Ok((
        LockedModel {
            base,
            protected_block: spec.protected_block,
            m: spec.group_size,
            hadamard_seed: spec.hadamard_seed,
            rotation,
        },
        key,
    ))
}

// ---------------------------------------------------------------------------
// Lock planning: outlier detection -> neuron scoring -> spec.

#[derive(Debug, Clone)]
pub struct PlanOptions {
    pub tau: f64,
    pub n: usize,
    pub m: usize,
    /// Lock this block even if outlier detection prefers another (or none).
    pub force_block: Option<usize>,
    pub seed: Seed,
}

#[derive(Debug, Clone)]
pub struct LockPlan {
    pub spec: LockSpec,
    pub reports: Vec<OutlierReport>,
    pub scores: NeuronScores,
    /// Threshold that actually produced the outlier set (may be lower than
    /// requested when a forced block showed none at the requested tau).
    pub effective_tau: f64,
    pub tau_lowered: bool,
}

const TAU_FLOOR: f64 = 1.0001;

pub fn plan_lock<S: Scalar>(
    model: &ToyModel<S>,
    probes: &[Vec<u32>],
    opts: &PlanOptions,
) -> Result<LockPlan> {
    let stats = crate::model::collect_ffn_stats(model, probes)?;
    let reports = reports_from_stats(&stats, opts.tau)?;
    let block = match opts.force_block {
        Some(b) => {
            if b >= reports.len() {
                return Err(Error::Input(format!("block {b} out of {} blocks", reports.len())));
            }
            b
        }
        None => select_protected_block(&reports).ok_or_else(|| {
            Error::Selection(
                "no block shows feature outliers at this threshold; \
                 lower the threshold or force a block explicitly"
                    .into(),
            )
        })?,
    };
    let mut effective_tau = opts.tau;
    let mut outliers = reports[block].outliers.clone();
    let mut tau_lowered = false;
    // A forced block may be outlier-free at the requested threshold; walk the
    // threshold down geometrically so the scoring stage still has a target.
    while outliers.is_empty() && effective_tau > TAU_FLOOR {
        effective_tau = (effective_tau * 0.8).max(TAU_FLOOR);
        tau_lowered = true;
        let (_, picks) = outliers_from_means(&stats[block].y_abs_mean, effective_tau);
        outliers = picks;
    }
    if outliers.is_empty() {
        return Err(Error::Selection(format!(
            "block {block} has uniform feature magnitudes; nothing qualifies as an outlier"
        )));
    }
    let scores = score_neurons(
        &stats[block].u_abs_mean,
        &model.blocks[block].ffn.w_down,
        &outliers,
        opts.n,
    )?;
    let spec = LockSpec {
        protected_block: block,
        protected_neurons: scores.selected.clone(),
        group_size: opts.m,
        hadamard_seed: derive_seed(opts.seed, streams::HADAMARD),
        key_perm: random_group_local_permutation(opts.n, opts.m, derive_seed(opts.seed, streams::KEY_PERM))?,
        tau: effective_tau,
    };
    spec.validate(model.blocks[block].ffn.d_ff())?;
    Ok(LockPlan { spec, reports, scores, effective_tau, tau_lowered })
}

// ---------------------------------------------------------------------------
// HPNN negation baseline.

/// Embed a negation key: flip the sign of the up (and gate) columns of the
/// listed neurons wherever the key bit is set. Running the result with the
/// same bits restores the original model exactly.
pub fn hpnn_lock_ffn<S: Scalar>(
    ffn: &FfnBlock<S>,
    neurons: &[usize],
    key: &[bool],
) -> Result<FfnBlock<S>> {
    if neurons.len() != key.len() {
        return Err(Error::Input(format!(
            "{} neurons but {} key bits",
            neurons.len(),
            key.len()
        )));
    }
    let mut seen = vec![false; ffn.d_ff()];
    for &j in neurons {
        if j >= ffn.d_ff() {
            return Err(Error::Input(format!("neuron {j} out of range {}", ffn.d_ff())));
        }
        if seen[j] {
            return Err(Error::Input(format!("neuron {j} listed twice")));
        }
        seen[j] = true;
    }
    let mut locked = ffn.clone();
    for (&j, &bit) in neurons.iter().zip(key) {
        if bit {
            locked.w_up.scale_column(j, -S::one());
            if let Some(g) = locked.w_gate.as_mut() {
                g.scale_column(j, -S::one());
            }
        }
    }
    Ok(locked)
}

/// Run an HPNN-locked FFN: pre-activations of the listed neurons are negated
/// where the supplied bit is set, so supplying the embedded key cancels the
/// stored negation exactly.
pub fn run_hpnn_ffn<S: Scalar>(
    ffn: &FfnBlock<S>,
    neurons: &[usize],
    bits: &[bool],
    x: &DenseMatrix<S>,
) -> Result<DenseMatrix<S>> {
    if neurons.len() != bits.len() {
        return Err(Error::Input(format!(
            "{} neurons but {} runtime bits",
            neurons.len(),
            bits.len()
        )));
    }
    let negate = |m: &mut DenseMatrix<S>| {
        for (&j, &bit) in neurons.iter().zip(bits) {
            if bit {
                m.scale_column(j, -S::one());
            }
        }
    };
    let u = match ffn.kind {
        FfnKind::Standard => {
            let mut pre = matmul(x, &ffn.w_up)?;
            negate(&mut pre);
            for v in pre.data_mut() {
                *v = ffn.activation.apply(*v);
            }
            pre
        }
        FfnKind::Gated => {
            let mut gate = matmul(x, ffn.w_gate.as_ref().expect("validated"))?;
            let mut up = matmul(x, &ffn.w_up)?;
            negate(&mut gate);
            negate(&mut up);
            for (o, g) in up.data_mut().iter_mut().zip(gate.data()) {
                *o = ffn.activation.apply(*g) * *o;
            }
            up
        }
    };
    matmul(&u, &ffn.w_down)
}

/// A model whose protected block carries an embedded negation key.
#[derive(Debug, Clone, PartialEq)]
pub struct HpnnModel<S> {
    pub base: ToyModel<S>,
    pub protected_block: usize,
    /// Which neurons carry key bits (public; the bit values are the secret).
    pub neurons: Vec<usize>,
}

pub fn hpnn_lock_model<S: Scalar>(
    model: &ToyModel<S>,
    protected_block: usize,
    neurons: &[usize],
    key: &[bool],
) -> Result<HpnnModel<S>> {
    model.validate()?;
    if protected_block >= model.blocks.len() {
        return Err(Error::Input(format!(
            "protected block {protected_block} out of {} blocks",
            model.blocks.len()
        )));
    }
    let locked = hpnn_lock_ffn(&model.blocks[protected_block].ffn, neurons, key)?;
    let mut base = model.clone();
    base.blocks[protected_block].ffn = locked;
    Ok(HpnnModel { base, protected_block, neurons: neurons.to_vec() })
}

impl<S: Scalar> HpnnModel<S> {
    pub fn forward_with_bits(&self, tokens: &[u32], bits: &[bool]) -> Result<DenseMatrix<S>> {
        let pb = self.protected_block;
        self.base.forward_with(tokens, |b, ffn, x| {
            if b == pb {
                run_hpnn_ffn(ffn, &self.neurons, bits, x)
            } else {
                ffn.forward(x)
            }
        })
    }

    pub fn cast<T: Scalar>(&self) -> HpnnModel<T> {
        HpnnModel {
            base: self.base.cast(),
            protected_block: self.protected_block,
            neurons: self.neurons.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// FLOP accounting.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlopReport {
    pub d_model: usize,
    pub d_ff: usize,
    pub kind: FfnKind,
    pub n: usize,
    pub m: usize,
    pub key_bits: usize,
    /// Per-token FLOPs of the unlocked FFN: 2 * d_model * d_ff * (2 or 3).
    pub base_flops: u64,
    /// R applied as a dense n x n multiply: 2 n^2.
    pub rotation_dense_flops: u64,
    /// R applied by fast Walsh-Hadamard transform: n log2 n + n.
    pub rotation_fwht_flops: u64,
    /// The fabric is pure routing.
    pub fabric_flops: u64,
    pub dense_ratio: f64,
    pub fwht_ratio: f64,
    /// Set when the dense path would blow the 0.1% overhead budget that the
    /// FWHT path is designed to meet.
    pub dense_exceeds_budget: bool,
}

pub fn flop_overhead_report(
    d_model: usize,
    d_ff: usize,
    kind: FfnKind,
    n: usize,
    m: usize,
) -> Result<FlopReport> {
    if d_model == 0 || d_ff == 0 {
        return Err(Error::Input("FFN dimensions must be positive".into()));
    }
    let mats: u64 = match kind {
        FfnKind::Standard => 2,
        FfnKind::Gated => 3,
    };
    let base = 2 * d_model as u64 * d_ff as u64 * mats;
    if n == 0 {
        return Ok(FlopReport {
            d_model,
            d_ff,
            kind,
            n,
            m,
            key_bits: 0,
            base_flops: base,
            rotation_dense_flops: 0,
            rotation_fwht_flops: 0,
            fabric_flops: 0,
            dense_ratio: 0.0,
            fwht_ratio: 0.0,
            dense_exceeds_budget: false,
        });
    }
    if !n.is_power_of_two() || n > d_ff {
        return Err(Error::Dimension(format!(
            "protected width {n} must be a power of two within the {d_ff}-wide FFN"
        )));
    }
    if m == 0 || !m.is_power_of_two() || n % m != 0 {
        return Err(Error::Dimension(format!("group size {m} does not partition {n} lanes")));
    }
    let key_bits = crate::fabric::control_bits_for(n, m);
    let dense = 2 * (n as u64) * (n as u64);
    let fwht = n as u64 * n.trailing_zeros() as u64 + n as u64;
    let dense_ratio = dense as f64 / base as f64;
    let fwht_ratio = fwht as f64 / base as f64;
    Ok(FlopReport {
        d_model,
        d_ff,
        kind,
        n,
        m,
        key_bits,
        base_flops: base,
        rotation_dense_flops: dense,
        rotation_fwht_flops: fwht,
        fabric_flops: 0,
        dense_ratio,
        fwht_ratio,
        dense_exceeds_budget: dense_ratio >= 1e-3,
    })
}

// ---------------------------------------------------------------------------
// Rotation smoothing analysis.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothingReport {
    /// max/mean over the per-lane mean absolute activations of the protected
    /// lanes, before the rotation. A lane carrying a massive activation pushes
    /// this far above 1.
    pub before_ratio: f64,
    /// Same lane-profile statistic after the rotation.
    pub after_ratio: f64,
    /// before/after; > 1 means the rotation flattened the lane profile.
    pub shrink: f64,
}

/// Measure how strongly R flattens the protected lanes on the given probes.
/// The statistic is the lane profile: each of the first n lanes is summarized
/// by its mean |activation| over all probe tokens, and the report compares
/// max/mean of that profile before and after the rotation. The rotation
/// spreads any dominant lane across the whole group, so a spiky profile
/// (one huge lane mean) collapses toward flat.
pub fn rotation_smoothing<S: Scalar>(
    model: &LockedModel<S>,
    probes: &[Vec<u32>],
) -> Result<SmoothingReport> {
    if probes.is_empty() {
        return Err(Error::Input("empty probe set".into()));
    }
    let n = model.n();
    let pb = model.protected_block;
    let rotation = model.rotation().clone();
    let mut before = vec![0.0f64; n];
    let mut after = vec![0.0f64; n];
    let mut tokens = 0usize;
    for seq in probes {
        model.base.forward_with(seq, |b, ffn, x| {
            if b != pb {
                return ffn.forward(x);
            }
            let mut z = ffn.intermediate(x)?;
            for r in 0..z.rows() {
                for (acc, v) in before.iter_mut().zip(&z.row(r)[..n]) {
                    *acc += v.as_f64().abs();
                }
            }
            tokens += z.rows();
            rotation.apply_rows(&mut z);
            for r in 0..z.rows() {
                for (acc, v) in after.iter_mut().zip(&z.row(r)[..n]) {
                    *acc += v.as_f64().abs();
                }
            }
            // Downstream blocks see the unpermuted product; fine for a pure
            // statistics pass over the protected block itself.
            matmul(&z, &ffn.w_down)
        })?;
    }
    let profile_ratio = |sums: &[f64]| -> f64 {
        let max = sums.iter().fold(0.0f64, |a, &b| a.max(b));
        let mean = sums.iter().sum::<f64>() / sums.len() as f64;
        max / mean
    };
    if before.iter().sum::<f64>() == 0.0 || after.iter().sum::<f64>() == 0.0 {
        return Err(Error::Numeric("protected lanes are identically zero".into()));
    }
    let _ = tokens; // ratios are scale-free; the token count cancels
    let before_ratio = profile_ratio(&before);
    let after_ratio = profile_ratio(&after);
    Ok(SmoothingReport { before_ratio, after_ratio, shrink: before_ratio / after_ratio })
}

// ---------------------------------------------------------------------------
// Locked and HPNN model directories.

pub const LOCKED_FORMAT: &str = "lla-locked-model";
pub const HPNN_FORMAT: &str = "lla-hpnn-model";

#[derive(Serialize, Deserialize)]
struct LockedManifest {
    format: String,
    version: u32,
    vocab: usize,
    d_model: usize,
    protected_block: usize,
    n: usize,
    m: usize,
    hadamard_seed: Seed,
    rotation: String,
    embed: String,
    unembed: String,
    blocks: Vec<crate::model::BlockManifest>,
}

pub fn save_locked_model(dir: &Path, model: &LockedModel<f32>) -> Result<()> {
    model.base.validate()?;
    fs::create_dir_all(dir)?;
    crate::model::save_tensor(&dir.join("embed.llat"), &model.base.embed)?;
    crate::model::save_tensor(&dir.join("unembed.llat"), &model.base.unembed)?;
    let blocks = crate::model::write_block_tensors(dir, &model.base)?;
    let manifest = LockedManifest {
        format: LOCKED_FORMAT.into(),
        version: 1,
        vocab: model.base.vocab,
        d_model: model.base.d_model,
        protected_block: model.protected_block,
        n: model.n(),
        m: model.m,
        hadamard_seed: model.hadamard_seed,
        rotation: if model.rotated() { "fwht".into() } else { "none".into() },
        embed: "embed.llat".into(),
        unembed: "unembed.llat".into(),
        blocks,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(crate::model::MANIFEST_FILE), json + "\n")?;
    Ok(())
}

pub fn load_locked_model(dir: &Path) -> Result<LockedModel<f32>> {
    let manifest: LockedManifest =
        serde_json::from_str(&fs::read_to_string(dir.join(crate::model::MANIFEST_FILE))?)?;
    if manifest.format != LOCKED_FORMAT {
        return Err(Error::Format(format!(
            "directory holds a {} artifact, expected {LOCKED_FORMAT}",
            manifest.format
        )));
    }
    let embed = crate::model::load_tensor(&dir.join(&manifest.embed))?;
    let unembed = crate::model::load_tensor(&dir.join(&manifest.unembed))?;
    let mut blocks = Vec::with_capacity(manifest.blocks.len());
    for b in &manifest.blocks {
        blocks.push(crate::model::Block {
            mix: crate::model::load_tensor(&dir.join(&b.mix))?,
            ffn: crate::model::read_ffn_tensors(dir, &b.ffn)?,
        });
    }
    let base = ToyModel {
        vocab: manifest.vocab,
        d_model: manifest.d_model,
        embed,
        blocks,
        unembed,
    };
    base.validate()?;
    if manifest.protected_block >= base.blocks.len() {
        return Err(Error::Format("protected block index out of range".into()));
    }
    let rotation = match manifest.rotation.as_str() {
        "fwht" => Rotation::randomized(manifest.n, manifest.hadamard_seed)?,
        "none" => Rotation::identity(manifest.n),
        other => return Err(Error::Format(format!("unknown rotation kind {other:?}"))),
    };
    if manifest.n > base.blocks[manifest.protected_block].ffn.d_ff() {
        return Err(Error::Format("protected width exceeds FFN width".into()));
    }
    Ok(LockedModel {
        base,
        protected_block: manifest.protected_block,
        m: manifest.m,
        hadamard_seed: manifest.hadamard_seed,
        rotation,
    })
}

#[derive(Serialize, Deserialize)]
struct HpnnManifest {
    format: String,
    version: u32,
    vocab: usize,
    d_model: usize,
    protected_block: usize,
    neurons: Vec<usize>,
    embed: String,
    unembed: String,
    blocks: Vec<crate::model::BlockManifest>,
}

pub fn save_hpnn_model(dir: &Path, model: &HpnnModel<f32>) -> Result<()> {
    model.base.validate()?;
    fs::create_dir_all(dir)?;
    crate::model::save_tensor(&dir.join("embed.llat"), &model.base.embed)?;
    crate::model::save_tensor(&dir.join("unembed.llat"), &model.base.unembed)?;
    let blocks = crate::model::write_block_tensors(dir, &model.base)?;
    let manifest = HpnnManifest {
        format: HPNN_FORMAT.into(),
        version: 1,
        vocab: model.base.vocab,
        d_model: model.base.d_model,
        protected_block: model.protected_block,
        neurons: model.neurons.clone(),
        embed: "embed.llat".into(),
        unembed: "unembed.llat".into(),
        blocks,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(crate::model::MANIFEST_FILE), json + "\n")?;
    Ok(())
}

pub fn load_hpnn_model(dir: &Path) -> Result<HpnnModel<f32>> {
    let manifest: HpnnManifest =
        serde_json::from_str(&fs::read_to_string(dir.join(crate::model::MANIFEST_FILE))?)?;
    if manifest.format != HPNN_FORMAT {
        return Err(Error::Format(format!(
            "directory holds a {} artifact, expected {HPNN_FORMAT}",
            manifest.format
        )));
    }
    let embed = crate::model::load_tensor(&dir.join(&manifest.embed))?;
    let unembed = crate::model::load_tensor(&dir.join(&manifest.unembed))?;
    let mut blocks = Vec::with_capacity(manifest.blocks.len());
    for b in &manifest.blocks {
        blocks.push(crate::model::Block {
            mix: crate::model::load_tensor(&dir.join(&b.mix))?,
            ffn: crate::model::read_ffn_tensors(dir, &b.ffn)?,
        });
    }
    let base = ToyModel {
        vocab: manifest.vocab,
        d_model: manifest.d_model,
        embed,
        blocks,
        unembed,
    };
    base.validate()?;
    if manifest.protected_block >= base.blocks.len() {
        return Err(Error::Format("protected block index out of range".into()));
    }
    Ok(HpnnModel {
        base,
        protected_block: manifest.protected_block,
        neurons: manifest.neurons,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::BenesFabric;
    use crate::linalg::orthogonality_defect;
    use crate::model::{probe_tokens, synth_model, Activation, SynthConfig};
    use crate::rng::SplitMix64;

    fn random_ffn(kind: FfnKind, d_model: usize, d_ff: usize, seed: u64) -> FfnBlock<f64> {
        let mut rng = SplitMix64::new(Seed(seed));
        let mut gauss =
            |rows: usize, cols: usize| DenseMatrix::from_fn(rows, cols, |_, _| rng.next_gaussian());
        let w_up = gauss(d_model, d_ff);
        let w_down = gauss(d_ff, d_model);
        match kind {
            FfnKind::Standard => FfnBlock::standard(w_up, w_down, Activation::Relu).unwrap(),
            FfnKind::Gated => {
                let w_gate = gauss(d_model, d_ff);
                FfnBlock::gated(w_gate, w_up, w_down, Activation::Silu).unwrap()
            }
        }
    }

    fn random_spec(d_ff: usize, n: usize, m: usize, seed: u64) -> LockSpec {
        let mut rng = SplitMix64::new(Seed(seed));
        let mut neurons: Vec<usize> = (0..d_ff).collect();
        rng.shuffle(&mut neurons);
        neurons.truncate(n);
        LockSpec {
            protected_block: 0,
            protected_neurons: neurons,
            group_size: m,
            hadamard_seed: Seed(seed ^ 0xABCD),
            key_perm: random_group_local_permutation(n, m, Seed(seed ^ 0x1234)).unwrap(),
            tau: 5.0,
        }
    }

    fn random_x(rows: usize, d_model: usize, seed: u64) -> DenseMatrix<f64> {
        let mut rng = SplitMix64::new(Seed(seed));
        DenseMatrix::from_fn(rows, d_model, |_, _| rng.next_gaussian())
    }

    #[test]
    fn front_permutation_moves_protected_to_front() {
        let perm = front_permutation(&[5, 2], 8).unwrap();
        assert!(is_permutation(&perm));
        // Lane values [0..8] reordered: positions 0,1 hold former lanes 5,2.
        let placed = apply_permutation(&perm, &(0..8).collect::<Vec<_>>()).unwrap();
        assert_eq!(placed[0], 5);
        assert_eq!(placed[1], 2);
        assert_eq!(&placed[2..], &[1, 3, 4, 0, 6, 7]);
    }

    #[test]
    fn front_permutation_is_identity_when_already_front() {
        let perm = front_permutation(&[0, 1, 2], 6).unwrap();
        assert_eq!(perm, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn front_permutation_rejects_bad_lists() {
        assert!(front_permutation(&[], 4).is_err());
        assert!(front_permutation(&[4], 4).is_err());
        assert!(front_permutation(&[1, 1], 4).is_err());
    }

    #[test]
    fn single_front_neuron_identity_perm_gives_identity_transforms() {
        let spec = LockSpec {
            protected_block: 0,
            protected_neurons: vec![0],
            group_size: 1,
            hadamard_seed: Seed(9),
            key_perm: vec![0],
            tau: 5.0,
        };
        let set: OrthogonalSet<f64> = build_orthogonal_set(&spec, 4).unwrap();
        assert_eq!(set.p, DenseMatrix::identity(4));
        assert_eq!(set.k, DenseMatrix::identity(4));
        // R's 1x1 block is +-1, the rest identity.
        let r00 = set.r.get(0, 0);
        assert!(r00 == 1.0 || r00 == -1.0);
        for i in 1..4 {
            assert_eq!(set.r.get(i, i), 1.0);
        }
    }

    #[test]
    fn orthogonal_set_has_tiny_defect() {
        let spec = random_spec(16, 8, 4, 77);
        let set: OrthogonalSet<f64> = build_orthogonal_set(&spec, 16).unwrap();
        assert!(orthogonality_defect(&set.p).unwrap() < 1e-6);
        assert!(orthogonality_defect(&set.r).unwrap() < 1e-6);
        assert!(orthogonality_defect(&set.k).unwrap() < 1e-6);
    }

    #[test]
    fn activation_commutes_with_column_permutation() {
        let z = random_x(3, 8, 5);
        let perm = front_permutation(&[6, 1, 4], 8).unwrap();
        let mut sigma_then_p = z.clone();
        for v in sigma_then_p.data_mut() {
            *v = Activation::Relu.apply(*v);
        }
        let sigma_then_p = permute_columns(&sigma_then_p, &perm);
        let mut p_then_sigma = permute_columns(&z, &perm);
        for v in p_then_sigma.data_mut() {
            *v = Activation::Relu.apply(*v);
        }
        assert_eq!(sigma_then_p, p_then_sigma);
    }

    #[test]
    fn identity_transforms_leave_weights_unchanged() {
        let ffn = random_ffn(FfnKind::Standard, 4, 8, 3);
        let set = OrthogonalSet {
            p: DenseMatrix::identity(8),
            r: DenseMatrix::identity(8),
            k: DenseMatrix::identity(8),
            front: (0..8).collect(),
        };
        let folded = fold_weights_dense(&ffn, &set).unwrap();
        assert!(ffn.w_up.max_abs_diff(&folded.w_up).unwrap() < 1e-12);
        assert!(ffn.w_down.max_abs_diff(&folded.w_down).unwrap() < 1e-12);
    }

    #[test]
    fn structured_fold_matches_dense_oracle() {
        for (kind, seed) in [(FfnKind::Standard, 11u64), (FfnKind::Gated, 12)] {
            let ffn = random_ffn(kind, 6, 16, seed);
            let spec = random_spec(16, 8, 4, seed + 100);
            let set = build_orthogonal_set(&spec, 16).unwrap();
            let dense = fold_weights_dense(&ffn, &set).unwrap();
            let (fast, _) = fold_weights(&ffn, &spec, true).unwrap();
            assert!(fast.w_up.max_abs_diff(&dense.w_up).unwrap() < 1e-10);
            assert!(fast.w_down.max_abs_diff(&dense.w_down).unwrap() < 1e-10);
            if let (Some(a), Some(b)) = (&fast.w_gate, &dense.w_gate) {
                assert!(a.max_abs_diff(b).unwrap() < 1e-10);
            }
        }
    }

    #[test]
    fn correct_key_restores_ffn_output() {
        for (kind, seed) in [(FfnKind::Standard, 21u64), (FfnKind::Gated, 22)] {
            let ffn = random_ffn(kind, 4, 8, seed);
            let spec = random_spec(8, 4, 2, seed + 7);
            let (folded, rotation) = fold_weights(&ffn, &spec, true).unwrap();
            let locked = LockedFfn { ffn: folded, m: spec.group_size, rotation };
            let key = key_material(&spec.key_perm, spec.group_size).unwrap();
            let x = random_x(5, 4, seed + 13);
            let y_locked = run_locked_ffn(&locked, &key.key_bits(), &x).unwrap();
            let y_orig = ffn.forward(&x).unwrap();
            let rel = y_locked.max_rel_diff(&y_orig).unwrap();
            assert!(rel < 1e-10, "{kind:?}: relative deviation {rel}");
        }
    }

    #[test]
    fn perm_path_agrees_with_fabric_path() {
        let ffn = random_ffn(FfnKind::Standard, 4, 16, 31);
        let spec = random_spec(16, 8, 4, 32);
        let (folded, rotation) = fold_weights(&ffn, &spec, true).unwrap();
        let locked = LockedFfn { ffn: folded, m: spec.group_size, rotation };
        let key = key_material(&spec.key_perm, spec.group_size).unwrap();
        let x = random_x(3, 4, 33);
        let via_bits = run_locked_ffn(&locked, &key.key_bits(), &x).unwrap();
        let via_perm = locked.forward_with_perm(&x, &spec.key_perm).unwrap();
        assert!(via_bits.max_abs_diff(&via_perm).unwrap() < 1e-12);
    }

    #[test]
    fn fwht_rotation_matches_dense_rotation() {
        let rotation: Rotation<f64> = Rotation::randomized(8, Seed(41)).unwrap();
        let dense = rotation.dense_block();
        assert!(orthogonality_defect(&dense).unwrap() < 1e-10);
        let x = random_x(4, 8, 42);
        let mut fast = x.clone();
        rotation.apply_rows(&mut fast);
        let slow = matmul(&x, &dense).unwrap();
        assert!(fast.max_rel_diff(&slow).unwrap() < 1e-5);
    }

    #[test]
    fn run_rejects_mismatched_keys() {
        let ffn = random_ffn(FfnKind::Standard, 4, 8, 51);
        let spec = random_spec(8, 4, 2, 52);
        let (folded, rotation) = fold_weights(&ffn, &spec, true).unwrap();
        let locked = LockedFfn { ffn: folded, m: spec.group_size, rotation };
        let other = key_material(&random_group_local_permutation(8, 2, Seed(1)).unwrap(), 2).unwrap();
        let x = random_x(2, 4, 53);
        assert!(matches!(run_locked_ffn(&locked, &other.key_bits(), &x), Err(Error::Input(_))));
        assert!(matches!(locked.forward_with_perm(&x, &[0, 1, 2]), Err(Error::Input(_))));
    }

    fn planted_model(seed: u64) -> (ToyModel<f32>, SynthConfig) {
        let cfg = SynthConfig {
            vocab: 48,
            d_model: 24,
            d_ff: 64,
            n_blocks: 2,
            outlier_dims: vec![4, 11, 19],
            outlier_block: 0,
            outlier_gain: 30.0,
            neuron_outliers: vec![3, 27, 50],
            neuron_gain: 20.0,
            ..Default::default()
        };
        (synth_model(&cfg, Seed(seed)).unwrap(), cfg)
    }

    fn planned_lock(seed: u64, n: usize, m: usize) -> (ToyModel<f32>, LockedModel<f32>, GroupedKey) {
        let (model, cfg) = planted_model(seed);
        let probes = probe_tokens(cfg.vocab, 4, 32, Seed(seed ^ 0xF00D));
        let opts = PlanOptions { tau: 5.0, n, m, force_block: None, seed: Seed(seed ^ 0xBEEF) };
        let plan = plan_lock(&model, &probes, &opts).unwrap();
        let (locked, key) = lock_model(&model, &plan.spec).unwrap();
        (model, locked, key)
    }

    #[test]
    fn locked_model_round_trips_logits_with_correct_key() {
        let (model, locked, key) = planned_lock(61, 16, 4);
        let tokens: Vec<u32> = vec![0, 5, 11, 3, 40, 7];
        let original = model.logits(&tokens).unwrap();
        let restored = locked.forward_with_key(&tokens, &key.key_bits()).unwrap();
        let rel = restored.max_rel_diff(&original).unwrap();
        assert!(rel < 1e-4, "relative deviation {rel}");
    }

    #[test]
    fn wrong_key_perturbs_planted_model_badly() {
        let (model, locked, key) = planned_lock(62, 16, 4);
        let tokens: Vec<u32> = vec![1, 9, 20, 33, 14, 2, 47];
        let original = model.logits(&tokens).unwrap();
        // One group swapped relative to the true permutation.
        let mut wrong = key.pi.clone();
        wrong.swap(0, 1);
        let deviated = locked.forward_with_perm(&tokens, &wrong).unwrap();
        let rel = deviated.max_rel_diff(&original).unwrap();
        assert!(rel > 0.01, "one swapped pair only moved outputs by {rel}");
        // All-zero bits = identity routing; with a nontrivial secret this is wrong.
        if key.pi.iter().enumerate().any(|(i, &p)| i != p) {
            let zero = KeyBits {
                n: locked.n(),
                m: locked.m,
                bits: vec![false; crate::fabric::control_bits_for(locked.n(), locked.m)],
            };
            let y = locked.forward_with_key(&tokens, &zero).unwrap();
            assert!(y.max_rel_diff(&original).unwrap() > 0.01);
        }
    }

    #[test]
    fn unrotated_lock_also_round_trips() {
        let (model, cfg) = planted_model(63);
        let probes = probe_tokens(cfg.vocab, 4, 32, Seed(404));
        let opts = PlanOptions { tau: 5.0, n: 16, m: 4, force_block: None, seed: Seed(405) };
        let plan = plan_lock(&model, &probes, &opts).unwrap();
        let (locked, key) = lock_model_with(&model, &plan.spec, false).unwrap();
        assert!(!locked.rotated());
        let tokens = vec![2, 7, 19];
        let original = model.logits(&tokens).unwrap();
        let restored = locked.forward_with_key(&tokens, &key.key_bits()).unwrap();
        assert!(restored.max_rel_diff(&original).unwrap() < 1e-4);
    }

    #[test]
    fn plan_lock_places_lock_on_outlier_block() {
        let cfg = SynthConfig {
            n_blocks: 3,
            outlier_dims: vec![7, 13],
            outlier_block: 1,
            outlier_gain: 30.0,
            ..Default::default()
        };
        let model: ToyModel<f32> = synth_model(&cfg, Seed(71)).unwrap();
        let probes = probe_tokens(cfg.vocab, 4, 32, Seed(72));
        let opts = PlanOptions { tau: 5.0, n: 8, m: 4, force_block: None, seed: Seed(73) };
        let plan = plan_lock(&model, &probes, &opts).unwrap();
        assert_eq!(plan.spec.protected_block, 1);
        assert!(!plan.tau_lowered);
        assert_eq!(plan.spec.protected_neurons.len(), 8);
        // The scored selection really prefers neurons wired into the planted dims.
        let top = plan.spec.protected_neurons[0];
        assert!(plan.scores.scores[top] > 0.0);
    }

    #[test]
    fn plan_lock_lowers_tau_on_forced_clean_block() {
        let cfg = SynthConfig::default();
        let model: ToyModel<f32> = synth_model(&cfg, Seed(81)).unwrap();
        let probes = probe_tokens(cfg.vocab, 4, 32, Seed(82));
        let opts = PlanOptions { tau: 5.0, n: 8, m: 4, force_block: Some(1), seed: Seed(83) };
        let plan = plan_lock(&model, &probes, &opts).unwrap();
        assert_eq!(plan.spec.protected_block, 1);
        assert!(plan.tau_lowered);
        assert!(plan.effective_tau < 5.0);
        assert!(!plan.reports[1].feature_means.is_empty());
    }

    #[test]
    fn plan_lock_without_outliers_and_without_force_fails() {
        let cfg = SynthConfig::default();
        let model: ToyModel<f32> = synth_model(&cfg, Seed(84)).unwrap();
        let probes = probe_tokens(cfg.vocab, 4, 32, Seed(85));
        let opts = PlanOptions { tau: 50.0, n: 8, m: 4, force_block: None, seed: Seed(86) };
        assert!(matches!(plan_lock(&model, &probes, &opts), Err(Error::Selection(_))));
    }

    #[test]
    fn spec_validation_rejects_malformed_specs() {
        let mut spec = random_spec(16, 8, 4, 91);
        spec.protected_neurons.truncate(6); // not a power of two
        assert!(spec.validate(16).is_err());
        let mut spec = random_spec(16, 8, 4, 92);
        spec.group_size = 3;
        assert!(spec.validate(16).is_err());
        let mut spec = random_spec(16, 8, 4, 93);
        spec.key_perm = (0..8).rev().collect(); // crosses group boundaries
        assert!(spec.validate(16).is_err());
        let spec = random_spec(16, 16, 4, 94);
        assert!(spec.validate(8).is_err()); // wider than the FFN
    }

    #[test]
    fn hpnn_correct_key_is_bit_identical() {
        let ffn = random_ffn(FfnKind::Standard, 6, 12, 101);
        let ffn32: FfnBlock<f32> = ffn.cast();
        let neurons = vec![1, 4, 9, 10];
        let key = vec![true, false, true, true];
        let locked = hpnn_lock_ffn(&ffn32, &neurons, &key).unwrap();
        let x: DenseMatrix<f32> = random_x(5, 6, 102).cast();
        let original = ffn32.forward(&x).unwrap();
        let restored = run_hpnn_ffn(&locked, &neurons, &key, &x).unwrap();
        for (a, b) in original.data().iter().zip(restored.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn hpnn_wrong_bit_moves_output() {
        let (model, _) = planted_model(111);
        let neurons = vec![3, 27, 50, 8];
        let key = vec![true, true, false, true];
        let locked = hpnn_lock_model(&model, 0, &neurons, &key).unwrap();
        let tokens = vec![4, 17, 30];
        let mut flipped = key.clone();
        flipped[0] = !flipped[0]; // neuron 3 is a planted activation outlier
        let good = locked.forward_with_bits(&tokens, &key).unwrap();
        let bad = locked.forward_with_bits(&tokens, &flipped).unwrap();
        assert!(good.max_abs_diff(&bad).unwrap() > 1e-3);
    }

    #[test]
    fn hpnn_all_bits_flipped_equals_column_negation() {
        let ffn = random_ffn(FfnKind::Gated, 5, 10, 121);
        let neurons = vec![0, 3, 7];
        let embedded = vec![true, false, true];
        let locked = hpnn_lock_ffn(&ffn, &neurons, &embedded).unwrap();
        let x = random_x(4, 5, 122);
        // Running with every bit set negates every listed column once more.
        let all_on = vec![true; 3];
        let via_runtime = run_hpnn_ffn(&locked, &neurons, &all_on, &x).unwrap();
        let mut negated = locked.clone();
        for &j in &neurons {
            negated.w_up.scale_column(j, -1.0);
            negated.w_gate.as_mut().unwrap().scale_column(j, -1.0);
        }
        let via_weights = negated.forward(&x).unwrap();
        assert!(via_runtime.max_abs_diff(&via_weights).unwrap() < 1e-12);
    }

    #[test]
    fn hpnn_rejects_length_and_range_errors() {
        let ffn = random_ffn(FfnKind::Standard, 4, 8, 131);
        assert!(hpnn_lock_ffn(&ffn, &[0, 1], &[true]).is_err());
        assert!(hpnn_lock_ffn(&ffn, &[8], &[true]).is_err());
        assert!(hpnn_lock_ffn(&ffn, &[2, 2], &[true, false]).is_err());
        assert!(run_hpnn_ffn(&ffn, &[0], &[true, false], &random_x(1, 4, 0)).is_err());
    }

    #[test]
    fn flop_accounting_matches_hand_arithmetic() {
        let r = flop_overhead_report(4096, 16384, FfnKind::Standard, 2048, 16).unwrap();
        assert_eq!(r.base_flops, 268_435_456);
        assert_eq!(r.rotation_fwht_flops, 2048 * 11 + 2048);
        assert_eq!(r.rotation_dense_flops, 8_388_608);
        assert_eq!(r.fabric_flops, 0);
        assert_eq!(r.key_bits, 7168);
        assert!(r.fwht_ratio < 1e-3, "fwht ratio {}", r.fwht_ratio);
        assert!((r.fwht_ratio - 9.1552734375e-5).abs() < 1e-12);
        assert!(r.dense_exceeds_budget);
        assert!((r.dense_ratio - 0.03125).abs() < 1e-12);
    }

    #[test]
    fn flop_accounting_degenerate_and_invalid() {
        let r = flop_overhead_report(64, 256, FfnKind::Gated, 0, 16).unwrap();
        assert_eq!(r.fwht_ratio, 0.0);
        assert_eq!(r.base_flops, 2 * 64 * 256 * 3);
        assert!(flop_overhead_report(0, 256, FfnKind::Standard, 16, 4).is_err());
        assert!(flop_overhead_report(64, 256, FfnKind::Standard, 24, 4).is_err());
        assert!(flop_overhead_report(64, 256, FfnKind::Standard, 16, 3).is_err());
    }

    #[test]
    fn rotation_flattens_planted_activation_outliers() {
        // One massively boosted neuron: the canonical spiky lane profile.
        let cfg = SynthConfig {
            vocab: 48,
            d_model: 24,
            d_ff: 64,
            n_blocks: 2,
            outlier_dims: vec![4, 11, 19],
            outlier_block: 0,
            outlier_gain: 30.0,
            neuron_outliers: vec![27],
            neuron_gain: 50.0,
            ..Default::default()
        };
        let model: ToyModel<f32> = synth_model(&cfg, Seed(141)).unwrap();
        let probes = probe_tokens(cfg.vocab, 8, 64, Seed(142));
        let opts = PlanOptions { tau: 5.0, n: 32, m: 4, force_block: None, seed: Seed(143) };
        let plan = plan_lock(&model, &probes, &opts).unwrap();
        assert!(plan.spec.protected_neurons.contains(&27));
        let (locked, _) = lock_model(&model, &plan.spec).unwrap();
        let report = rotation_smoothing(&locked, &probes).unwrap();
        assert!(
            report.shrink >= 5.0,
            "rotation only flattened the lanes by {:.2}x ({} -> {})",
            report.shrink,
            report.before_ratio,
            report.after_ratio
        );
    }

    #[test]
    fn locked_model_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (model, locked, key) = planned_lock(151, 16, 4);
        save_locked_model(dir.path(), &locked).unwrap();
        let back = load_locked_model(dir.path()).unwrap();
        assert_eq!(locked, back);
        let tokens = vec![3, 8, 21];
        let original = model.logits(&tokens).unwrap();
        let restored = back.forward_with_key(&tokens, &key.key_bits()).unwrap();
        assert!(restored.max_rel_diff(&original).unwrap() < 1e-4);
        assert_eq!(
            crate::model::manifest_format(dir.path()).unwrap(),
            LOCKED_FORMAT
        );
    }

    #[test]
    fn locked_manifest_is_independent_of_the_key() {
        // Same model, same spec except the secret permutation: the manifest
        // bytes must be identical, and nothing in the directory may hold the
        // key file format.
        let (model, cfg) = planted_model(161);
        let probes = probe_tokens(cfg.vocab, 4, 32, Seed(162));
        let opts = PlanOptions { tau: 5.0, n: 16, m: 4, force_block: None, seed: Seed(163) };
        let plan = plan_lock(&model, &probes, &opts).unwrap();
        let mut spec_b = plan.spec.clone();
        spec_b.key_perm = random_group_local_permutation(16, 4, Seed(99999)).unwrap();
        assert_ne!(plan.spec.key_perm, spec_b.key_perm);
        let (locked_a, _) = lock_model(&model, &plan.spec).unwrap();
        let (locked_b, _) = lock_model(&model, &spec_b).unwrap();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        save_locked_model(dir_a.path(), &locked_a).unwrap();
        save_locked_model(dir_b.path(), &locked_b).unwrap();
        let manifest_a = fs::read(dir_a.path().join(crate::model::MANIFEST_FILE)).unwrap();
        let manifest_b = fs::read(dir_b.path().join(crate::model::MANIFEST_FILE)).unwrap();
        assert_eq!(manifest_a, manifest_b);
        for entry in fs::read_dir(dir_a.path()).unwrap() {
            let raw = fs::read(entry.unwrap().path()).unwrap();
            assert!(!raw.windows(4).any(|w| w == b"LLAK"), "key material leaked");
        }
    }

    #[test]
    fn hpnn_model_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (model, _) = planted_model(171);
        let neurons = vec![3, 27, 50];
        let key = vec![true, false, true];
        let locked = hpnn_lock_model(&model, 0, &neurons, &key).unwrap();
        save_hpnn_model(dir.path(), &locked).unwrap();
        let back = load_hpnn_model(dir.path()).unwrap();
        assert_eq!(locked, back);
        let tokens = vec![1, 2, 3];
        let a = locked.forward_with_bits(&tokens, &key).unwrap();
        let b = back.forward_with_bits(&tokens, &key).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fabric_and_dense_k_agree_on_lock_groups() {
        // The dense K built for the orthogonal set and the Benes realization
        // of the same permutation agree lane for lane.
        let spec = random_spec(16, 8, 4, 181);
        let set: OrthogonalSet<f64> = build_orthogonal_set(&spec, 16).unwrap();
        let fabric = BenesFabric::new(4).unwrap();
        let mut lanes: Vec<f64> = (0..16).map(|v| v as f64 + 1.0).collect();
        let key = key_material(&spec.key_perm, 4).unwrap();
        key.key_bits().apply_lanes(&mut lanes).unwrap();
        let _ = fabric; // fabric-level routing is covered in the fabric module
        let dense = matmul(
            &DenseMatrix::from_rows(&[(0..16).map(|v| v as f64 + 1.0).collect::<Vec<_>>()]).unwrap(),
            &set.k,
        )
        .unwrap();
        assert_eq!(dense.row(0), &lanes[..]);
    }
}
