//! Dense row-major matrices and the small set of structured transforms the
//! locking pipeline needs: Sylvester-Hadamard construction, randomized
//! Hadamard rotations, the fast Walsh-Hadamard transform, permutation
//! matrices, and an orthogonality diagnostic.
//!
//! The multiply kernel fixes the loop order to (i, k, j) and accumulates in
//! the element type, so a given scalar type produces bit-identical products
//! on every platform. Matrices are desk-scale by design; dense dimensions
//! are capped at 2^14.

use crate::error::{Error, Result};
use crate::rng::{Seed, SplitMix64};
use crate::scalar::Scalar;

/// Largest supported dense dimension (rows or columns).
pub const MAX_DIM: usize = 1 << 14;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> DenseMatrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged row lengths".into()));
        }
        Ok(DenseMatrix { rows: r, cols: c, data: rows.concat() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        DenseMatrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { S::one() } else { S::zero() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Element-wise cast to another scalar type (through f64).
    pub fn cast<T: Scalar>(&self) -> DenseMatrix<T> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn scale_column(&mut self, j: usize, factor: S) {
        for i in 0..self.rows {
            self.data[i * self.cols + j] *= factor;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Largest relative entry difference, with denominator floored at 1 so
    /// near-zero entries compare absolutely.
    pub fn max_rel_diff(&self, other: &Self) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let (a, b) = (a.as_f64(), b.as_f64());
                (a - b).abs() / a.abs().max(b.abs()).max(1.0)
            })
            .fold(0.0, f64::max))
    }
}

fn check_dims(rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::Shape("zero dimension".into()));
    }
    if rows > MAX_DIM || cols > MAX_DIM {
        return Err(Error::Resource(format!(
            "{rows}x{cols} exceeds the {MAX_DIM} dense dimension cap"
        )));
    }
    Ok(())
}

/// Dense product `a * b` with pinned (i, k, j) loop order and accumulation in
/// the element type.
pub fn matmul<S: Scalar>(a: &DenseMatrix<S>, b: &DenseMatrix<S>) -> Result<DenseMatrix<S>> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    check_dims(a.rows, b.cols)?;
    let mut c = DenseMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == S::zero() {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let crow = &mut c.data[i * b.cols..(i + 1) * b.cols];
            for j in 0..b.cols {
                crow[j] += aik * brow[j];
            }
        }
    }
    debug_assert!(c.all_finite(), "matmul produced non-finite entries");
    Ok(c)
}

/// Unscaled Sylvester-Hadamard matrix of order 2^k, entries +-1, built by
/// doubling: H_{2n} = [[H_n, H_n], [H_n, -H_n]].
pub fn sylvester_hadamard<S: Scalar>(k: u32) -> Result<DenseMatrix<S>> {
    if k > 14 {
        return Err(Error::Resource(format!("2^{k} exceeds the {MAX_DIM} cap")));
    }
    let n = 1usize << k;
    let mut h = DenseMatrix::zeros(n, n);
    h.set(0, 0, S::one());
    let mut size = 1;
    while size < n {
        for i in 0..size {
            for j in 0..size {
                let v = h.get(i, j);
                h.set(i, j + size, v);
                h.set(i + size, j, v);
                h.set(i + size, j + size, -v);
            }
        }
        size *= 2;
    }
    Ok(h)
}

/// Sign diagonal for a randomized Hadamard rotation: n independent +-1 draws
/// from the stream seeded by `seed`. Shared between the dense construction
/// and the fast runtime path so the two are the same transform.
pub fn hadamard_signs<S: Scalar>(n: usize, seed: Seed) -> Vec<S> {
    let mut rng = SplitMix64::new(seed);
    (0..n).map(|_| S::from_f64(rng.next_sign())).collect()
}

/// Randomized orthogonal Hadamard rotation `(1/sqrt(n)) * H_n * D` where D is
/// the random sign diagonal drawn from `seed`. n must be a power of two.
pub fn randomized_hadamard<S: Scalar>(n: usize, seed: Seed) -> Result<DenseMatrix<S>> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Dimension(format!(
            "randomized Hadamard needs a power-of-two size, got {n}"
        )));
    }
    if n > MAX_DIM {
        return Err(Error::Resource(format!("{n} exceeds the {MAX_DIM} cap")));
    }
    let h = sylvester_hadamard::<S>(n.trailing_zeros())?;
    let d = hadamard_signs::<S>(n, seed);
    let inv_sqrt = S::from_f64(1.0 / (n as f64).sqrt());
    Ok(DenseMatrix::from_fn(n, n, |i, j| h.get(i, j) * d[j] * inv_sqrt))
}

/// In-place fast Walsh-Hadamard transform (unscaled): v <- H_n * v in
/// n*log2(n) butterfly operations. Length must be a power of two.
pub fn fwht_apply<S: Scalar>(v: &mut [S]) -> Result<()> {
    let n = v.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Dimension(format!(
            "fast transform needs a power-of-two length, got {n}"
        )));
    }
    let mut stride = 1;
    while stride < n {
        for base in (0..n).step_by(stride * 2) {
            for j in base..base + stride {
                let a = v[j];
                let b = v[j + stride];
                v[j] = a + b;
                v[j + stride] = a - b;
            }
        }
        stride *= 2;
    }
    Ok(())
}

/// Max |M * M^T - I| entry, accumulated in f64. Zero for exact orthogonal
/// matrices; tiny for floating-point rotations.
pub fn orthogonality_defect<S: Scalar>(m: &DenseMatrix<S>) -> Result<f64> {
    if m.rows != m.cols {
        return Err(Error::Shape(format!("{}x{} is not square", m.rows, m.cols)));
    }
    let n = m.rows;
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0f64;
            for k in 0..n {
                acc += m.get(i, k).as_f64() * m.get(j, k).as_f64();
            }
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((acc - target).abs());
        }
    }
    Ok(worst)
}

/// True if `perm` is a bijection on 0..len.
pub fn is_permutation(perm: &[usize]) -> bool {
    let n = perm.len();
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

/// Inverse of a permutation given as `position = perm[index]`.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Permutation matrix for the convention `out[perm[i]] = in[i]` on row
/// vectors: row i carries its 1 at column perm[i], so `x * P` moves the value
/// at position i to position perm[i].
pub fn permutation_matrix<S: Scalar>(perm: &[usize]) -> Result<DenseMatrix<S>> {
    if !is_permutation(perm) {
        return Err(Error::Input(format!("not a permutation: {perm:?}")));
    }
    let n = perm.len();
    let mut p = DenseMatrix::zeros(n, n);
    for (i, &j) in perm.iter().enumerate() {
        p.set(i, j, S::one());
    }
    Ok(p)
}

/// Apply `out[perm[i]] = in[i]` to a slice of values.
pub fn apply_permutation<T: Clone>(perm: &[usize], values: &[T]) -> Result<Vec<T>> {
    if perm.len() != values.len() {
        return Err(Error::Shape(format!(
            "permutation over {} lanes applied to {} values",
            perm.len(),
            values.len()
        )));
    }
    if !is_permutation(perm) {
        return Err(Error::Input(format!("not a permutation: {perm:?}")));
    }
    let mut out: Vec<T> = values.to_vec();
    for (i, &p) in perm.iter().enumerate() {
        out[p] = values[i].clone();
    }
    Ok(out)
}

/// Numerically stable in-place softmax over one row.
pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
