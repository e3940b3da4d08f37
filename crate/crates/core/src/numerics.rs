//! Dense linear algebra on small matrices and reproducible random streams.
//!
//! Every random quantity in the crate is drawn from an [`RngStream`], a pure
//! function of `(master_seed, path)`. Child streams are derived by hashing the
//! parent key with the child index, so per-trial streams can be created in any
//! order (or on any thread) and always yield the same samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};

pub const JACOBI_MAX_SWEEPS: usize = 100;
const SPECTRAL_TOL: f64 = 1e-9;
pub const SPECTRAL_MAX_ITERS: usize = 10_000;

/// Row-major dense matrix of finite reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return invalid(format!("matrix shape {rows}x{cols} has a zero dimension"));
        }
        if rows * cols != data.len() {
            return invalid(format!(
                "matrix shape {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite matrix entry at flat index {pos}"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return invalid("ragged rows");
        }
        Self::new(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return invalid(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, o) in dst.iter_mut().zip(orow) {
                    *d += a * o;
                }
            }
        }
        Ok(out)
    }

    /// `y = W x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return invalid(format!("matvec: matrix has {} columns, vector has {}", self.cols, x.len()));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `y = Wᵀ x`.
    pub fn transpose_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return invalid(format!("transpose_matvec: matrix has {} rows, vector has {}", self.rows, x.len()));
        }
        let mut y = vec![0.0; self.cols];
        for (r, xr) in x.iter().enumerate() {
            for (yc, w) in y.iter_mut().zip(self.row(r)) {
                *yc += w * xr;
            }
        }
        Ok(y)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn spectral_norm(&self) -> f64 {
        spectral_norm(self)
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return invalid(format!(
                "shape mismatch {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        Ok(())
    }
}

pub fn frobenius_norm(w: &Matrix) -> f64 {
    w.frobenius_norm()
}

/// Largest singular value by power iteration on `WᵀW`.
///
/// Starts from the normalized all-ones vector. If that start is orthogonal to
/// the top singular space the iteration stalls below the lower bound
/// `‖W‖_F / √min(rows, cols)`, and the iteration restarts from a seeded
/// random vector.
pub fn spectral_norm(w: &Matrix) -> f64 {
    let frob = w.frobenius_norm();
    if frob == 0.0 {
        return 0.0;
    }
    let floor = frob / (w.rows.min(w.cols) as f64).sqrt();
    let ones = vec![1.0 / (w.cols as f64).sqrt(); w.cols];
    let first = power_iterate(w, ones);
    if first >= floor * (1.0 - 1e-6) {
        return first;
    }
    let mut best = first;
    let root = RngStream::new(0x5eed_5eed).derive(w.cols as u64);
    for attempt in 0..8u64 {
        let mut g = root.derive(attempt).generator();
        let start: Vec<f64> = (0..w.cols).map(|_| g.sample(StandardNormal)).collect();
        let est = power_iterate(w, start);
        best = best.max(est);
        if best >= floor * (1.0 - 1e-6) {
            break;
        }
    }
    best
}

fn power_iterate(w: &Matrix, mut v: Vec<f64>) -> f64 {
    let n = norm(&v);
    if n == 0.0 {
        return 0.0;
    }
    v.iter_mut().for_each(|x| *x /= n);
    let mut lambda = 0.0f64;
    for _ in 0..SPECTRAL_MAX_ITERS {
        let wv = w.matvec(&v).expect("shape checked");
        let mut next = w.transpose_matvec(&wv).expect("shape checked");
        let rayleigh = dot(&wv, &wv);
        let nn = norm(&next);
        if nn == 0.0 {
            return 0.0;
        }
        next.iter_mut().for_each(|x| *x /= nn);
        v = next;
        // the Rayleigh quotient converges quadratically in the vector error
        if (rayleigh - lambda).abs() <= SPECTRAL_TOL * SPECTRAL_TOL * rayleigh.max(f64::MIN_POSITIVE) {
            lambda = rayleigh;
            break;
        }
        lambda = rayleigh;
    }
    let wv = w.matvec(&v).expect("shape checked");
    lambda.max(dot(&wv, &wv)).sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn check_finite(v: &[f64], what: &str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => invalid(format!("{what}: non-finite entry at index {i}")),
        None => Ok(()),
    }
}

/// Median of a non-empty slice; the mean of the two middle order statistics
/// for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Coordinatewise median of equal-length vectors.
pub fn median_vectors(vectors: &[Vec<f64>]) -> Vec<f64> {
    let dim = vectors[0].len();
    let mut col = Vec::with_capacity(vectors.len());
    (0..dim)
        .map(|i| {
            col.clear();
            col.extend(vectors.iter().map(|v| v[i]));
            median(&col)
        })
        .collect()
}

/// A reproducible random stream identified by `(master_seed, path)`.
///
/// The stream itself is immutable; [`RngStream::generator`] returns a fresh
/// generator positioned at the start of the stream's sample sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    master_seed: u64,
    path: Vec<u64>,
    key: [u8; 32],
}

impl RngStream {
    pub fn new(master_seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"adl.rng.root");
        h.update(master_seed.to_le_bytes());
        Self { master_seed, path: Vec::new(), key: h.finalize().into() }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    /// Child stream `index`. Distinct indices give independent streams;
    /// the derivation is order sensitive, so `derive(a).derive(b)` and
    /// `derive(b).derive(a)` differ.
    pub fn derive(&self, index: u64) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update(index.to_le_bytes());
        let mut path = Vec::with_capacity(self.path.len() + 1);
        path.extend_from_slice(&self.path);
        path.push(index);
        Self { master_seed: self.master_seed, path, key: h.finalize().into() }
    }

    pub fn generator(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.key)
    }
}

pub fn derive_stream(parent: &RngStream, index: u64) -> RngStream {
    parent.derive(index)
}

/// Uniform random unit vector.
/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in decreasing order and the matching orthonormal
/// eigenvectors as rows. Sweeps stop once the off-diagonal mass falls below
/// `1e-12` of the Frobenius norm.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = a.rows;
    if a.cols != n {
        return invalid(format!("eigen-decomposition needs a square matrix, got {}x{}", a.rows, a.cols));
    }
    for i in 0..n {
        for j in 0..i {
            let (x, y) = (a.get(i, j), a.get(j, i));
            if (x - y).abs() > 1e-12 * (1.0 + x.abs().max(y.abs())) {
                return invalid(format!("matrix is not symmetric at ({i}, {j})"));
            }
        }
    }
    check_finite(&a.data, "matrix")?;
    let mut m = a.data.clone();
    let mut v = Matrix::identity(n).data;
    let frob = a.frobenius_norm();
    let tol = 1e-12 * frob;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i * n + j].powi(2)).sum();
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k * n + i]).collect()).collect();
    Ok((values, vectors))
}

pub fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}
