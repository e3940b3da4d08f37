//! Quadratic functions of low rank that shatter points of the cube, and
//! depth-two ReLU networks realizing them.
//!
//! `Ψ_k` maps a cube point to a unit-norm symmetric matrix supported on the
//! first `k` rows and columns. A labeling is fitted by the minimum-norm `V`
//! in the span of the images with `⟨V, Ψ_k(xᵢ)⟩ = yᵢ`; its eigenpairs give
//! `q(x) = Σ λᵢ⟨uᵢ, x⟩²`. Averaging random ramps `b·relu(z − a)` with
//! `E[b·relu(z − a)] = z²` then turns `q` into a one-hidden-layer network.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::{Activation, QuadKernel};
use crate::compressor::network::{NetworkClass, NetworkSpec};
use crate::error::{invalid, Result};
use crate::numerics::{dot, spectral_norm, symmetric_eigen, Matrix, RngStream};

/// Relative pivot tolerance of the Gram factorization.
pub const RANK_TOL: f64 = 1e-10;
/// Default bound constant: `|λᵢ| ≤ B/√k`.
pub const DEFAULT_B: f64 = 8.0;
const POINT_STREAM: u64 = 0;
const LABEL_STREAM: u64 = 1;
const RELU_STREAM: u64 = 2;

fn check_cube(x: &[f64]) -> Result<()> {
    match x.iter().position(|&v| v != 1.0 && v != -1.0) {
        Some(i) => invalid(format!("coordinate {i} is {}, not ±1", x[i])),
        None => Ok(()),
    }
}

fn check_k(d: usize, k: usize) -> Result<()> {
    if k == 0 || k > d {
        return invalid(format!("k must lie in 1..={d}, got {k}"));
    }
    Ok(())
}

/// `(Ψ_k(x))ᵢⱼ = xᵢxⱼ/√(k(2d−k))` where `min(i, j) < k` (zero-based), else 0.
pub fn psi_k(x: &[f64], k: usize) -> Result<Matrix> {
    let d = x.len();
    check_k(d, k)?;
    check_cube(x)?;
    let s = 1.0 / ((k * (2 * d - k)) as f64).sqrt();
    let mut m = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            if i.min(j) < k {
                m.set(i, j, x[i] * x[j] * s);
            }
        }
    }
    Ok(m)
}

/// `⟨Ψ_k(x), Ψ_k(y)⟩ = ((Σaᵢ)² − (Σ_{i≥k} aᵢ)²)/(k(2d−k))` with `aᵢ = xᵢyᵢ`.
pub fn psi_inner(x: &[f64], y: &[f64], k: usize) -> f64 {
    let d = x.len();
    let a: Vec<f64> = x.iter().zip(y).map(|(u, v)| u * v).collect();
    let all: f64 = a.iter().sum();
    let tail: f64 = a[k..].iter().sum();
    (all * all - tail * tail) / (k * (2 * d - k)) as f64
}

/// `D` cube points with the incoherence radius `L = √(2 ln(20dD))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShatterInstance {
    pub points: Vec<Vec<f64>>,
    pub k: usize,
    pub l: f64,
}

impl ShatterInstance {
    pub fn new(points: Vec<Vec<f64>>, k: usize) -> Result<Self> {
        let Some(d) = points.first().map(Vec::len) else {
            return invalid("a shatter instance needs at least one point");
        };
        check_k(d, k)?;
        for (i, p) in points.iter().enumerate() {
            if p.len() != d {
                return invalid(format!("point {i} has dimension {}, expected {d}", p.len()));
            }
            check_cube(p)?;
        }
        let l = (2.0 * (20.0 * d as f64 * points.len() as f64).ln()).sqrt();
        Ok(Self { points, k, l })
    }

    /// Uniform cube points.
    pub fn random(d: usize, k: usize, count: usize, rng: &RngStream) -> Result<Self> {
        Self::new(random_cube_points(d, count, rng), k)
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn random_cube_points(d: usize, count: usize, rng: &RngStream) -> Vec<Vec<f64>> {
    use rand::Rng;
    let mut g = rng.generator();
    (0..count).map(|_| (0..d).map(|_| if g.random::<bool>() { 1.0 } else { -1.0 }).collect()).collect()
}

/// Pivoted Cholesky factor of a Gram matrix, `G_SS = L_S L_Sᵀ` on the
/// pivot set `S`.
#[derive(Clone, Debug)]
struct GramFactor {
    pivots: Vec<usize>,
    /// Row `i` holds the factor entries of point `i` over the pivots.
    rows: Vec<Vec<f64>>,
    /// Residual diagonal of the non-pivots.
    residual: Vec<f64>,
}

impl GramFactor {
    fn new(g: &[Vec<f64>], tol: f64) -> Self {
        let n = g.len();
        let mut residual: Vec<f64> = (0..n).map(|i| g[i][i]).collect();
        let scale = residual.iter().fold(0.0f64, |a, &b| a.max(b));
        let mut rows = vec![Vec::new(); n];
        let mut pivots = Vec::new();
        let mut free: Vec<bool> = vec![true; n];
        loop {
            let Some(p) = (0..n).filter(|&i| free[i]).max_by(|&a, &b| residual[a].total_cmp(&residual[b])) else {
                break;
            };
            if residual[p] <= tol * scale.max(f64::MIN_POSITIVE) {
                break;
            }
            let lpp = residual[p].sqrt();
            free[p] = false;
            for i in 0..n {
                if !free[i] {
                    continue;
                }
                let s: f64 = rows[i].iter().zip(&rows[p]).map(|(a, b)| a * b).sum();
                let lip = (g[i][p] - s) / lpp;
                rows[i].push(lip);
                residual[i] -= lip * lip;
            }
            rows[p].push(lpp);
            residual[p] = 0.0;
            pivots.push(p);
        }
        // pivot rows are padded to the full rank for triangular solves
        let r = pivots.len();
        for row in rows.iter_mut() {
            row.resize(r, 0.0);
        }
        Self { pivots, rows, residual }
    }

    fn rank(&self) -> usize {
        self.pivots.len()
    }

    /// `y` with `L_S y = v_S`.
    fn forward(&self, v: &[f64]) -> Vec<f64> {
        let r = self.rank();
        let mut y = vec![0.0; r];
        for s in 0..r {
            let row = &self.rows[self.pivots[s]];
            let acc: f64 = (0..s).map(|t| row[t] * y[t]).sum();
            y[s] = (v[self.pivots[s]] - acc) / row[s];
        }
        y
    }

    /// `z` with `L_Sᵀ z = y`, indexed by pivot order.
    fn backward(&self, y: &[f64]) -> Vec<f64> {
        let r = self.rank();
        let mut z = vec![0.0; r];
        for s in (0..r).rev() {
            let acc: f64 = (s + 1..r).map(|t| self.rows[self.pivots[t]][s] * z[t]).sum();
            z[s] = (y[s] - acc) / self.rows[self.pivots[s]][s];
        }
        z
    }

    /// `‖P_V v‖²` given the inner products of `v` with every point image.
    fn projected_norm2(&self, inner: &[f64]) -> f64 {
        self.forward(inner).iter().map(|v| v * v).sum()
    }
}

pub fn gram_matrix(points: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    points.iter().map(|x| points.iter().map(|y| psi_inner(x, y, k)).collect()).collect()
}

/// A Monte-Carlo mean with its standard error and the bound it is tested against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionEstimate {
    pub mean: f64,
    pub standard_error: f64,
    pub trials: u64,
    /// `(k + 2D + 2)/(k(2d − k))`.
    pub bound: f64,
}

impl ProjectionEstimate {
    pub fn within(&self, k_se: f64) -> bool {
        self.mean <= self.bound + k_se * self.standard_error
    }
}

pub fn projection_bound(d: usize, k: usize, count: usize) -> f64 {
    (k + 2 * count + 2) as f64 / (k * (2 * d - k)) as f64
}

fn check_points(points: &[Vec<f64>], k: usize) -> Result<usize> {
    let d = points.first().map_or(k, Vec::len);
    check_k(d, k)?;
    for p in points {
        if p.len() != d {
            return invalid("points have different dimensions");
        }
        check_cube(p)?;
    }
    Ok(d)
}

/// Monte-Carlo `E‖P_V Ψ_k(X)‖²` for uniform cube `X`, where `V` is the span
/// of the images of `points`.
pub fn almost_orthonormality(
    points: &[Vec<f64>],
    k: usize,
    d: usize,
    trials: u64,
    rng: &RngStream,
) -> Result<ProjectionEstimate> {
    check_k(d, k)?;
    if trials < 2 {
        return invalid("need at least two trials");
    }
    if !points.is_empty() && check_points(points, k)? != d {
        return invalid(format!("points do not have dimension {d}"));
    }
    let bound = projection_bound(d, k, points.len());
    if points.is_empty() {
        return Ok(ProjectionEstimate { mean: 0.0, standard_error: 0.0, trials, bound });
    }
    let factor = GramFactor::new(&gram_matrix(points, k), RANK_TOL);
    const CHUNK: u64 = 1024;
    let chunks: Vec<u64> = (0..trials.div_ceil(CHUNK)).collect();
    let sums: Vec<(f64, f64)> = chunks
        .par_iter()
        .map(|&c| {
            let (mut s, mut s2) = (0.0, 0.0);
            for t in c * CHUNK..((c + 1) * CHUNK).min(trials) {
                let x = &random_cube_points(d, 1, &rng.derive(t))[0];
                let inner: Vec<f64> = points.iter().map(|p| psi_inner(p, x, k)).collect();
                let v = factor.projected_norm2(&inner);
                s += v;
                s2 += v * v;
            }
            (s, s2)
        })
        .collect();
    let (s, s2) = sums.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let n = trials as f64;
    let mean = s / n;
    let var = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(ProjectionEstimate { mean, standard_error: (var / n).sqrt(), trials, bound })
}

/// Exact `E‖P_V Ψ_k(X)‖²` by enumerating the cube, for `d ≤ 16`.
pub fn almost_orthonormality_exact(points: &[Vec<f64>], k: usize, d: usize) -> Result<f64> {
    if d > 16 {
        return invalid(format!("exhaustive enumeration is limited to d ≤ 16, got {d}"));
    }
    check_k(d, k)?;
    if points.is_empty() {
        return Ok(0.0);
    }
    check_points(points, k)?;
    let factor = GramFactor::new(&gram_matrix(points, k), RANK_TOL);
    let mut total = 0.0;
    for mask in 0u32..(1 << d) {
        let x: Vec<f64> = (0..d).map(|i| if mask >> i & 1 == 1 { -1.0 } else { 1.0 }).collect();
        let inner: Vec<f64> = points.iter().map(|p| psi_inner(p, &x, k)).collect();
        total += factor.projected_norm2(&inner);
    }
    Ok(total / (1u64 << d) as f64)
}

/// `q(x) = Σ λᵢ⟨uᵢ, x⟩²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticFn {
    pub vectors: Vec<Vec<f64>>,
    pub coefficients: Vec<f64>,
}

impl QuadraticFn {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.vectors.iter().zip(&self.coefficients).map(|(u, l)| l * dot(u, x).powi(2)).sum()
    }

    /// Largest `|⟨uᵢ, uⱼ⟩ − δᵢⱼ|`.
    pub fn orthonormality_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, u) in self.vectors.iter().enumerate() {
            for (j, v) in self.vectors.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(u, v) - want).abs());
            }
        }
        worst
    }

    pub fn max_coefficient(&self) -> f64 {
        self.coefficients.iter().fold(0.0, |a, l| a.max(l.abs()))
    }
}

/// Why a labeling could not be fitted inside the class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Infeasible {
    /// The images are linearly dependent: `Σ cᵢΨ_k(xᵢ) ≈ 0` for this `c`.
    RankDeficient { null_direction: Vec<f64>, residual: f64 },
    CoefficientBound { index: usize, coefficient: f64, bound: f64 },
    Incoherent { vector: usize, point: usize, value: f64, bound: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum FitOutcome {
    Feasible { q: QuadraticFn, margins: Vec<f64> },
    Infeasible { certificate: Infeasible },
}

impl FitOutcome {
    pub fn is_feasible(&self) -> bool {
        matches!(self, FitOutcome::Feasible { .. })
    }
}

/// The minimum-norm interpolator of the margins `yᵢ` in the span of the
/// images, checked against `|λᵢ| ≤ B/√k` and `|⟨uᵢ, xⱼ⟩| ≤ L`.
pub fn fit_quadratic_shatter(inst: &ShatterInstance, labels: &[f64], b: f64) -> Result<FitOutcome> {
    let n = inst.len();
    if labels.len() != n {
        return invalid(format!("{} labels for {n} points", labels.len()));
    }
    if let Some(i) = labels.iter().position(|&y| y != 1.0 && y != -1.0) {
        return invalid(format!("label {i} is {}, not ±1", labels[i]));
    }
    let (d, k) = (inst.dim(), inst.k);
    let gram = gram_matrix(&inst.points, k);
    let factor = GramFactor::new(&gram, RANK_TOL);
    if factor.rank() < n {
        let j = (0..n).find(|i| !factor.pivots.contains(i)).expect("a non-pivot exists");
        let inner: Vec<f64> = (0..n).map(|i| gram[j][i]).collect();
        let c = factor.backward(&factor.forward(&inner));
        let mut null_direction = vec![0.0; n];
        for (s, &p) in factor.pivots.iter().enumerate() {
            null_direction[p] = c[s];
        }
        null_direction[j] = -1.0;
        let residual = factor.residual[j].max(0.0).sqrt();
        return Ok(FitOutcome::Infeasible { certificate: Infeasible::RankDeficient { null_direction, residual } });
    }
    let z = factor.backward(&factor.forward(labels));
    let mut alpha = vec![0.0; n];
    for (s, &p) in factor.pivots.iter().enumerate() {
        alpha[p] = z[s];
    }
    let mut v = Matrix::zeros(d, d);
    for (x, a) in inst.points.iter().zip(&alpha) {
        let psi = psi_k(x, k)?;
        for i in 0..d {
            for j in 0..d {
                v.set(i, j, v.get(i, j) + a * psi.get(i, j));
            }
        }
    }
    let (values, vectors) = symmetric_eigen(&v)?;
    let cutoff = 1e-12 * v.frobenius_norm().max(f64::MIN_POSITIVE);
    let scale = ((k * (2 * d - k)) as f64).sqrt();
    let (mut coefficients, mut kept) = (Vec::new(), Vec::new());
    for (lam, u) in values.into_iter().zip(vectors) {
        if lam.abs() > cutoff {
            coefficients.push(lam / scale);
            kept.push(u);
        }
    }
    let q = QuadraticFn { vectors: kept, coefficients };
    let bound = b / (k as f64).sqrt();
    if let Some(i) = q.coefficients.iter().position(|l| l.abs() > bound) {
        return Ok(FitOutcome::Infeasible {
            certificate: Infeasible::CoefficientBound { index: i, coefficient: q.coefficients[i], bound },
        });
    }
    for (vi, u) in q.vectors.iter().enumerate() {
        for (pj, x) in inst.points.iter().enumerate() {
            let value = dot(u, x);
            if value.abs() > inst.l {
                return Ok(FitOutcome::Infeasible {
                    certificate: Infeasible::Incoherent { vector: vi, point: pj, value, bound: inst.l },
                });
            }
        }
    }
    let margins = inst.points.iter().zip(labels).map(|(x, y)| q.eval(x) * y).collect();
    Ok(FitOutcome::Feasible { q, margins })
}

/// Per-point margins `f(xᵢ)·yᵢ`; passes iff all are at least one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShatterCheck {
    pub passed: bool,
    pub margins: Vec<f64>,
}

pub fn verify_shattering(
    inst: &ShatterInstance,
    labels: &[f64],
    f: impl Fn(&[f64]) -> Result<f64>,
) -> Result<ShatterCheck> {
    if labels.len() != inst.len() {
        return invalid(format!("{} labels for {} points", labels.len(), inst.len()));
    }
    let margins = inst.points.iter().zip(labels).map(|(x, y)| Ok(f(x)? * y)).collect::<Result<Vec<f64>>>()?;
    Ok(ShatterCheck { passed: margins.iter().all(|&m| m >= 1.0), margins })
}

/// Kernel draws `(a, b)` for `n_reps` repetitions of every term of `q`,
/// repetition-major.
fn kernel_draws(q: &QuadraticFn, n_reps: usize, kernel: &QuadKernel, rng: &RngStream) -> Vec<(f64, f64)> {
    let mut g = rng.generator();
    (0..n_reps * q.vectors.len()).map(|_| kernel.sample_with(&mut g)).collect()
}

/// `Σⱼ Σᵢ (2λᵢbᵢⱼL²/n)·relu(⟨uᵢ, x⟩/L − aᵢⱼ)`, whose mean is `2q(x)`.
fn ramp_sum(q: &QuadraticFn, draws: &[(f64, f64)], n_reps: usize, l: f64, x: &[f64]) -> f64 {
    let terms = q.vectors.len();
    let z: Vec<f64> = q.vectors.iter().map(|u| dot(u, x) / l).collect();
    let mut total = 0.0;
    for (idx, &(a, b)) in draws.iter().enumerate() {
        let i = idx % terms;
        total += 2.0 * q.coefficients[i] * b * l * l / n_reps as f64 * (z[i] - a).max(0.0);
    }
    total
}

/// A ReLU network computing a ramp average, with its norms.
#[derive(Clone, Debug)]
pub struct ReluRealization {
    /// Input is `x` with a trailing constant 1 that carries the biases.
    pub net: NetworkSpec,
    pub n_reps: usize,
    /// Spectral norm of the hidden weights without the bias column.
    pub hidden_spectral_norm: f64,
    /// `√n_reps / L`.
    pub expected_hidden_norm: f64,
    pub output_weight_norm: f64,
    /// `2L²·c·‖λ‖/√n_reps`, with `c` the kernel's bound on `|b|`.
    pub output_weight_bound: f64,
}

impl ReluRealization {
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        let mut input = x.to_vec();
        input.push(1.0);
        Ok(self.net.forward(&input)?[0])
    }
}

/// Hidden unit `j·t + i` (repetition `j`, term `i`) computes
/// `relu(⟨uᵢ, x⟩/L − aᵢⱼ)` and has output weight `2λᵢbᵢⱼL²/n`.
pub fn quad_to_relu_net(
    q: &QuadraticFn,
    inst: &ShatterInstance,
    n_reps: usize,
    kernel: &QuadKernel,
    rng: &RngStream,
) -> Result<ReluRealization> {
    if n_reps == 0 {
        return invalid("need at least one repetition");
    }
    let draws = kernel_draws(q, n_reps, kernel, rng);
    build_relu_net(q, inst, n_reps, kernel, &draws)
}

fn build_relu_net(
    q: &QuadraticFn,
    inst: &ShatterInstance,
    n_reps: usize,
    kernel: &QuadKernel,
    draws: &[(f64, f64)],
) -> Result<ReluRealization> {
    let (d, l, terms) = (inst.dim(), inst.l, q.vectors.len());
    let hidden = n_reps * terms;
    if hidden == 0 {
        let class = NetworkClass::new(vec![d + 1, 1, 1], Activation::Relu, None, 0.0, 0.0)?;
        let net = NetworkSpec::new(class, vec![Matrix::zeros(1, d + 1), Matrix::zeros(1, 1)])?;
        return Ok(ReluRealization {
            net,
            n_reps,
            hidden_spectral_norm: 0.0,
            expected_hidden_norm: 0.0,
            output_weight_norm: 0.0,
            output_weight_bound: 0.0,
        });
    }
    let mut w1 = Vec::with_capacity(hidden * (d + 1));
    let mut u_only = Vec::with_capacity(hidden * d);
    let mut w2 = Vec::with_capacity(hidden);
    for (idx, &(a, b)) in draws.iter().enumerate() {
        let i = idx % terms;
        u_only.extend(q.vectors[i].iter().map(|v| v / l));
        w1.extend(q.vectors[i].iter().map(|v| v / l));
        w1.push(-a);
        w2.push(2.0 * q.coefficients[i] * b * l * l / n_reps as f64);
    }
    let w1 = Matrix::new(hidden, d + 1, w1)?;
    let w2 = Matrix::new(1, hidden, w2)?;
    let hidden_spectral_norm = spectral_norm(&Matrix::new(hidden, d, u_only)?);
    let output_weight_norm = w2.frobenius_norm();
    let lam_norm = q.coefficients.iter().map(|v| v * v).sum::<f64>().sqrt();
    let r = spectral_norm(&w1).max(output_weight_norm);
    let big_r = w1.frobenius_norm().max(output_weight_norm);
    let class = NetworkClass::new(vec![d + 1, hidden, 1], Activation::Relu, None, r * (1.0 + 1e-9), big_r * (1.0 + 1e-9))?;
    Ok(ReluRealization {
        net: NetworkSpec::new(class, vec![w1, w2])?,
        n_reps,
        hidden_spectral_norm,
        expected_hidden_norm: (n_reps as f64).sqrt() / l,
        output_weight_norm,
        output_weight_bound: 2.0 * l * l * kernel.c_bound * lam_norm / (n_reps as f64).sqrt(),
    })
}

/// Outcome of the search for a kernel draw whose network separates the sample.
#[derive(Clone, Debug)]
pub struct RealizationSearch {
    pub n_reps: usize,
    /// Attempts used at the final `n_reps`, counting from one.
    pub attempts: usize,
    pub realization: Option<ReluRealization>,
    pub check: Option<ShatterCheck>,
}

/// Doubles `n_reps = c·⌈ln d⌉` from `c = 1` up to `max_reps`, trying
/// `max_attempts` kernel draws at each size, until every point has
/// `|f(x) − 2q(x)| < 1`; the network of that draw is then checked on the
/// sample through its forward pass.
pub fn find_relu_realization(
    q: &QuadraticFn,
    inst: &ShatterInstance,
    labels: &[f64],
    kernel: &QuadKernel,
    max_attempts: usize,
    max_reps: usize,
    rng: &RngStream,
) -> Result<RealizationSearch> {
    let base = ((inst.dim() as f64).ln().ceil() as usize).max(1);
    let targets: Vec<f64> = inst.points.iter().map(|x| 2.0 * q.eval(x)).collect();
    let mut n_reps = base;
    let mut level = 0u64;
    let mut last = (base, 0);
    while n_reps <= max_reps {
        for attempt in 0..max_attempts {
            let r = rng.derive(level).derive(attempt as u64);
            let draws = kernel_draws(q, n_reps, kernel, &r);
            let close = inst
                .points
                .iter()
                .zip(&targets)
                .all(|(x, t)| (ramp_sum(q, &draws, n_reps, inst.l, x) - t).abs() < 1.0);
            last = (n_reps, attempt + 1);
            if close {
                let real = build_relu_net(q, inst, n_reps, kernel, &draws)?;
                let check = verify_shattering(inst, labels, |x| real.eval(x))?;
                return Ok(RealizationSearch { n_reps, attempts: attempt + 1, realization: Some(real), check: Some(check) });
            }
        }
        n_reps *= 2;
        level += 1;
    }
    Ok(RealizationSearch { n_reps: last.0, attempts: last.1, realization: None, check: None })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShatterConfig {
    pub d: usize,
    pub k: usize,
    /// Number of points; `⌊dk/(8 ln d)⌋` when absent.
    pub count: Option<usize>,
    pub b: f64,
    pub labelings: usize,
    /// Feasible labelings that also get a ReLU realization.
    pub relu_checks: usize,
    pub max_attempts: usize,
    pub max_reps: usize,
}

impl Default for ShatterConfig {
    fn default() -> Self {
        Self { d: 64, k: 4, count: None, b: DEFAULT_B, labelings: 100, relu_checks: 10, max_attempts: 20, max_reps: 1 << 15 }
    }
}

impl ShatterConfig {
    pub fn point_count(&self) -> usize {
        self.count.unwrap_or_else(|| default_point_count(self.d, self.k))
    }
}

/// `⌊dk/(8 ln d)⌋`, at least one.
pub fn default_point_count(d: usize, k: usize) -> usize {
    if d < 2 {
        return 1;
    }
    ((d * k) as f64 / (8.0 * (d as f64).ln())).floor().max(1.0) as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl MarginStats {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(Self { min, mean: values.iter().sum::<f64>() / values.len() as f64, max })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReluSummary {
    pub labeling: usize,
    pub n_reps: usize,
    pub attempts: usize,
    pub passed: bool,
    pub min_margin: Option<f64>,
    pub hidden_units: usize,
    pub hidden_spectral_norm: Option<f64>,
    pub expected_hidden_norm: Option<f64>,
    pub output_weight_norm: Option<f64>,
    pub output_weight_bound: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShatterReport {
    pub d: usize,
    pub k: usize,
    #[serde(rename = "D")]
    pub count: usize,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub labelings_tried: usize,
    pub feasible_count: usize,
    /// Fit margins over every feasible labeling and point.
    pub margin_stats: Option<MarginStats>,
    pub max_orthonormality_residual: f64,
    pub max_coefficient: f64,
    pub infeasible: Vec<(usize, Infeasible)>,
    pub relu_net_norms: Vec<ReluSummary>,
    /// The first ReLU realization found, for export.
    #[serde(skip)]
    pub first_network: Option<NetworkSpec>,
}

impl ShatterReport {
    /// ReLU realizations that separated the sample.
    pub fn relu_passed(&self) -> usize {
        self.relu_net_norms.iter().filter(|r| r.passed).count()
    }
}

pub fn random_labels(count: usize, rng: &RngStream) -> Vec<f64> {
    use rand::Rng;
    let mut g = rng.generator();
    (0..count).map(|_| if g.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

/// Random points, random labelings, quadratic fits and ReLU realizations
/// for the first `relu_checks` feasible labelings.
pub fn run_shatter_demo(cfg: &ShatterConfig, rng: &RngStream) -> Result<ShatterReport> {
    let count = cfg.point_count();
    if !(cfg.b > 0.0) {
        return invalid("B must be positive");
    }
    let inst = ShatterInstance::random(cfg.d, cfg.k, count, &rng.derive(POINT_STREAM))?;
    let label_rng = rng.derive(LABEL_STREAM);
    let fits: Vec<Result<(Vec<f64>, FitOutcome)>> = (0..cfg.labelings)
        .into_par_iter()
        .map(|i| {
            let labels = random_labels(count, &label_rng.derive(i as u64));
            let fit = fit_quadratic_shatter(&inst, &labels, cfg.b)?;
            Ok((labels, fit))
        })
        .collect();
    let fits = fits.into_iter().collect::<Result<Vec<_>>>()?;
    let mut margins = Vec::new();
    let mut infeasible = Vec::new();
    let mut residual = 0.0f64;
    let mut max_coefficient = 0.0f64;
    let mut chosen = Vec::new();
    for (i, (labels, fit)) in fits.iter().enumerate() {
        match fit {
            FitOutcome::Feasible { q, margins: m } => {
                margins.extend_from_slice(m);
                residual = residual.max(q.orthonormality_residual());
                max_coefficient = max_coefficient.max(q.max_coefficient());
                if chosen.len() < cfg.relu_checks {
                    chosen.push((i, labels.clone(), q.clone()));
                }
            }
            FitOutcome::Infeasible { certificate } => infeasible.push((i, certificate.clone())),
        }
    }
    let kernel = QuadKernel::build();
    let relu_rng = rng.derive(RELU_STREAM);
    let relu: Vec<Result<(ReluSummary, Option<NetworkSpec>)>> = chosen
        .par_iter()
        .enumerate()
        .map(|(pos, (i, labels, q))| {
            let s = find_relu_realization(q, &inst, labels, &kernel, cfg.max_attempts, cfg.max_reps, &relu_rng.derive(*i as u64))?;
            let real = s.realization.as_ref();
            let net = if pos == 0 { real.map(|r| r.net.clone()) } else { None };
            let summary = ReluSummary {
                labeling: *i,
                n_reps: s.n_reps,
                attempts: s.attempts,
                passed: s.check.as_ref().is_some_and(|c| c.passed),
                min_margin: s.check.as_ref().map(|c| c.margins.iter().copied().fold(f64::INFINITY, f64::min)),
                hidden_units: s.n_reps * q.vectors.len(),
                hidden_spectral_norm: real.map(|r| r.hidden_spectral_norm),
                expected_hidden_norm: real.map(|r| r.expected_hidden_norm),
                output_weight_norm: real.map(|r| r.output_weight_norm),
                output_weight_bound: real.map(|r| r.output_weight_bound),
            };
            Ok((summary, net))
        })
        .collect();
    let mut relu_net_norms = Vec::with_capacity(relu.len());
    let mut first_network = None;
    for r in relu {
        let (summary, net) = r?;
        relu_net_norms.push(summary);
        first_network = first_network.or(net);
    }
    Ok(ShatterReport {
        d: cfg.d,
        k: cfg.k,
        count,
        b: cfg.b,
        l: inst.l,
        labelings_tried: cfg.labelings,
        feasible_count: cfg.labelings - infeasible.len(),
        margin_stats: MarginStats::of(&margins),
        max_orthonormality_residual: residual,
        max_coefficient,
        infeasible,
        relu_net_norms,
        first_network,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cube(bits: &[bool]) -> Vec<f64> {
        bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect()
    }

    proptest! {
        #[test]
        fn psi_has_unit_norm_and_sign_symmetry(bits in prop::collection::vec(any::<bool>(), 1..12), k_frac in 0.0f64..1.0) {
            let x = cube(&bits);
            let d = x.len();
            let k = 1 + ((d - 1) as f64 * k_frac) as usize;
            let p = psi_k(&x, k).unwrap();
            prop_assert!((p.frobenius_norm() - 1.0).abs() < 1e-12);
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            prop_assert_eq!(psi_k(&neg, k).unwrap(), p.clone());
            prop_assert_eq!(p.clone(), p.transpose());
        }

        #[test]
        fn inner_product_closed_form(a in prop::collection::vec(any::<bool>(), 6), b in prop::collection::vec(any::<bool>(), 6), k in 1usize..=6) {
            let (x, y) = (cube(&a), cube(&b));
            let (px, py) = (psi_k(&x, k).unwrap(), psi_k(&y, k).unwrap());
            let direct: f64 = px.data().iter().zip(py.data()).map(|(u, v)| u * v).sum();
            prop_assert!((direct - psi_inner(&x, &y, k)).abs() < 1e-12);
        }
    }

    #[test]
    fn psi_support_and_full_case() {
        let x = cube(&[true, false, true, true, false]);
        let p = psi_k(&x, 2).unwrap();
        let s = 1.0 / ((2 * 8) as f64).sqrt();
        assert_eq!(p.get(3, 4), 0.0);
        assert_eq!(p.get(1, 4), x[1] * x[4] * s);
        let full = psi_k(&x, 5).unwrap();
        assert!((full.get(3, 4) - x[3] * x[4] / 5.0).abs() < 1e-15);
        assert!(psi_k(&[1.0, 0.5], 1).is_err());
        assert!(psi_k(&[1.0, 1.0], 3).is_err());
    }

    #[test]
    fn projection_onto_own_image_and_empty_span() {
        let x = cube(&[true, false, true, true]);
        let f = GramFactor::new(&gram_matrix(&[x.clone()], 2), RANK_TOL);
        assert!((f.projected_norm2(&[psi_inner(&x, &x, 2)]) - 1.0).abs() < 1e-12);
        let est = almost_orthonormality(&[], 2, 4, 10, &RngStream::new(1)).unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(almost_orthonormality_exact(&[], 2, 4).unwrap(), 0.0);
    }

    #[test]
    fn exhaustive_projection_matches_monte_carlo_and_bound() {
        let (d, k) = (10, 3);
        let pts = random_cube_points(d, 4, &RngStream::new(2));
        let exact = almost_orthonormality_exact(&pts, k, d).unwrap();
        let mc = almost_orthonormality(&pts, k, d, 20_000, &RngStream::new(3)).unwrap();
        assert!((mc.mean - exact).abs() <= 4.0 * mc.standard_error, "{} vs {exact}", mc.mean);
        assert!(exact <= projection_bound(d, k, 4));
    }

    #[test]
    fn duplicate_points_give_a_null_direction() {
        let x = cube(&[true, false, true, true, false, false]);
        let y = cube(&[false, false, true, true, true, false]);
        let inst = ShatterInstance::new(vec![x.clone(), y, x], 2).unwrap();
        match fit_quadratic_shatter(&inst, &[1.0, 1.0, -1.0], 8.0).unwrap() {
            FitOutcome::Infeasible { certificate: Infeasible::RankDeficient { null_direction, residual } } => {
                assert!(residual < 1e-6);
                let g = gram_matrix(&inst.points, 2);
                let gn: Vec<f64> = g.iter().map(|row| dot(row, &null_direction)).collect();
                assert!(gn.iter().all(|v| v.abs() < 1e-9));
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn single_point_fit_is_rank_one() {
        let x = cube(&[true, false, false, true, true, false, true, true]);
        let inst = ShatterInstance::new(vec![x.clone()], 3).unwrap();
        for y in [1.0, -1.0] {
            let FitOutcome::Feasible { q, margins } = fit_quadratic_shatter(&inst, &[y], 8.0).unwrap() else {
                panic!("single point must be feasible")
            };
            assert!((margins[0] - 1.0).abs() < 1e-10);
            assert!((q.eval(&x) - y).abs() < 1e-10);
        }
    }

    #[test]
    fn fit_interpolates_random_labels() {
        let inst = ShatterInstance::random(32, 4, 6, &RngStream::new(4)).unwrap();
        let labels = random_labels(6, &RngStream::new(5));
        let FitOutcome::Feasible { q, margins } = fit_quadratic_shatter(&inst, &labels, 8.0).unwrap() else {
            panic!("fit failed")
        };
        assert!(margins.iter().all(|m| (m - 1.0).abs() < 1e-8));
        assert!(q.orthonormality_residual() < 1e-10);
        assert!(q.vectors.len() <= 2 * inst.k);
        let flipped: Vec<f64> = labels.iter().enumerate().map(|(i, &y)| if i == 0 { -y } else { y }).collect();
        let check = verify_shattering(&inst, &flipped, |x| Ok(q.eval(x))).unwrap();
        assert!(!check.passed);
        assert!(check.margins[0] < 0.0);
    }

    #[test]
    fn zero_quadratic_gives_zero_network() {
        let inst = ShatterInstance::random(8, 2, 3, &RngStream::new(6)).unwrap();
        let q = QuadraticFn { vectors: vec![vec![1.0; 8].iter().map(|v| v / 8f64.sqrt()).collect()], coefficients: vec![0.0] };
        let real = quad_to_relu_net(&q, &inst, 5, &QuadKernel::build(), &RngStream::new(7)).unwrap();
        for x in &inst.points {
            assert_eq!(real.eval(x).unwrap(), 0.0);
        }
    }

    #[test]
    fn network_matches_ramp_sum_and_block_norm() {
        let inst = ShatterInstance::random(16, 2, 4, &RngStream::new(8)).unwrap();
        let labels = random_labels(4, &RngStream::new(9));
        let FitOutcome::Feasible { q, .. } = fit_quadratic_shatter(&inst, &labels, 8.0).unwrap() else { panic!() };
        let kernel = QuadKernel::build();
        let r = RngStream::new(10);
        let real = quad_to_relu_net(&q, &inst, 7, &kernel, &r).unwrap();
        let draws = kernel_draws(&q, 7, &kernel, &r);
        for x in &inst.points {
            let a = real.eval(x).unwrap();
            let b = ramp_sum(&q, &draws, 7, inst.l, x);
            assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
        }
        assert!((real.hidden_spectral_norm - real.expected_hidden_norm).abs() < 1e-6 * real.expected_hidden_norm);
        assert!(real.output_weight_norm <= real.output_weight_bound);
    }

    #[test]
    fn ramp_average_is_unbiased_for_twice_q() {
        let inst = ShatterInstance::random(16, 2, 3, &RngStream::new(11)).unwrap();
        let labels = random_labels(3, &RngStream::new(12));
        let FitOutcome::Feasible { q, .. } = fit_quadratic_shatter(&inst, &labels, 8.0).unwrap() else { panic!() };
        let kernel = QuadKernel::build();
        let trials = 20_000u64;
        for x in &inst.points {
            let vals: Vec<f64> = (0..trials)
                .map(|t| ramp_sum(&q, &kernel_draws(&q, 1, &kernel, &RngStream::new(13).derive(t)), 1, inst.l, x))
                .collect();
            let mean = vals.iter().sum::<f64>() / trials as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
            let se = (var / trials as f64).sqrt();
            assert!((mean - 2.0 * q.eval(x)).abs() <= 3.0 * se, "{mean} vs {}", 2.0 * q.eval(x));
        }
    }

    #[test]
    fn default_count() {
        assert_eq!(default_point_count(64, 4), 7);
        assert_eq!(default_point_count(1, 1), 1);
    }
}
