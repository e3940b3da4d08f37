//! σ-estimators: random vectors with a claimed mean and a claimed bound on
//! the variance along every unit direction.
//!
//! A sampler only *claims* its target and σ. [`verify_estimator`] measures
//! both by Monte Carlo, and the combinators here propagate claims with the
//! closed-form rules for averaging, medians, linear maps, sums and products.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::numerics::{self, dot, median_vectors, norm_inf, Matrix, RngStream};

pub const MAX_CANONICAL_DIRECTIONS: usize = 32;
pub const DEFAULT_DIRECTIONS: usize = 64;
const CHUNK: u64 = 256;
/// Reserved child index for direction probes; trials use `0..trials`.
const DIRECTION_STREAM: u64 = u64::MAX;

type DrawFn = dyn Fn(&RngStream) -> Vec<f64> + Send + Sync;

/// A randomized procedure producing vectors, with its claimed mean, σ and
/// expected bit cost.
#[derive(Clone)]
pub struct EstimatorSampler {
    target: Vec<f64>,
    sigma: f64,
    bits: f64,
    draw: Arc<DrawFn>,
}

impl std::fmt::Debug for EstimatorSampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EstimatorSampler")
            .field("dim", &self.dim())
            .field("sigma", &self.sigma)
            .field("bits", &self.bits)
            .finish_non_exhaustive()
    }
}

impl EstimatorSampler {
    pub fn new(
        target: Vec<f64>,
        sigma: f64,
        bits: f64,
        draw: impl Fn(&RngStream) -> Vec<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if target.is_empty() {
            return invalid("estimator target must have positive dimension");
        }
        numerics::check_finite(&target, "estimator target")?;
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return invalid(format!("sigma must be finite and nonnegative, got {sigma}"));
        }
        Ok(Self { target, sigma, bits, draw: Arc::new(draw) })
    }

    /// The deterministic estimator `X ≡ x`.
    pub fn constant(x: Vec<f64>) -> Result<Self> {
        let v = x.clone();
        Self::new(x, 0.0, 0.0, move |_| v.clone())
    }

    /// `N(mean, σ² I)`.
    pub fn gaussian(mean: Vec<f64>, sigma: f64) -> Result<Self> {
        let m = mean.clone();
        Self::new(mean, sigma, 0.0, move |rng| {
            let mut g = rng.generator();
            m.iter().map(|mu| mu + sigma * g.sample::<f64, _>(StandardNormal)).collect()
        })
    }

    pub fn dim(&self) -> usize {
        self.target.len()
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn bits(&self) -> f64 {
        self.bits
    }

    pub fn with_bits(mut self, bits: f64) -> Self {
        self.bits = bits;
        self
    }

    pub fn sample(&self, rng: &RngStream) -> Vec<f64> {
        (self.draw)(rng)
    }

    /// `aX`, a `|a|σ`-estimator of `a x`.
    pub fn scaled(&self, a: f64) -> Self {
        let inner = self.draw.clone();
        Self {
            target: self.target.iter().map(|t| a * t).collect(),
            sigma: a.abs() * self.sigma,
            bits: self.bits,
            draw: Arc::new(move |rng| inner(rng).into_iter().map(|v| a * v).collect()),
        }
    }
}

/// Average of `k` independent draws: claimed σ/√k at k times the bits.
pub fn mean_combine(e: &EstimatorSampler, k: usize) -> Result<EstimatorSampler> {
    if k == 0 {
        return invalid("mean_combine needs k >= 1");
    }
    let inner = e.draw.clone();
    let dim = e.dim();
    Ok(EstimatorSampler {
        target: e.target.clone(),
        sigma: e.sigma / (k as f64).sqrt(),
        bits: e.bits * k as f64,
        draw: Arc::new(move |rng| {
            let mut acc = vec![0.0; dim];
            for j in 0..k {
                let x = inner(&rng.derive(j as u64));
                acc.iter_mut().zip(&x).for_each(|(a, v)| *a += v);
            }
            acc.iter_mut().for_each(|a| *a /= k as f64);
            acc
        }),
    })
}

/// Coordinatewise median of one draw from each of several independent
/// estimators of the same target.
#[derive(Clone, Debug)]
pub struct MedianSampler {
    parts: Vec<EstimatorSampler>,
}

impl MedianSampler {
    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn sample(&self, rng: &RngStream) -> Vec<f64> {
        let draws: Vec<Vec<f64>> =
            self.parts.iter().enumerate().map(|(i, p)| p.sample(&rng.derive(i as u64))).collect();
        median_vectors(&draws)
    }
}

pub fn median_combine(estimators: &[EstimatorSampler]) -> Result<MedianSampler> {
    let Some(first) = estimators.first() else {
        return invalid("median_combine needs at least one estimator");
    };
    if estimators.iter().any(|e| e.target != first.target) {
        return invalid("median_combine estimators must share dimension and target");
    }
    Ok(MedianSampler { parts: estimators.to_vec() })
}

/// `A X`, claimed σ scaled by the spectral norm of `A`.
pub fn affine_map(e: &EstimatorSampler, a: &Matrix) -> Result<EstimatorSampler> {
    if a.cols() != e.dim() {
        return invalid(format!("affine_map: matrix has {} columns, estimator dim {}", a.cols(), e.dim()));
    }
    let inner = e.draw.clone();
    let a_owned = a.clone();
    Ok(EstimatorSampler {
        target: a.matvec(&e.target)?,
        sigma: numerics::spectral_norm(a) * e.sigma,
        bits: e.bits,
        draw: Arc::new(move |rng| a_owned.matvec(&inner(rng)).expect("shape checked at construction")),
    })
}

/// `σ'² = ∏(σᵢ² + ‖xᵢ‖∞²) − ∏‖xᵢ‖∞²` for the coordinatewise product of
/// independent estimators.
pub fn product_sigma(sigmas: &[f64], targets: &[&[f64]]) -> f64 {
    let mut with = 1.0;
    let mut without = 1.0;
    for (s, t) in sigmas.iter().zip(targets) {
        let m2 = norm_inf(t).powi(2);
        with *= s * s + m2;
        without *= m2;
    }
    (with - without).max(0.0).sqrt()
}

pub fn product_combine(estimators: &[EstimatorSampler]) -> Result<EstimatorSampler> {
    let Some(first) = estimators.first() else {
        return invalid("product_combine needs at least one estimator");
    };
    let dim = first.dim();
    if estimators.iter().any(|e| e.dim() != dim) {
        return invalid("product_combine estimators must share dimension");
    }
    let mut target = vec![1.0; dim];
    for e in estimators {
        target.iter_mut().zip(&e.target).for_each(|(a, b)| *a *= b);
    }
    let sigmas: Vec<f64> = estimators.iter().map(|e| e.sigma).collect();
    let targets: Vec<&[f64]> = estimators.iter().map(|e| e.target.as_slice()).collect();
    let sigma = product_sigma(&sigmas, &targets);
    let draws: Vec<Arc<DrawFn>> = estimators.iter().map(|e| e.draw.clone()).collect();
    Ok(EstimatorSampler {
        target,
        sigma,
        bits: estimators.iter().map(|e| e.bits).sum(),
        draw: Arc::new(move |rng| {
            let mut acc = vec![1.0; dim];
            for (i, d) in draws.iter().enumerate() {
                let x = d(&rng.derive(i as u64));
                acc.iter_mut().zip(&x).for_each(|(a, v)| *a *= v);
            }
            acc
        }),
    })
}

pub fn sum_combine(e1: &EstimatorSampler, e2: &EstimatorSampler) -> Result<EstimatorSampler> {
    if e1.dim() != e2.dim() {
        return invalid(format!("sum_combine: dimensions {} and {} differ", e1.dim(), e2.dim()));
    }
    let (d1, d2) = (e1.draw.clone(), e2.draw.clone());
    Ok(EstimatorSampler {
        target: e1.target.iter().zip(&e2.target).map(|(a, b)| a + b).collect(),
        sigma: e1.sigma + e2.sigma,
        bits: e1.bits + e2.bits,
        draw: Arc::new(move |rng| {
            let a = d1(&rng.derive(0));
            let b = d2(&rng.derive(1));
            a.iter().zip(&b).map(|(x, y)| x + y).collect()
        }),
    })
}

/// Measured variance along one probe direction.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct DirectionStat {
    pub variance: f64,
    pub standard_error: f64,
}

/// Monte-Carlo summary of an estimator's mean and directional variance.
///
/// An estimator of several points at once is summarized per point and the
/// worst point is reported.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct VarianceReport {
    pub trials: u64,
    pub points: usize,
    pub claimed_sigma: f64,
    pub mean_error_inf: f64,
    /// Largest per-coordinate standard error of the empirical mean.
    pub mean_standard_error: f64,
    /// Largest `|mean_i − target_i| / se_i` over coordinates.
    pub mean_error_z: f64,
    pub worst_directional_var: f64,
    pub worst_direction: Vec<f64>,
    pub worst_point: usize,
    /// Standard error of `worst_directional_var`.
    pub standard_error: f64,
    /// For each probe direction, the stat of the point where it is largest.
    pub directions: Vec<DirectionStat>,
    /// Every (point, direction) cell, point-major.
    #[serde(skip)]
    pub cells: Vec<DirectionStat>,
}

impl VarianceReport {
    /// Every coordinate of the empirical mean lies within `k` standard errors
    /// of the target.
    pub fn mean_within(&self, k: f64) -> bool {
        self.mean_error_z <= k
    }

    /// Every probe direction at every point has variance at most `bound + k·SE`.
    pub fn variance_within(&self, bound: f64, k: f64) -> bool {
        self.cells.iter().all(|d| d.variance <= bound + k * d.standard_error)
    }
}

/// Running error sums for an estimator of `points` vectors in `ℝ^dim`,
/// stored point-major.
#[derive(Clone, Debug)]
pub struct ErrorMoments {
    points: usize,
    dim: usize,
    trials: u64,
    sum_y: Vec<f64>,
    sum_y2: Vec<f64>,
    sum_z: Vec<f64>,
    sum_z2: Vec<f64>,
}

impl ErrorMoments {
    pub fn new(points: usize, dim: usize, num_directions: usize) -> Self {
        let (n, c) = (points * dim, points * num_directions);
        Self {
            points,
            dim,
            trials: 0,
            sum_y: vec![0.0; n],
            sum_y2: vec![0.0; n],
            sum_z: vec![0.0; c],
            sum_z2: vec![0.0; c],
        }
    }

    pub fn trials(&self) -> u64 {
        self.trials
    }

    /// Adds one sample; a wrong length or non-finite entry is reported as text.
    pub fn push(&mut self, x: &[f64], target: &[f64], dirs: &[Vec<f64>]) -> std::result::Result<(), String> {
        let (dim, nd) = (self.dim, dirs.len());
        if x.len() != self.points * dim {
            return Err(format!("sample has {} entries, expected {}", x.len(), self.points * dim));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(format!("non-finite coordinate {i}"));
        }
        let mut y = vec![0.0; dim];
        for p in 0..self.points {
            for i in 0..dim {
                let k = p * dim + i;
                y[i] = x[k] - target[k];
                self.sum_y[k] += y[i];
                self.sum_y2[k] += y[i] * y[i];
            }
            for (j, u) in dirs.iter().enumerate() {
                let z = dot(u, &y).powi(2);
                self.sum_z[p * nd + j] += z;
                self.sum_z2[p * nd + j] += z * z;
            }
        }
        self.trials += 1;
        Ok(())
    }

    pub fn merge(&mut self, o: &Self) {
        for (a, b) in [(&mut self.sum_y, &o.sum_y), (&mut self.sum_y2, &o.sum_y2)] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in [(&mut self.sum_z, &o.sum_z), (&mut self.sum_z2, &o.sum_z2)] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.trials += o.trials;
    }

    pub fn report(&self, target: &[f64], dirs: &[Vec<f64>], claimed_sigma: f64) -> Result<VarianceReport> {
        if self.trials < 2 {
            return invalid("need at least two trials to estimate a variance");
        }
        if dirs.is_empty() {
            return invalid("need at least one direction");
        }
        let n = self.trials as f64;
        let scale = 1e-12 * (1.0 + norm_inf(target));
        let mut mean_error_inf = 0.0f64;
        let mut mean_se = 0.0f64;
        let mut mean_z = 0.0f64;
        for k in 0..self.sum_y.len() {
            let mean = self.sum_y[k] / n;
            let var = ((self.sum_y2[k] - n * mean * mean) / (n - 1.0)).max(0.0);
            let se = (var / n).sqrt();
            mean_error_inf = mean_error_inf.max(mean.abs());
            mean_se = mean_se.max(se);
            let z = if se > 0.0 {
                mean.abs() / se
            } else if mean.abs() <= scale {
                0.0
            } else {
                f64::INFINITY
            };
            mean_z = mean_z.max(z);
        }
        let cells: Vec<DirectionStat> = (0..self.sum_z.len())
            .map(|c| {
                let mean = self.sum_z[c] / n;
                let var = ((self.sum_z2[c] - n * mean * mean) / (n - 1.0)).max(0.0);
                DirectionStat { variance: mean, standard_error: (var / n).sqrt() }
            })
            .collect();
        let nd = dirs.len();
        let directions: Vec<DirectionStat> = (0..nd)
            .map(|j| {
                (0..self.points)
                    .map(|p| cells[p * nd + j].clone())
                    .max_by(|a, b| a.variance.total_cmp(&b.variance))
                    .expect("at least one point")
            })
            .collect();
        let worst = (0..cells.len())
            .max_by(|&a, &b| cells[a].variance.total_cmp(&cells[b].variance))
            .expect("at least one cell");
        Ok(VarianceReport {
            trials: self.trials,
            points: self.points,
            claimed_sigma,
            mean_error_inf,
            mean_standard_error: mean_se,
            mean_error_z: mean_z,
            worst_directional_var: cells[worst].variance,
            worst_direction: dirs[worst % nd].clone(),
            worst_point: worst / nd,
            standard_error: cells[worst].standard_error,
            directions,
            cells,
        })
    }
}

/// Probe directions: the first canonical basis vectors (at most 32), then
/// seeded random unit vectors up to `num_directions` in total.
pub fn probe_directions(dim: usize, num_directions: usize, rng: &RngStream) -> Vec<Vec<f64>> {
    let canonical = dim.min(MAX_CANONICAL_DIRECTIONS).min(num_directions);
    let mut dirs: Vec<Vec<f64>> = (0..canonical)
        .map(|i| {
            let mut e = vec![0.0; dim];
            e[i] = 1.0;
            e
        })
        .collect();
    let mut g = rng.generator();
    while dirs.len() < num_directions {
        dirs.push(numerics::random_unit(dim, &mut g));
    }
    dirs
}

/// Streams `trials` samples through [`ErrorMoments`] in fixed chunks merged
/// in chunk order, so the sums do not depend on the number of worker threads.
/// `draw(t)` produces trial `t`.
pub fn accumulate_trials<F>(
    trials: u64,
    points: usize,
    dim: usize,
    target: &[f64],
    dirs: &[Vec<f64>],
    draw: F,
) -> Result<ErrorMoments>
where
    F: Fn(u64) -> Result<Vec<f64>> + Sync,
{
    let chunks: Vec<u64> = (0..trials.div_ceil(CHUNK)).collect();
    let partials: Vec<Result<ErrorMoments>> = chunks
        .par_iter()
        .map(|&c| {
            let mut m = ErrorMoments::new(points, dim, dirs.len());
            for t in c * CHUNK..((c + 1) * CHUNK).min(trials) {
                let x = draw(t)?;
                m.push(&x, target, dirs).map_err(|reason| Error::ContractViolation { trial: t, reason })?;
            }
            Ok(m)
        })
        .collect();
    let mut total = ErrorMoments::new(points, dim, dirs.len());
    for p in partials {
        total.merge(&p?);
    }
    Ok(total)
}

/// Draws `trials` independent samples on child streams `0..trials` of `rng`
/// and measures mean error and `E⟨u, X − x⟩²` along probe directions.
pub fn verify_estimator(
    e: &EstimatorSampler,
    trials: u64,
    num_directions: usize,
    rng: &RngStream,
) -> Result<VarianceReport> {
    if trials < 100 {
        return invalid(format!("verify_estimator needs at least 100 trials, got {trials}"));
    }
    if num_directions == 0 {
        return invalid("verify_estimator needs at least one direction");
    }
    let dim = e.dim();
    let dirs = probe_directions(dim, num_directions, &rng.derive(DIRECTION_STREAM));
    let total = accumulate_trials(trials, 1, dim, &e.target, &dirs, |t| Ok(e.sample(&rng.derive(t))))?;
    total.report(&e.target, &dirs, e.sigma)
}

/// Empirical tail `Pr(|med − μ| > kσ)` of a scalar median sampler and its
/// binomial standard error.
pub fn median_tail(m: &MedianSampler, mu: f64, threshold: f64, trials: u64, rng: &RngStream) -> (f64, f64) {
    let hits: u64 = (0..trials.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            (c * CHUNK..((c + 1) * CHUNK).min(trials))
                .filter(|&t| (m.sample(&rng.derive(t))[0] - mu).abs() > threshold)
                .count() as u64
        })
        .sum();
    let p = hits as f64 / trials as f64;
    (p, (p * (1.0 - p) / trials as f64).sqrt())
}
