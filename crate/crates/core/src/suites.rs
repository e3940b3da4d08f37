//! Named verification suites shared by the command line and the acceptance
//! tests. Each check records the measured value, the bound it is held to,
//! the Monte-Carlo standard error and the comparison that decided it.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::{strongly_bounded_b, taylor_coeffs, Activation, QuadKernel, MAX_TAYLOR_ORDER};
use crate::codec::{count_bracketed, BracketBuilder, BracketedString};
use crate::compressor::bounds::random_member;
use crate::compressor::layers::{compress_activation_layer, default_eps, expected_depth_bound, TaylorBudget};
use crate::compressor::{NetworkClass, NetworkSpec, SampleSet};
use crate::error::{invalid, Error, Result};
use crate::estimators::{
    accumulate_trials, affine_map, mean_combine, median_combine, median_tail, probe_directions, product_combine,
    sum_combine, verify_estimator, EstimatorSampler, ErrorMoments, VarianceReport,
};
use crate::numerics::{dot, random_unit, Matrix, RngStream};
use crate::sketch::{apply_ksketch, ksketch, SketchDistribution, Shape};

const DIRECTION_STREAM: u64 = u64::MAX;
const CHUNK: u64 = 4096;
/// Magnitudes of the exhaustive sketch grid.
pub const SKETCH_MAGNITUDES: [f64; 4] = [0.0, 0.3, 1.0, 5.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub bound: f64,
    pub standard_error: f64,
    /// The comparison applied, e.g. `measured ≤ bound + 4·SE`.
    pub rule: String,
    pub passed: bool,
}

impl Check {
    /// `measured ≤ bound + k·se`.
    pub fn upper(name: impl Into<String>, measured: f64, bound: f64, se: f64, k: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            bound,
            standard_error: se,
            rule: format!("measured <= bound + {k}*SE"),
            passed: measured <= bound + k * se,
        }
    }

    /// `|measured − bound| ≤ k·se`.
    pub fn close(name: impl Into<String>, measured: f64, target: f64, se: f64, k: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            bound: target,
            standard_error: se,
            rule: format!("|measured - bound| <= {k}*SE"),
            passed: (measured - target).abs() <= k * se,
        }
    }

    /// `|measured − bound| ≤ rel·|bound|`.
    pub fn relative(name: impl Into<String>, measured: f64, target: f64, se: f64, rel: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            bound: target,
            standard_error: se,
            rule: format!("|measured - bound| <= {rel}*|bound|"),
            passed: (measured - target).abs() <= rel * target.abs(),
        }
    }

    /// A deterministic comparison `measured ≤ bound`.
    pub fn exact(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            bound,
            standard_error: 0.0,
            rule: "measured <= bound".into(),
            passed: measured <= bound,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Sketch,
    Estimators,
    Median,
    Product,
    Taylor,
    Kernel,
}

impl Suite {
    pub const ALL: [Suite; 6] =
        [Suite::Sketch, Suite::Estimators, Suite::Median, Suite::Product, Suite::Taylor, Suite::Kernel];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Sketch => "sketch",
            Suite::Estimators => "estimators",
            Suite::Median => "median",
            Suite::Product => "product",
            Suite::Taylor => "taylor",
            Suite::Kernel => "kernel",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown suite {name:?}")))
    }

    /// Monte-Carlo trials per check when none are requested.
    pub fn default_trials(&self) -> u64 {
        match self {
            Suite::Product | Suite::Kernel => 1_000_000,
            _ => 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub trials: u64,
    pub seed: u64,
    pub checks: Vec<Check>,
    pub passed: bool,
}

pub fn run_suite(suite: Suite, trials: Option<u64>, seed: u64) -> Result<SuiteReport> {
    let trials = trials.unwrap_or(suite.default_trials());
    if trials < 100 {
        return invalid(format!("suites need at least 100 trials, got {trials}"));
    }
    let rng = RngStream::new(seed);
    let checks = match suite {
        Suite::Sketch => sketch_suite(trials, &rng)?,
        Suite::Estimators => estimators_suite(trials, &rng)?,
        Suite::Median => {
            let mut out = Vec::new();
            for (i, &(n, k)) in [(3, 3.0), (3, 4.0), (5, 3.0), (5, 4.0)].iter().enumerate() {
                out.push(median_tail_check(n, k, trials, &rng.derive(i as u64))?);
            }
            out
        }
        Suite::Product => {
            let mut out = product_three_check(trials, &rng.derive(0))?;
            out.extend(product_two_check(trials, &rng.derive(1))?);
            out
        }
        Suite::Taylor => {
            let mut out = taylor_layer_checks(trials, &rng)?;
            for act in [Activation::Softplus, Activation::Sigmoid] {
                out.push(taylor_coefficient_check(act, 32)?);
            }
            out
        }
        Suite::Kernel => {
            let mut out = Vec::new();
            for act in [Activation::Softplus, Activation::Sigmoid] {
                out.push(derivative_bound_check(act, 10, strongly_bounded_b())?);
            }
            out.extend(kernel_identity_checks(trials, &rng)?);
            out
        }
    };
    let passed = checks.iter().all(|c| c.passed);
    Ok(SuiteReport { suite, trials, seed, checks, passed })
}

/// Every `w ∈ ℝ^d`, `d ≤ 4`, with coordinates from [`SKETCH_MAGNITUDES`]
/// and alternating signs.
pub fn sketch_grid() -> Vec<Vec<f64>> {
    let mut grid = Vec::new();
    for d in 1..=4u32 {
        for code in 0..SKETCH_MAGNITUDES.len().pow(d) {
            let mut c = code;
            let w = (0..d as usize)
                .map(|i| {
                    let v = SKETCH_MAGNITUDES[c % SKETCH_MAGNITUDES.len()];
                    c /= SKETCH_MAGNITUDES.len();
                    if i % 2 == 0 { v } else { -v }
                })
                .collect();
            grid.push(w);
        }
    }
    grid
}

/// Largest `‖E[ŵ] − w‖∞` over the grid by enumerating every outcome.
pub fn sketch_exactness(grid: &[Vec<f64>]) -> Result<Check> {
    let mut worst = 0.0f64;
    for w in grid {
        let dist = SketchDistribution::new(w, Shape::vector(w.len()))?;
        let mut e = vec![0.0; w.len()];
        for (i, p, pr) in dist.outcomes() {
            e[i] += p as f64 * pr;
        }
        for (a, b) in e.iter().zip(w) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(Check::exact("sketch: exact unbiasedness over the grid", worst, 1e-10))
}

/// Monte-Carlo `E⟨u, ŵ − w⟩²` along probe directions against
/// `1/4 + 2‖w‖²`. The reported direction is the one closest to failing.
pub fn sketch_variance_check(w: &[f64], trials: u64, num_directions: usize, rng: &RngStream) -> Result<Check> {
    let d = w.len();
    let dist = SketchDistribution::new(w, Shape::vector(d))?;
    let dirs = probe_directions(d, num_directions, &rng.derive(DIRECTION_STREAM));
    let nd = dirs.len();
    let uw: Vec<f64> = dirs.iter().map(|u| dot(u, w)).collect();
    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..trials.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut g = rng.derive(c).generator();
            let (mut s1, mut s2) = (vec![0.0; nd], vec![0.0; nd]);
            for _ in c * CHUNK..((c + 1) * CHUNK).min(trials) {
                let t = dist.sample(&mut g);
                let p = t.payload as f64;
                for j in 0..nd {
                    let z = (dirs[j][t.index] * p - uw[j]).powi(2);
                    s1[j] += z;
                    s2[j] += z * z;
                }
            }
            (s1, s2)
        })
        .collect();
    let (mut s1, mut s2) = (vec![0.0; nd], vec![0.0; nd]);
    for (a, b) in partials {
        s1.iter_mut().zip(&a).for_each(|(x, y)| *x += y);
        s2.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
    }
    let n = trials as f64;
    let norm2: f64 = w.iter().map(|x| x * x).sum();
    let bound = 0.25 + 2.0 * norm2;
    let stats = (0..nd).map(|j| {
        let mean = s1[j] / n;
        let var = ((s2[j] - n * mean * mean) / (n - 1.0)).max(0.0);
        (mean, (var / n).sqrt())
    });
    let (var, se) = stats
        .max_by(|a, b| (a.0 - bound - 4.0 * a.1).total_cmp(&(b.0 - bound - 4.0 * b.1)))
        .expect("at least one direction");
    Ok(Check::upper(format!("sketch: directional variance of w = {w:?}"), var, bound, se, 4.0))
}

/// The `1/4 + 2‖w‖²` bound on every grid vector, 64 probe directions each.
pub fn sketch_variance_grid(trials: u64, rng: &RngStream) -> Result<Vec<Check>> {
    sketch_grid()
        .par_iter()
        .enumerate()
        .map(|(i, w)| sketch_variance_check(w, trials, 64, &rng.derive(i as u64)))
        .collect()
}

/// A random 8×8 `W` with `‖W‖_F = 2`, its `k = ⌈1/4 + 2·4⌉ = 9` sketch
/// applied to five inputs of norm at most one, as one joint estimator.
pub fn ksketch_checks(trials: u64, rng: &RngStream) -> Result<(VarianceReport, Vec<Check>)> {
    let mut g = rng.derive(0).generator();
    let raw = Matrix::new(8, 8, (0..64).map(|_| g.sample(rand_distr::StandardNormal)).collect())?;
    let w = raw.scale(2.0 / raw.frobenius_norm());
    let k = (0.25f64 + 2.0 * 4.0).ceil() as usize;
    let mut xs: Vec<Vec<f64>> = vec![(0..8).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect()];
    for j in 0..4 {
        let u = random_unit(8, &mut g);
        let scale = if j == 3 { 0.5 } else { 1.0 };
        xs.push(u.into_iter().map(|v| v * scale).collect());
    }
    let target: Vec<f64> = xs.iter().map(|x| w.matvec(x)).collect::<Result<Vec<_>>>()?.concat();
    let dirs = probe_directions(8, 64, &rng.derive(DIRECTION_STREAM));
    let draws = rng.derive(1);
    let moments = accumulate_trials(trials, xs.len(), 8, &target, &dirs, |t| {
        let s = ksketch(&w, k, &draws.derive(t))?;
        let mut out = Vec::with_capacity(8 * xs.len());
        for x in &xs {
            out.extend(apply_ksketch(&s, x)?);
        }
        Ok(out)
    })?;
    let rep = moments.report(&target, &dirs, 1.0)?;
    let checks = vec![
        Check::upper("k-sketch: mean error in standard errors", rep.mean_error_z, 4.0, 0.0, 0.0),
        worst_cell_check("k-sketch: directional variance of Wx", &rep, 1.0, 4.0),
    ];
    Ok((rep, checks))
}

/// The cell of `rep` closest to failing `variance ≤ bound + k·SE`.
pub fn worst_cell_check(name: &str, rep: &VarianceReport, bound: f64, k: f64) -> Check {
    let cell = rep
        .cells
        .iter()
        .max_by(|a, b| (a.variance - k * a.standard_error).total_cmp(&(b.variance - k * b.standard_error)))
        .cloned()
        .unwrap_or(crate::estimators::DirectionStat { variance: 0.0, standard_error: 0.0 });
    Check::upper(name, cell.variance, bound, cell.standard_error, k)
}

fn sketch_suite(trials: u64, rng: &RngStream) -> Result<Vec<Check>> {
    let mut out = vec![sketch_exactness(&sketch_grid())?];
    out.extend(sketch_variance_grid(trials, &rng.derive(0))?);
    out.extend(ksketch_checks(trials, &rng.derive(1))?.1);
    Ok(out)
}

fn estimator_checks(name: &str, e: &EstimatorSampler, bound: f64, trials: u64, rng: &RngStream) -> Result<Vec<Check>> {
    let rep = verify_estimator(e, trials, 16, rng)?;
    Ok(vec![
        Check::upper(format!("{name}: mean error in standard errors"), rep.mean_error_z, 4.0, 0.0, 0.0),
        worst_cell_check(&format!("{name}: directional variance"), &rep, bound, 4.0),
    ])
}

fn estimators_suite(trials: u64, rng: &RngStream) -> Result<Vec<Check>> {
    let g = EstimatorSampler::gaussian(vec![0.5, -1.0, 2.0, 0.0], 1.0)?;
    let mut out = Vec::new();
    for (i, k) in [1usize, 4, 16].into_iter().enumerate() {
        let m = mean_combine(&g, k)?;
        out.extend(estimator_checks(&format!("mean of {k}"), &m, 1.0 / k as f64, trials, &rng.derive(i as u64))?);
    }
    let two = affine_map(&g, &Matrix::identity(4).scale(2.0))?;
    out.extend(estimator_checks("affine 2I", &two, 4.0, trials, &rng.derive(10))?);
    let avg = affine_map(&g, &Matrix::new(1, 4, vec![0.5; 4])?)?;
    out.extend(estimator_checks("averaging functional", &avg, 1.0, trials, &rng.derive(11))?);
    let sum = sum_combine(&g, &g)?;
    out.extend(estimator_checks("sum of two", &sum, sum.sigma().powi(2), trials, &rng.derive(12))?);
    let neg = sum_combine(&g, &g.scaled(-1.0))?;
    out.extend(estimator_checks("x minus x", &neg, 4.0, trials, &rng.derive(13))?);
    Ok(out)
}

/// `Pr(|med − 0| > k)` for the median of `n` standard normals against `(2/k)ⁿ`.
pub fn median_tail_check(n: usize, k: f64, trials: u64, rng: &RngStream) -> Result<Check> {
    let g = EstimatorSampler::gaussian(vec![0.0], 1.0)?;
    let m = median_combine(&vec![g; n])?;
    let (p, se) = median_tail(&m, 0.0, k, trials, rng);
    Ok(Check::upper(format!("median of {n}: tail beyond {k} sigma"), p, (2.0 / k).powi(n as i32), se, 3.0))
}

/// Three independent `N(1, 1)` factors: product variance against
/// `2³ − 1 = 7`, relative tolerance 5%.
pub fn product_three_check(trials: u64, rng: &RngStream) -> Result<Vec<Check>> {
    let one = EstimatorSampler::gaussian(vec![1.0], 1.0)?;
    let p = product_combine(&vec![one; 3])?;
    let rep = verify_estimator(&p, trials, 1, rng)?;
    Ok(vec![
        Check::relative("product of three: variance", rep.worst_directional_var, p.sigma().powi(2), rep.standard_error, 0.05),
        Check::upper("product of three: mean error in standard errors", rep.mean_error_z, 4.0, 0.0, 0.0),
    ])
}

fn product_two_check(trials: u64, rng: &RngStream) -> Result<Vec<Check>> {
    let z = EstimatorSampler::gaussian(vec![0.0], 1.0)?;
    let p = product_combine(&[z.clone(), z])?;
    let rep = verify_estimator(&p, trials, 1, rng)?;
    Ok(vec![Check::close("product of two: variance", rep.worst_directional_var, 1.0, rep.standard_error, 4.0)])
}

/// Softplus Taylor layer at `d = 16` with `σ = ε = 1/(√72·B)`: unbiasedness,
/// directional variance against one, and the mean number of factors against
/// `(log₃ 16 + 4)/2`.
pub fn taylor_layer_checks(trials: u64, rng: &RngStream) -> Result<Vec<Check>> {
    let d = 16;
    let eps = default_eps();
    let mut g = rng.derive(0).generator();
    let h: Vec<f64> = (0..d).map(|_| g.random_range(-2.0..2.0)).collect();
    let seed: Vec<f64> = h.iter().map(|v| v + g.random_range(-eps..eps)).collect();
    let prev = EstimatorSampler::gaussian(h.clone(), eps)?;
    let layer = compress_activation_layer(&prev, Activation::Softplus, &seed, eps, TaylorBudget::Conservative)?;
    let target: Vec<f64> = h.iter().map(|&v| Activation::Softplus.eval(v)).collect();
    let dirs = probe_directions(d, 64, &rng.derive(DIRECTION_STREAM));
    let draws = rng.derive(1);
    let partials: Vec<Result<(ErrorMoments, f64, f64)>> = (0..trials.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut m = ErrorMoments::new(1, d, dirs.len());
            let (mut s1, mut s2) = (0.0, 0.0);
            for t in c * CHUNK..((c + 1) * CHUNK).min(trials) {
                let (x, depth) = layer.sample_with_depth(&draws.derive(t));
                m.push(&x, &target, &dirs).map_err(|reason| Error::ContractViolation { trial: t, reason })?;
                s1 += depth as f64;
                s2 += (depth * depth) as f64;
            }
            Ok((m, s1, s2))
        })
        .collect();
    let mut total = ErrorMoments::new(1, d, dirs.len());
    let (mut s1, mut s2) = (0.0, 0.0);
    for p in partials {
        let (m, a, b) = p?;
        total.merge(&m);
        s1 += a;
        s2 += b;
    }
    let rep = total.report(&target, &dirs, layer.constants.sigma_claim)?;
    let n = trials as f64;
    let mean_depth = s1 / n;
    let depth_se = (((s2 - n * mean_depth * mean_depth) / (n - 1.0)).max(0.0) / n).sqrt();
    Ok(vec![
        Check::upper("taylor layer: mean error in standard errors", rep.mean_error_z, 4.0, 0.0, 0.0),
        worst_cell_check("taylor layer: directional variance", &rep, 1.0, 4.0),
        Check::upper("taylor layer: mean number of factors", mean_depth, expected_depth_bound(d), depth_se, 3.0),
    ])
}

/// Largest `|cₙ|/Bⁿ` over centers `[−10, 10]` in steps of 0.5 and `n ≤ order`.
pub fn taylor_coefficient_check(act: Activation, order: usize) -> Result<Check> {
    if order > MAX_TAYLOR_ORDER {
        return invalid(format!("order {order} above {MAX_TAYLOR_ORDER}"));
    }
    let b = strongly_bounded_b();
    let mut worst = 0.0f64;
    for i in 0..=40 {
        let c = -10.0 + 0.5 * i as f64;
        let coeffs = taylor_coeffs(act, c, order)?;
        for (n, cn) in coeffs.iter().enumerate().skip(1) {
            worst = worst.max(cn.abs() / b.powi(n as i32));
        }
    }
    Ok(Check::exact(format!("{}: max |c_n|/B^n, n <= {order}", act.name()), worst, 1.0))
}

/// Largest `|ρ⁽ⁿ⁾(a)|/(n!·bⁿ)` over `a ∈ [−10, 10]` in steps of 0.5 and
/// `1 ≤ n ≤ max_n`.
pub fn derivative_bound_check(act: Activation, max_n: usize, b: f64) -> Result<Check> {
    let mut worst = 0.0f64;
    for i in 0..=40 {
        let a = -10.0 + 0.5 * i as f64;
        let mut fact = 1.0;
        for n in 1..=max_n {
            fact *= n as f64;
            worst = worst.max(act.derivative(n, a)?.abs() / (fact * b.powi(n as i32)));
        }
    }
    Ok(Check::exact(format!("{}: max |f^(n)(a)|/(n! B^n), n <= {max_n}", act.name()), worst, 1.0))
}

/// `E[b·relu(x − a)] = x²` at `x ∈ {−1, −½, 0, ½, 1}`, `samples` draws each.
pub fn kernel_identity_checks(samples: u64, rng: &RngStream) -> Result<Vec<Check>> {
    let kernel = QuadKernel::build();
    [-1.0, -0.5, 0.0, 0.5, 1.0]
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let r = rng.derive(i as u64);
            let sums: Vec<(f64, f64)> = (0..samples.div_ceil(CHUNK))
                .into_par_iter()
                .map(|c| {
                    let mut g = r.derive(c).generator();
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for _ in c * CHUNK..((c + 1) * CHUNK).min(samples) {
                        let (a, b) = kernel.sample_with(&mut g);
                        let v = b * (x - a).max(0.0);
                        s1 += v;
                        s2 += v * v;
                    }
                    (s1, s2)
                })
                .collect();
            let (s1, s2) = sums.iter().fold((0.0, 0.0), |acc, s| (acc.0 + s.0, acc.1 + s.1));
            let n = samples as f64;
            let mean = s1 / n;
            let se = (((s2 - n * mean * mean) / (n - 1.0)).max(0.0) / n).sqrt();
            Ok(Check::close(format!("kernel: E[b relu(x - a)] at x = {x}"), mean, x * x, se, 3.0))
        })
        .collect()
}

/// `count_bracketed(n) ≤ 32ⁿ` for `n ≤ max_n`.
pub fn bracket_count_checks(max_n: usize) -> Result<Vec<Check>> {
    (1..=max_n)
        .map(|n| Ok(Check::exact(format!("bracketed strings of length <= {n}"), count_bracketed(n)? as f64, 32f64.powi(n as i32))))
        .collect()
}

/// A random tree: a leaf with probability one half (always at depth
/// `max_depth`), otherwise two to four random children.
pub fn random_bracketed(g: &mut impl Rng, max_depth: usize) -> BracketedString {
    fn grow(g: &mut impl Rng, b: &mut BracketBuilder, depth: usize) {
        if depth == 0 || g.random::<bool>() {
            b.push_bit(g.random::<bool>());
            return;
        }
        b.open();
        for _ in 0..g.random_range(2..=4) {
            grow(g, b, depth - 1);
        }
        b.close();
    }
    let mut b = BracketBuilder::new();
    grow(g, &mut b, max_depth);
    b.finish()
}

/// Serialize and parse `count` random trees; reports the number of
/// mismatches.
pub fn bracket_round_trip_check(count: u64, rng: &RngStream) -> Result<Check> {
    let mut g = rng.generator();
    let mut bad = 0u64;
    for _ in 0..count {
        let s = random_bracketed(&mut g, 6);
        let text = s.serialize();
        match BracketedString::deserialize(&text) {
            Ok(back) if back == s && back.serialize() == text => {}
            _ => bad += 1,
        }
    }
    Ok(Check::exact(format!("serialize/deserialize identity on {count} random trees"), bad as f64, 0.0))
}

/// A random member of the class with `t` layers of width `d`, softplus
/// activations and zero references, with `m` sign-vector inputs (norm `√d`).
pub fn random_network(d: usize, t: usize, r: f64, big_r: f64, m: usize, rng: &RngStream) -> Result<(NetworkSpec, SampleSet)> {
    let class = NetworkClass::new(vec![d; t + 1], Activation::Softplus, None, r, big_r)?;
    let net = random_member(&class, &rng.derive(0))?;
    let mut g = rng.derive(1).generator();
    let points = (0..m).map(|_| (0..d).map(|_| if g.random::<bool>() { 1.0 } else { -1.0 }).collect()).collect();
    Ok((net, SampleSet::in_default_ball(points)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_every_small_vector() {
        let grid = sketch_grid();
        assert_eq!(grid.len(), 4 + 16 + 64 + 256);
        assert!(grid.contains(&vec![5.0, -0.3, 1.0, -0.0]));
        assert!(sketch_exactness(&grid).unwrap().passed);
    }

    #[test]
    fn zero_vector_has_zero_variance() {
        let c = sketch_variance_check(&[0.0, 0.0], 1000, 8, &RngStream::new(1)).unwrap();
        assert_eq!(c.measured, 0.0);
        assert!(c.passed);
    }

    #[test]
    fn sketch_variance_matches_closed_form() {
        // along e₁ for w = (3, 4): E[(ŵ₁ − 3)²] from the outcome table
        let w = [3.0, 4.0];
        let dist = SketchDistribution::new(&w, Shape::vector(2)).unwrap();
        let exact: f64 = dist
            .outcomes()
            .iter()
            .map(|&(i, p, pr)| pr * (if i == 0 { p as f64 } else { 0.0 } - 3.0).powi(2))
            .sum();
        let c = sketch_variance_check(&w, 200_000, 1, &RngStream::new(2)).unwrap();
        assert!((c.measured - exact).abs() < 5.0 * c.standard_error, "{} vs {exact}", c.measured);
    }

    #[test]
    fn checks_decide_by_rule() {
        assert!(Check::upper("a", 1.1, 1.0, 0.05, 4.0).passed);
        assert!(!Check::upper("a", 1.3, 1.0, 0.05, 4.0).passed);
        assert!(Check::relative("b", 7.3, 7.0, 0.0, 0.05).passed);
        assert!(!Check::relative("b", 6.6, 7.0, 0.0, 0.05).passed);
        assert!(!Check::close("c", 0.2, 0.0, 0.05, 3.0).passed);
    }

    #[test]
    fn random_trees_round_trip() {
        let c = bracket_round_trip_check(500, &RngStream::new(3)).unwrap();
        assert_eq!(c.measured, 0.0);
        let mut g = RngStream::new(4).generator();
        assert!((0..50).map(|_| random_bracketed(&mut g, 6).len()).any(|n| n > 4));
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(Suite::from_name(s.name()).unwrap(), s);
        }
        assert!(Suite::from_name("bogus").is_err());
        assert!(run_suite(Suite::Median, Some(10), 1).is_err());
    }

    #[test]
    fn small_suites_are_deterministic() {
        let a = run_suite(Suite::Median, Some(2000), 9).unwrap();
        let b = run_suite(Suite::Median, Some(2000), 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checks.len(), 4);
    }
}
