//! Single-layer compressors acting on estimator samplers.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activations::{strongly_bounded_b, taylor_coeffs, Activation, MAX_TAYLOR_ORDER};
use crate::error::{invalid, Error, Result};
use crate::estimators::{mean_combine, EstimatorSampler};
use crate::numerics::{norm, spectral_norm, Matrix};
use crate::sketch::{Shape, SketchDistribution, SketchLayout};

/// Largest mean-combination count the tight budget will consider.
pub const MAX_FACTOR_MEAN: usize = 1 << 16;

/// Stream index for the sketch terms of a linear layer.
pub(crate) const SKETCH_STREAM: u64 = u64::MAX - 1;
/// Stream index for the Taylor gates of an activation layer.
pub(crate) const GATE_STREAM: u64 = u64::MAX - 2;

/// `⌈2(r + ‖W⁰‖)²⌉ + 1` previous-layer draws are averaged before a linear map.
pub fn linear_k1(r: f64, ref_norm: f64) -> usize {
    (2.0 * (r + ref_norm).powi(2)).ceil() as usize + 1
}

/// `⌈2(d₁ + M²)(2R² + 1)⌉` sketch terms for `V = W − W⁰`.
pub fn linear_k2(d1: usize, m_prev: f64, big_r: f64) -> usize {
    ((2.0 * (d1 as f64 + m_prev * m_prev) * (2.0 * big_r * big_r + 1.0)).ceil() as usize).max(1)
}

/// Bernoulli gate probabilities `p₁…p_{n_max}` for the Taylor terms:
/// `pₙ = 1` up to `max(1, ⌈log₃(d)/2⌉)` and `4⁻ⁿ` beyond.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSchedule {
    pub deterministic_upto: usize,
    pub probs: Vec<f64>,
}

impl GateSchedule {
    pub fn new(d: usize) -> Self {
        let n0 = ((d.max(1) as f64).ln() / 3f64.ln() / 2.0 - 1e-12).ceil().max(1.0) as usize;
        let probs = (1..=MAX_TAYLOR_ORDER)
            .map(|n| if n <= n0 { 1.0 } else { 4f64.powi(-(n as i32)) })
            .collect();
        Self { deterministic_upto: n0, probs }
    }

    /// `pₙ` for `n ≥ 1`.
    pub fn p(&self, n: usize) -> f64 {
        self.probs[n - 1]
    }

    pub fn max_order(&self) -> usize {
        self.probs.len()
    }

    /// Gates `Z₁…Z_N`, where `N` is the largest open gate.
    pub fn sample(&self, g: &mut impl Rng) -> Vec<bool> {
        let mut gates: Vec<bool> = self.probs.iter().map(|&p| p >= 1.0 || g.random::<f64>() < p).collect();
        while gates.last() == Some(&false) {
            gates.pop();
        }
        gates
    }

    /// `E[N] = Σₙ Pr(N ≥ n)` under independent gates.
    pub fn expected_max(&self) -> f64 {
        let mut none_from = 1.0;
        let mut total = 0.0;
        for &p in self.probs.iter().rev() {
            none_from *= 1.0 - p;
            total += 1.0 - none_from;
        }
        total
    }
}

/// `(log₃ d + 4)/2`, the bound on the expected number of Taylor factors.
pub fn expected_depth_bound(d: usize) -> f64 {
    ((d as f64).ln() / 3f64.ln() + 4.0) / 2.0
}

/// `σ' = Σₙ √(Aₙ²/pₙ · ((σ² + ε²)ⁿ + (1 − pₙ)·d·ε²ⁿ))` with `Aₙ` the largest
/// `|cₙ|` over all coordinates; `a[n−1]` holds `Aₙ`.
pub fn taylor_sigma(a: &[f64], schedule: &GateSchedule, sigma2: f64, eps: f64, d: usize) -> f64 {
    let mut total = 0.0;
    for (i, an) in a.iter().enumerate().take(schedule.max_order()) {
        let n = i as i32 + 1;
        let p = schedule.p(i + 1);
        let var = an * an / p * ((sigma2 + eps * eps).powi(n) + (1.0 - p) * d as f64 * eps.powi(2 * n));
        total += var.sqrt();
    }
    total
}

/// How many previous-layer estimators are averaged into each Taylor factor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum TaylorBudget {
    /// Factors are `σ`-estimators with `σ² + ε² ≤ 1/(36B²)`, which for
    /// `ε = 1/(√72·B)` averages `⌈72B²⌉` unit estimators.
    Conservative,
    /// The smallest count for which the computed `σ'` is at most one.
    Tight,
}

/// Seed grid spacing `ε = 1/(√72·B)`.
pub fn default_eps() -> f64 {
    1.0 / (72f64.sqrt() * strongly_bounded_b())
}

pub fn factor_mean_count(
    budget: TaylorBudget,
    a: &[f64],
    schedule: &GateSchedule,
    sigma_prev: f64,
    eps: f64,
    d: usize,
) -> Result<usize> {
    let s2 = sigma_prev * sigma_prev;
    match budget {
        TaylorBudget::Conservative => {
            let b = strongly_bounded_b();
            let room = 1.0 / (36.0 * b * b) - eps * eps;
            if room <= 0.0 {
                return Err(Error::Contract(format!("seed spacing {eps} leaves no room below 1/(6B)")));
            }
            Ok(((s2 / room) * (1.0 - 1e-12)).ceil().max(1.0) as usize)
        }
        TaylorBudget::Tight => {
            let fits = |k: usize| taylor_sigma(a, schedule, s2 / k as f64, eps, d) <= 1.0;
            if !fits(MAX_FACTOR_MEAN) {
                return Err(Error::Contract(format!(
                    "no factor count up to {MAX_FACTOR_MEAN} brings the Taylor estimator to unit variance (eps = {eps})"
                )));
            }
            let (mut lo, mut hi) = (1usize, MAX_FACTOR_MEAN);
            if fits(1) {
                return Ok(1);
            }
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                if fits(mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            Ok(hi)
        }
    }
}

/// `ρ(c) + Σ_{Zₙ=1} cₙ/pₙ · ∏_{i≤n}(Fᵢ − c)`, coordinatewise.
pub(crate) fn taylor_estimate(
    base: &[f64],
    center: &[f64],
    coeff: impl Fn(usize, usize) -> f64,
    gates: &[bool],
    schedule: &GateSchedule,
    factors: &[Vec<f64>],
) -> Vec<f64> {
    let mut out = base.to_vec();
    let mut prod = vec![1.0; base.len()];
    for (i, f) in factors.iter().enumerate() {
        let n = i + 1;
        for j in 0..prod.len() {
            prod[j] *= f[j] - center[j];
        }
        if gates[i] {
            let inv_p = 1.0 / schedule.p(n);
            for j in 0..out.len() {
                out[j] += coeff(j, n) * inv_p * prod[j];
            }
        }
    }
    out
}

/// Constants of a compressed linear layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearConstants {
    pub k1: usize,
    pub k2: usize,
    pub m_prev: f64,
    pub ref_norm: f64,
    pub layout: SketchLayout,
    /// Variance bound from the layer analysis given the input's σ.
    pub sigma_bound: f64,
}

impl LinearConstants {
    pub fn new(d1: usize, d2: usize, r: f64, big_r: f64, ref_norm: f64, m_prev: f64, sigma_prev: f64) -> Result<Self> {
        if !(m_prev.is_finite() && m_prev > 0.0) {
            return Err(Error::Contract(format!("input norm bound must be positive, got {m_prev}")));
        }
        let k1 = linear_k1(r, ref_norm);
        let k2 = linear_k2(d1, m_prev, big_r);
        let s2 = sigma_prev * sigma_prev;
        let var = (2.0 * big_r * big_r + 1.0) / k2 as f64 * (d1 as f64 * s2 / k1 as f64 + m_prev * m_prev)
            + (r + ref_norm).powi(2) * s2 / k1 as f64;
        Ok(Self {
            k1,
            k2,
            m_prev,
            ref_norm,
            layout: SketchLayout::new(Shape::matrix(d2, d1), big_r)?,
            sigma_bound: var.sqrt(),
        })
    }

    pub fn sketch_bits(&self) -> u64 {
        self.k2 as u64 * self.layout.term_bits()
    }
}

/// `x ↦ (W⁰ + V̂)·mean(ĥ₁…ĥ_{k₁})` with `V̂` a `k₂`-sketch of `W − W⁰`.
pub fn compress_linear_layer(
    prev: &EstimatorSampler,
    w: &Matrix,
    w0: &Matrix,
    m_prev: f64,
    r: f64,
    big_r: f64,
) -> Result<(EstimatorSampler, LinearConstants)> {
    if w.cols() != prev.dim() || (w0.rows(), w0.cols()) != (w.rows(), w.cols()) {
        return invalid("linear layer shapes do not chain");
    }
    let v = w.sub(w0)?;
    let (spec, frob) = (spectral_norm(&v), v.frobenius_norm());
    if spec > r * (1.0 + 1e-9) + 1e-12 || frob > big_r * (1.0 + 1e-9) + 1e-12 {
        return Err(Error::Contract(format!("‖W − W⁰‖ = {spec}, ‖W − W⁰‖_F = {frob} exceed r = {r}, R = {big_r}")));
    }
    if !(m_prev > 0.0) {
        return Err(Error::Contract(format!("input norm bound must be positive, got {m_prev}")));
    }
    let h_norm = norm(prev.target());
    if h_norm > m_prev * (1.0 + 1e-12) {
        return Err(Error::Contract(format!("input norm {h_norm} exceeds the bound {m_prev}")));
    }
    let ref_norm = spectral_norm(w0);
    let c = LinearConstants::new(w.cols(), w.rows(), r, big_r, ref_norm, m_prev, prev.sigma())?;
    let mean = mean_combine(prev, c.k1)?;
    let dist = Arc::new(SketchDistribution::new(v.data(), Shape::matrix(v.rows(), v.cols()))?);
    let (k2, cols) = (c.k2, v.cols());
    let w0 = w0.clone();
    let target = w.matvec(prev.target())?;
    let bits = mean.bits() + c.sketch_bits() as f64;
    let sampler = EstimatorSampler::new(target, c.sigma_bound, bits, move |rng| {
        let x = mean.sample(rng);
        let mut out = w0.matvec(&x).expect("shape checked");
        let mut g = rng.derive(SKETCH_STREAM).generator();
        let mut acc = vec![0.0; out.len()];
        for _ in 0..k2 {
            let t = dist.sample(&mut g);
            acc[t.index / cols] += t.payload as f64 * x[t.index % cols];
        }
        out.iter_mut().zip(&acc).for_each(|(o, a)| *o += a / k2 as f64);
        out
    })?;
    Ok((sampler, c))
}

/// Constants of a compressed activation layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationConstants {
    pub activation: Activation,
    pub b: f64,
    pub eps: f64,
    pub budget: TaylorBudget,
    /// Previous-layer draws averaged into each Taylor factor.
    pub factor_mean: usize,
    pub schedule: GateSchedule,
    /// Largest `|cₙ|` over the seed, `n = 1..`.
    pub coeff_bounds: Vec<f64>,
    pub sigma_claim: f64,
    pub expected_factors: f64,
}

impl ActivationConstants {
    pub fn new(act: Activation, seed: &[f64], eps: f64, budget: TaylorBudget, sigma_prev: f64) -> Result<(Self, Vec<Vec<f64>>)> {
        Self::with_dim(act, seed, seed.len(), eps, budget, sigma_prev)
    }

    /// Constants shared by several points whose `d`-dimensional seeds are
    /// concatenated in `seed`; coefficient bounds are taken over all of them.
    pub fn with_dim(
        act: Activation,
        seed: &[f64],
        d: usize,
        eps: f64,
        budget: TaylorBudget,
        sigma_prev: f64,
    ) -> Result<(Self, Vec<Vec<f64>>)> {
        if !(eps.is_finite() && eps >= 0.0) {
            return invalid(format!("seed spacing must be finite and nonnegative, got {eps}"));
        }
        let schedule = GateSchedule::new(d);
        let coeffs: Vec<Vec<f64>> =
            seed.iter().map(|&c| taylor_coeffs(act, c, MAX_TAYLOR_ORDER)).collect::<Result<_>>()?;
        let mut bounds = vec![0.0f64; MAX_TAYLOR_ORDER];
        for c in &coeffs {
            for n in 1..=MAX_TAYLOR_ORDER {
                bounds[n - 1] = bounds[n - 1].max(c[n].abs());
            }
        }
        let k = factor_mean_count(budget, &bounds, &schedule, sigma_prev, eps, d)?;
        let sigma_claim = taylor_sigma(&bounds, &schedule, sigma_prev * sigma_prev / k as f64, eps, d);
        let expected_factors = schedule.expected_max();
        Ok((
            Self {
                activation: act,
                b: strongly_bounded_b(),
                eps,
                budget,
                factor_mean: k,
                schedule,
                coeff_bounds: bounds,
                sigma_claim,
                expected_factors,
            },
            coeffs,
        ))
    }
}

/// The Taylor estimator of `ρ∘h` around a seed `h̃` with `‖h̃ − h‖∞ ≤ ε`.
#[derive(Clone)]
pub struct ActivationLayer {
    pub constants: ActivationConstants,
    seed: Vec<f64>,
    base: Vec<f64>,
    coeffs: Vec<Vec<f64>>,
    factor: EstimatorSampler,
    target: Vec<f64>,
}

impl std::fmt::Debug for ActivationLayer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ActivationLayer").field("constants", &self.constants).finish_non_exhaustive()
    }
}

impl ActivationLayer {
    /// One draw of `ĝ` and the number of Taylor factors it used.
    pub fn sample_with_depth(&self, rng: &crate::numerics::RngStream) -> (Vec<f64>, usize) {
        let gates = self.constants.schedule.sample(&mut rng.derive(GATE_STREAM).generator());
        let factors: Vec<Vec<f64>> =
            (0..gates.len()).map(|i| self.factor.sample(&rng.derive(i as u64))).collect();
        let coeffs = &self.coeffs;
        let out = taylor_estimate(&self.base, &self.seed, |j, n| coeffs[j][n], &gates, &self.constants.schedule, &factors);
        (out, gates.len())
    }

    pub fn sampler(&self) -> EstimatorSampler {
        let layer = self.clone();
        let bits = self.constants.expected_factors * (1.0 + self.factor.bits());
        EstimatorSampler::new(self.target.clone(), self.constants.sigma_claim, bits, move |rng| {
            layer.sample_with_depth(rng).0
        })
        .expect("target is finite")
    }
}

/// Builds the Taylor estimator of `ρ(h)` from an estimator of `h` and a seed.
pub fn compress_activation_layer(
    prev: &EstimatorSampler,
    act: Activation,
    seed: &[f64],
    eps: f64,
    budget: TaylorBudget,
) -> Result<ActivationLayer> {
    if seed.len() != prev.dim() {
        return invalid(format!("seed has {} entries, estimator dimension {}", seed.len(), prev.dim()));
    }
    if let Some(i) = (0..seed.len()).find(|&i| (seed[i] - prev.target()[i]).abs() > eps * (1.0 + 1e-12)) {
        return Err(Error::Contract(format!(
            "seed coordinate {i} is {} away from the target, above eps = {eps}",
            (seed[i] - prev.target()[i]).abs()
        )));
    }
    let (constants, coeffs) = ActivationConstants::new(act, seed, eps, budget, prev.sigma())?;
    let factor = mean_combine(prev, constants.factor_mean)?;
    Ok(ActivationLayer {
        seed: seed.to_vec(),
        base: seed.iter().map(|&c| act.eval(c)).collect(),
        target: prev.target().iter().map(|&v| act.eval(v)).collect(),
        coeffs,
        factor,
        constants,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::verify_estimator;
    use crate::numerics::RngStream;

    #[test]
    fn proof_constants() {
        assert_eq!(linear_k1(1.0, 0.0), 3);
        assert_eq!(linear_k2(16, 4.0, 2.0), 576);
        assert_eq!(linear_k1(0.0, 0.0), 1);
    }

    #[test]
    fn schedule_for_d16() {
        let s = GateSchedule::new(16);
        assert_eq!(s.deterministic_upto, 2);
        assert_eq!(s.p(2), 1.0);
        assert_eq!(s.p(3), 1.0 / 64.0);
        assert!(s.expected_max() <= expected_depth_bound(16));
        assert!((expected_depth_bound(16) - 3.2619).abs() < 1e-3);
        assert_eq!(GateSchedule::new(9).deterministic_upto, 1);
        assert_eq!(GateSchedule::new(10).deterministic_upto, 2);
        assert_eq!(GateSchedule::new(1).deterministic_upto, 1);
    }

    #[test]
    fn expected_max_matches_simulation() {
        let s = GateSchedule::new(3);
        let root = RngStream::new(2);
        let n = 200_000;
        let total: usize = (0..n).map(|t| s.sample(&mut root.derive(t).generator()).len()).sum();
        let mean = total as f64 / n as f64;
        assert!((mean - s.expected_max()).abs() < 0.01, "{mean} vs {}", s.expected_max());
    }

    #[test]
    fn conservative_budget_count() {
        let b = strongly_bounded_b();
        let s = GateSchedule::new(16);
        let k = factor_mean_count(TaylorBudget::Conservative, &[], &s, 1.0, default_eps(), 16).unwrap();
        assert_eq!(k, (72.0 * b * b).ceil() as usize);
        let a: Vec<f64> = (1..=64).map(|n| b.powi(n)).collect();
        let sigma = taylor_sigma(&a, &s, 1.0 / (72.0 * b * b), default_eps(), 16);
        assert!(sigma <= 1.0, "{sigma}");
    }

    #[test]
    fn constant_input_gives_exact_activation() {
        let c = vec![0.3, -1.2, 2.0];
        let prev = EstimatorSampler::constant(c.clone()).unwrap();
        let layer = compress_activation_layer(&prev, Activation::Softplus, &c, 0.0, TaylorBudget::Tight).unwrap();
        let root = RngStream::new(1);
        for t in 0..10 {
            let (g, _) = layer.sample_with_depth(&root.derive(t));
            for (gi, ci) in g.iter().zip(&c) {
                assert_eq!(*gi, crate::activations::softplus(*ci));
            }
        }
    }

    #[test]
    fn seed_outside_eps_is_contract_error() {
        let prev = EstimatorSampler::gaussian(vec![0.0, 0.0], 0.1).unwrap();
        let err = compress_activation_layer(&prev, Activation::Sigmoid, &[0.0, 0.5], 0.1, TaylorBudget::Tight);
        assert!(matches!(err, Err(Error::Contract(msg)) if msg.contains("coordinate 1")));
    }

    #[test]
    fn linear_layer_with_zero_difference_is_reference_map() {
        let w0 = Matrix::new(2, 2, vec![1.0, 2.0, 0.0, -1.0]).unwrap();
        let prev = EstimatorSampler::constant(vec![0.5, 0.25]).unwrap();
        let (s, c) = compress_linear_layer(&prev, &w0, &w0, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(c.k1, linear_k1(0.0, spectral_norm(&w0)));
        let y = s.sample(&RngStream::new(3));
        assert_eq!(y, w0.matvec(&[0.5, 0.25]).unwrap());
    }

    #[test]
    fn linear_layer_preconditions() {
        let w = Matrix::identity(2);
        let prev = EstimatorSampler::constant(vec![1.0, 1.0]).unwrap();
        let z = Matrix::zeros(2, 2);
        assert!(matches!(compress_linear_layer(&prev, &w, &z, 0.0, 1.0, 2.0), Err(Error::Contract(_))));
        assert!(matches!(compress_linear_layer(&prev, &w, &z, 1.0, 1.0, 2.0), Err(Error::Contract(_))));
        assert!(matches!(compress_linear_layer(&prev, &w, &z, 2.0, 0.5, 2.0), Err(Error::Contract(_))));
    }

    #[test]
    fn linear_layer_is_unit_estimator() {
        let root = RngStream::new(77);
        let mut g = root.derive(0).generator();
        let d1 = 16;
        let mut w = Matrix::new(8, d1, (0..8 * d1).map(|_| g.random_range(-1.0..1.0)).collect()).unwrap();
        let scale = (1.0 / spectral_norm(&w)).min(2.0 / w.frobenius_norm());
        w = w.scale(scale);
        let h: Vec<f64> = (0..d1).map(|i| if i % 2 == 0 { 1.0 } else { -0.5 }).collect();
        let m_prev = norm(&h);
        let prev = EstimatorSampler::gaussian(h, 1.0).unwrap();
        let (s, c) = compress_linear_layer(&prev, &w, &Matrix::zeros(8, d1), m_prev, 1.0, 2.0).unwrap();
        assert!(c.sigma_bound <= 1.0);
        let rep = verify_estimator(&s, 20_000, 16, &root.derive(1)).unwrap();
        assert!(rep.mean_within(4.0), "{}", rep.mean_error_z);
        assert!(rep.variance_within(1.0, 4.0), "{}", rep.worst_directional_var);
    }
}
