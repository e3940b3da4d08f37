//! Description-length recursion, covering numbers and representativeness
//! bounds. Constants hidden by `≲` are set to one; logarithms are base 2
//! except the explicit `ln` in the confidence term.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activations::strongly_bounded_b;
use crate::error::{invalid, Result};
use crate::numerics::{spectral_norm, Matrix, RngStream};

use super::network::{NetworkClass, NetworkSpec};

pub const CONVENTION: &str = "up to universal constant";

fn log2_at_least_one(x: f64) -> f64 {
    x.log2().max(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerBudget {
    pub stage: String,
    /// Seed bits accumulated through this stage.
    pub n_s: f64,
    /// Code bits of one estimator of this stage's output.
    pub n: f64,
}

/// Seed bits and expected code bits, with the per-stage breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdlBudget {
    pub n_s: f64,
    pub n: f64,
    pub layers: Vec<LayerBudget>,
    pub convention: String,
}

/// The layer recursion
/// `n' = n(r² + ‖W⁰‖² + 1) + (d₁ + M²)(R² + 1)·log(R·d₁·d₂ + 1)`, then
/// `n_s += n'B²·log(m·d₂)` and `n = n'B²·log(d₂)` after each activation.
/// `M` starts at the input radius `√d₀` and is propagated through the
/// worst-case norm of each layer.
pub fn adl_theoretical_class(class: &NetworkClass, m: usize) -> AdlBudget {
    let b2 = strongly_bounded_b().powi(2);
    let t = class.depth();
    let mut n_s = 0.0;
    let mut n = 0.0;
    let mut big_m = (class.dims[0] as f64).sqrt();
    let mut layers = Vec::new();
    for i in 0..t {
        let (d1, d2) = (class.dims[i] as f64, class.dims[i + 1] as f64);
        let w0 = spectral_norm(&class.refs[i]);
        let r2 = class.big_r * class.big_r;
        let np = n * (class.r * class.r + w0 * w0 + 1.0)
            + (d1 + big_m * big_m) * (r2 + 1.0) * (class.big_r * d1 * d2 + 1.0).log2();
        let lin_norm = (class.r + w0) * big_m;
        layers.push(LayerBudget { stage: format!("linear {}", i + 1), n_s, n: np });
        if i + 1 < t {
            n_s += np * b2 * log2_at_least_one(m as f64 * d2);
            n = np * b2 * log2_at_least_one(d2);
            big_m = class.activation.output_norm_bound(lin_norm, class.dims[i + 1]);
            layers.push(LayerBudget { stage: format!("{} {}", class.activation.name(), i + 1), n_s, n });
        } else {
            n = np;
        }
    }
    AdlBudget { n_s, n, layers, convention: CONVENTION.to_string() }
}

pub fn adl_theoretical(net: &NetworkSpec, m: usize) -> AdlBudget {
    adl_theoretical_class(&net.class, m)
}

/// `n_s + n·log(dm)/ε²`, or `n_s + n/ε²` for scalar outputs.
pub fn covering_log_size(n_s: f64, n: f64, eps: f64, m: usize, d: usize) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1.0) {
        return invalid(format!("eps must lie in (0, 1], got {eps}"));
    }
    if m == 0 || d == 0 {
        return invalid("m and d must be positive");
    }
    let per = if d == 1 { 1.0 } else { (d as f64 * m as f64).log2() };
    Ok(n_s + n * per / (eps * eps))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Lipschitz constant of the loss w.r.t. the ∞-norm.
    pub lipschitz: f64,
    pub loss_bound: f64,
    pub m: usize,
    /// Output dimension of the class.
    pub d: usize,
    pub delta: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if !(self.lipschitz > 0.0 && self.loss_bound > 0.0 && self.m > 0 && self.d > 0) {
            return invalid("L, B, m and d must be positive");
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return invalid(format!("delta must lie in (0, 1], got {}", self.delta));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationBound {
    pub expected_rep: f64,
    pub high_prob_rep: f64,
}

/// `(L+B)·√(n_s + n·log(dm))/√m·log(m)` and that plus `B√(2 ln(2/δ)/m)`.
pub fn generalization_bound(adl: &AdlBudget, b: &BoundInputs) -> Result<GeneralizationBound> {
    b.validate()?;
    let m = b.m as f64;
    let per = if b.d == 1 { 1.0 } else { (b.d as f64 * m).log2() };
    let expected = (b.lipschitz + b.loss_bound) * (adl.n_s + adl.n * per).sqrt() / m.sqrt() * m.log2();
    let conf = b.loss_bound * (2.0 * (2.0 / b.delta).ln() / m).sqrt();
    Ok(GeneralizationBound { expected_rep: expected, high_prob_rep: expected + conf })
}

/// Inputs with targets for the representativeness probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

/// `min(‖f(x) − y‖∞, B)`.
pub fn clipped_loss(net: &NetworkSpec, x: &[f64], y: &[f64], loss_bound: f64) -> Result<f64> {
    let f = net.forward(x)?;
    if f.len() != y.len() {
        return invalid(format!("target has {} entries, network output {}", y.len(), f.len()));
    }
    Ok(f.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max).min(loss_bound))
}

pub fn mean_loss(net: &NetworkSpec, set: &LabeledSet, loss_bound: f64) -> Result<f64> {
    if set.inputs.is_empty() || set.inputs.len() != set.targets.len() {
        return invalid("labeled set must be nonempty with one target per input");
    }
    let mut total = 0.0;
    for (x, y) in set.inputs.iter().zip(&set.targets) {
        total += clipped_loss(net, x, y, loss_bound)?;
    }
    Ok(total / set.inputs.len() as f64)
}

/// A random member of the class: each `Wᵢ − Wᵢ⁰` is Gaussian, rescaled so
/// that the tighter of the two norm caps is met with equality.
pub fn random_member(class: &NetworkClass, rng: &RngStream) -> Result<NetworkSpec> {
    let mut layers = Vec::with_capacity(class.depth());
    for (i, w0) in class.refs.iter().enumerate() {
        let mut g = rng.derive(i as u64).generator();
        let (rows, cols) = (w0.rows(), w0.cols());
        let v = Matrix::new(rows, cols, (0..rows * cols).map(|_| g.sample(rand_distr::StandardNormal)).collect())?;
        let (s, f) = (spectral_norm(&v), v.frobenius_norm());
        let scale = if s == 0.0 { 0.0 } else { (class.r / s).min(class.big_r / f) };
        layers.push(w0.add(&v.scale(scale))?);
    }
    NetworkSpec::new(class.clone(), layers)
}

/// Largest observed `ℓ_test − ℓ_train` over `search_draws` random members,
/// a lower estimate of the representativeness.
pub fn estimate_representativeness(
    class: &NetworkClass,
    train: &LabeledSet,
    test: &LabeledSet,
    loss_bound: f64,
    search_draws: usize,
    rng: &RngStream,
) -> Result<f64> {
    if search_draws == 0 {
        return invalid("need at least one search draw");
    }
    let mut best = f64::NEG_INFINITY;
    for s in 0..search_draws {
        let net = random_member(class, &rng.derive(s as u64))?;
        let gap = mean_loss(&net, test, loss_bound)? - mean_loss(&net, train, loss_bound)?;
        best = best.max(gap);
    }
    Ok(best)
}
