//! Activations, their Taylor coefficients, the shared strong-boundedness
//! constant, and a kernel representing `x²` as an average of shifted ReLUs.

use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::RngStream;

/// Highest Taylor order supported by [`taylor_coeffs`].
pub const MAX_TAYLOR_ORDER: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Softplus,
    Sigmoid,
    Relu,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Softplus => "softplus",
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "softplus" => Ok(Activation::Softplus),
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::UnsupportedActivation(other.to_string())),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
        }
    }

    /// `f⁽ⁿ⁾(x)`.
    pub fn derivative(&self, n: usize, x: f64) -> Result<f64> {
        if n == 0 {
            return Ok(self.eval(x));
        }
        match self {
            Activation::Sigmoid => sigmoid_derivative(n, x),
            Activation::Softplus => sigmoid_derivative(n - 1, x),
            Activation::Relu => Err(Error::UnsupportedActivation("relu has no Taylor expansion".into())),
        }
    }

    /// Bound on `‖ρ(h)‖₂` given `‖h‖₂ ≤ norm` in dimension `d`.
    pub fn output_norm_bound(&self, norm: f64, d: usize) -> f64 {
        let d = d as f64;
        match self {
            Activation::Softplus => std::f64::consts::LN_2 * d.sqrt() + norm,
            Activation::Sigmoid => d.sqrt(),
            Activation::Relu => norm,
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Signed coefficients of `σ⁽ⁿ⁾` as a form in `s = σ` and `t = 1 − σ`:
/// `σ⁽ⁿ⁾ = Σ_a table[n][a]·s^a·t^{n+1−a}`.
///
/// From `s' = st` and `t' = −st`, the monomial `s^a t^b` differentiates to
/// `a·s^a t^{b+1} − b·s^{a+1} t^b`. Keeping `t` separate avoids the
/// cancellation of the expanded polynomial in `s` at high orders.
fn sigmoid_forms() -> &'static Vec<Vec<f64>> {
    static FORMS: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    FORMS.get_or_init(|| {
        let mut forms = vec![vec![0.0, 1.0]];
        for n in 0..MAX_TAYLOR_ORDER {
            let cur = &forms[n];
            let deg = n + 1;
            let mut next = vec![0.0; deg + 2];
            for (a, &c) in cur.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                let b = deg - a;
                next[a] += a as f64 * c;
                next[a + 1] -= b as f64 * c;
            }
            forms.push(next);
        }
        forms
    })
}

fn sigmoid_derivative(n: usize, x: f64) -> Result<f64> {
    if n > MAX_TAYLOR_ORDER {
        return invalid(format!("derivative order {n} above {MAX_TAYLOR_ORDER}"));
    }
    let (s, t) = (sigmoid(x), sigmoid(-x));
    let deg = n + 1;
    Ok(sigmoid_forms()[n]
        .iter()
        .enumerate()
        .filter(|(_, &c)| c != 0.0)
        .map(|(a, &c)| c * s.powi(a as i32) * t.powi((deg - a) as i32))
        .sum())
}

fn factorials() -> &'static Vec<f64> {
    static F: OnceLock<Vec<f64>> = OnceLock::new();
    F.get_or_init(|| {
        let mut f = vec![1.0];
        for n in 1..=MAX_TAYLOR_ORDER + 1 {
            f.push(f[n - 1] * n as f64);
        }
        f
    })
}

/// Taylor coefficients `c₀..c_order` of `act` around `center`.
pub fn taylor_coeffs(act: Activation, center: f64, order: usize) -> Result<Vec<f64>> {
    if act == Activation::Relu {
        return Err(Error::UnsupportedActivation("relu has no Taylor expansion".into()));
    }
    if order > MAX_TAYLOR_ORDER {
        return invalid(format!("Taylor order {order} above {MAX_TAYLOR_ORDER}"));
    }
    if !center.is_finite() {
        return invalid("Taylor center must be finite");
    }
    let fact = factorials();
    (0..=order).map(|n| Ok(act.derivative(n, center)? / fact[n])).collect()
}

/// `B = 1/(r* cos r*)`, where `r*` maximizes `r·cos r` on `(0, π/2)`.
///
/// On the strip `|Im z| ≤ r` both activations are bounded by `1/cos r`,
/// and Cauchy's estimate on a circle of radius `r` then gives
/// `|f⁽ⁿ⁾| ≤ n!/(rⁿ cos r) ≤ n!·Bⁿ` for the maximizing radius.
pub fn strongly_bounded_b() -> f64 {
    let r = stationary_radius();
    1.0 / (r * r.cos())
}

/// Root of `cos r = r sin r` on `(0, π/2)` by bisection.
pub fn stationary_radius() -> f64 {
    let g = |r: f64| r.cos() - r * r.sin();
    let (mut lo, mut hi) = (0.0f64, std::f64::consts::FRAC_PI_2);
    while hi - lo > 1e-15 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// A linear stretch of the kernel density `|f''|`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelPiece {
    pub start: f64,
    pub end: f64,
    /// `|f''|` at `start` and `end`.
    pub left: f64,
    pub right: f64,
    pub sign: f64,
}

impl KernelPiece {
    fn mass(&self) -> f64 {
        0.5 * (self.left + self.right) * (self.end - self.start)
    }

    /// Position with `∫_start^a |f''| = u`.
    fn invert(&self, u: f64) -> f64 {
        let alpha = self.left;
        let beta = (self.right - self.left) / (self.end - self.start);
        if u <= 0.0 {
            return self.start;
        }
        let disc = (alpha * alpha + 2.0 * beta * u).max(0.0);
        let s = 2.0 * u / (alpha + disc.sqrt());
        (self.start + s).clamp(self.start, self.end)
    }
}

/// `f(x) = x²` on `[−1, 1]`, decaying to zero on `±[1, 2]` through
/// `p(1+t) = 4t³ − 7t² + 2t + 1`. Sampling `a ∝ |f''(a)|` with
/// `b = ‖f''‖₁·sign(f''(a))` gives `E[b·relu(x − a)] = f(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadKernel {
    pub pieces: Vec<KernelPiece>,
    pub total_mass: f64,
    pub c_bound: f64,
}

impl QuadKernel {
    pub fn build() -> Self {
        let z = 1.0 + 7.0 / 12.0;
        let pieces = vec![
            KernelPiece { start: -2.0, end: -z, left: 10.0, right: 0.0, sign: 1.0 },
            KernelPiece { start: -z, end: -1.0, left: 0.0, right: 14.0, sign: -1.0 },
            KernelPiece { start: -1.0, end: 1.0, left: 2.0, right: 2.0, sign: 1.0 },
            KernelPiece { start: 1.0, end: z, left: 14.0, right: 0.0, sign: -1.0 },
            KernelPiece { start: z, end: 2.0, left: 0.0, right: 10.0, sign: 1.0 },
        ];
        let total_mass = pieces.iter().map(KernelPiece::mass).sum();
        Self { pieces, total_mass, c_bound: total_mass }
    }

    pub fn f(&self, x: f64) -> f64 {
        let ax = x.abs();
        if ax <= 1.0 {
            x * x
        } else if ax <= 2.0 {
            let t = ax - 1.0;
            ((4.0 * t - 7.0) * t + 2.0) * t + 1.0
        } else {
            0.0
        }
    }

    pub fn second_derivative(&self, x: f64) -> f64 {
        let ax = x.abs();
        if ax < 1.0 {
            2.0
        } else if ax <= 2.0 {
            24.0 * (ax - 1.0) - 14.0
        } else {
            0.0
        }
    }

    pub fn sample_with(&self, g: &mut impl Rng) -> (f64, f64) {
        let mut u = g.random::<f64>() * self.total_mass;
        let last = self.pieces.len() - 1;
        for (i, p) in self.pieces.iter().enumerate() {
            let m = p.mass();
            if u < m || i == last {
                let a = p.invert(u.min(m));
                return (a, self.total_mass * p.sign);
            }
            u -= m;
        }
        unreachable!("kernel has pieces")
    }

    pub fn sample(&self, rng: &RngStream) -> (f64, f64) {
        self.sample_with(&mut rng.generator())
    }
}

pub fn quad_kernel_build() -> QuadKernel {
    QuadKernel::build()
}

pub fn quad_kernel_sample(k: &QuadKernel, rng: &RngStream) -> (f64, f64) {
    k.sample(rng)
}
