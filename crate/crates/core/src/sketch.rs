//! Randomized integer sketches of vectors and matrices.
//!
//! A single sketch picks a flat index `i` with probability
//! `pᵢ = wᵢ²/(2‖w‖²) + 1/(2d)` and stores the integer `⌊wᵢ/pᵢ⌋ + b` with
//! `b ~ Bernoulli(frac(wᵢ/pᵢ))`, so `payload·eᵢ` is an unbiased estimate of
//! `w`. A k-sketch averages k independent sketches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{bounded_width, BitReader, BracketBuilder, BracketedString};
use crate::error::{invalid, Error, Result};
use crate::numerics::{check_finite, Matrix, RngStream};

/// Shape of the sketched object; vectors are `d × 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn vector(d: usize) -> Self {
        Self { rows: d, cols: 1 }
    }

    pub fn matrix(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SketchTerm {
    pub index: usize,
    pub payload: i64,
    pub dims: Shape,
}

impl SketchTerm {
    pub fn reconstruct(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dims.len()];
        out[self.index] = self.payload as f64;
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KSketch {
    pub terms: Vec<SketchTerm>,
    pub k: usize,
    pub dims: Shape,
}

impl KSketch {
    /// Dense `(1/k)·Σ payloadⱼ·e_{indexⱼ}` in row-major order.
    pub fn reconstruct(&self) -> Vec<f64> {
        let mut sums = vec![0i64; self.dims.len()];
        for t in &self.terms {
            sums[t.index] += t.payload;
        }
        sums.into_iter().map(|s| s as f64 / self.k as f64).collect()
    }

    pub fn reconstruct_matrix(&self) -> Matrix {
        Matrix::new(self.dims.rows, self.dims.cols, self.reconstruct()).expect("shape matches")
    }
}

/// The exact sampling distribution of a single sketch of `w`.
#[derive(Clone, Debug)]
pub struct SketchDistribution {
    dims: Shape,
    ratios: Vec<f64>,
    probs: Vec<f64>,
    cdf: Vec<f64>,
}

impl SketchDistribution {
    pub fn new(w: &[f64], dims: Shape) -> Result<Self> {
        check_finite(w, "sketch input")?;
        if w.is_empty() || w.len() != dims.len() {
            return invalid(format!("sketch input has {} entries for shape {}x{}", w.len(), dims.rows, dims.cols));
        }
        let d = w.len() as f64;
        let sq: f64 = w.iter().map(|x| x * x).sum();
        let probs: Vec<f64> = if sq == 0.0 {
            vec![1.0 / d; w.len()]
        } else {
            w.iter().map(|x| x * x / (2.0 * sq) + 0.5 / d).collect()
        };
        let ratios = w.iter().zip(&probs).map(|(x, p)| x / p).collect();
        let mut acc = 0.0;
        let cdf = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self { dims, ratios, probs, cdf })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    /// `wᵢ/pᵢ` for every index.
    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn sample_index(&self, g: &mut impl Rng) -> usize {
        let u: f64 = g.random::<f64>() * self.cdf[self.cdf.len() - 1];
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }

    pub fn sample(&self, g: &mut impl Rng) -> SketchTerm {
        let index = self.sample_index(g);
        let x = self.ratios[index];
        let fl = x.floor();
        let b = g.random::<f64>() < x - fl;
        SketchTerm { index, payload: fl as i64 + b as i64, dims: self.dims }
    }

    /// Every `(index, payload, probability)` outcome with nonzero probability.
    pub fn outcomes(&self) -> Vec<(usize, i64, f64)> {
        let mut out = Vec::new();
        for (i, (&x, &p)) in self.ratios.iter().zip(&self.probs).enumerate() {
            let fl = x.floor();
            let frac = x - fl;
            if frac < 1.0 {
                out.push((i, fl as i64, p * (1.0 - frac)));
            }
            if frac > 0.0 {
                out.push((i, fl as i64 + 1, p * frac));
            }
        }
        out
    }
}

pub fn sketch_vector(w: &[f64], rng: &RngStream) -> Result<SketchTerm> {
    let dist = SketchDistribution::new(w, Shape::vector(w.len()))?;
    Ok(dist.sample(&mut rng.generator()))
}

pub fn sketch_matrix(w: &Matrix, rng: &RngStream) -> Result<SketchTerm> {
    let dist = SketchDistribution::new(w.data(), Shape::matrix(w.rows(), w.cols()))?;
    Ok(dist.sample(&mut rng.generator()))
}

/// `k` independent sketches of `w`, term `j` drawn from child stream `j`.
pub fn ksketch(w: &Matrix, k: usize, rng: &RngStream) -> Result<KSketch> {
    if k == 0 {
        return invalid("k-sketch needs k >= 1");
    }
    let dims = Shape::matrix(w.rows(), w.cols());
    let dist = SketchDistribution::new(w.data(), dims)?;
    let terms = (0..k).map(|j| dist.sample(&mut rng.derive(j as u64).generator())).collect();
    Ok(KSketch { terms, k, dims })
}

/// `Ŵx` without forming the dense matrix.
pub fn apply_ksketch(s: &KSketch, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != s.dims.cols {
        return invalid(format!("sketch has {} columns, vector has {} entries", s.dims.cols, x.len()));
    }
    let mut out = vec![0.0; s.dims.rows];
    for t in &s.terms {
        out[t.index / s.dims.cols] += t.payload as f64 * x[t.index % s.dims.cols];
    }
    let k = s.k as f64;
    out.iter_mut().for_each(|v| *v /= k);
    Ok(out)
}

/// Fixed-width layout of sketch terms for a given shape and norm bound.
///
/// Since `pᵢ ≥ 1/(2d)`, `|wᵢ/pᵢ| ≤ 2d·|wᵢ|`; tighter, `pᵢ ≥ |wᵢ|/(‖w‖√d)`
/// bounds it by `√d·‖w‖`. Payloads therefore lie in `[−N, N+1]` with
/// `N = ⌈d·M⌉`, which is `2dM + 2` values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SketchLayout {
    pub dims: Shape,
    pub index_width: u32,
    pub payload_lo: i64,
    pub payload_hi: i64,
    pub payload_width: u32,
}

impl SketchLayout {
    pub fn new(dims: Shape, m_bound: f64) -> Result<Self> {
        if dims.is_empty() {
            return invalid("sketch layout needs a nonempty shape");
        }
        if !m_bound.is_finite() || m_bound < 0.0 {
            return invalid(format!("norm bound must be finite and nonnegative, got {m_bound}"));
        }
        let n = (dims.len() as f64 * m_bound).ceil();
        if n > (1u64 << 52) as f64 {
            return invalid(format!("payload range for bound {m_bound} is too large"));
        }
        let n = n as i64;
        Ok(Self {
            dims,
            index_width: bounded_width(0, dims.len() as i64 - 1),
            payload_lo: -n,
            payload_hi: n + 1,
            payload_width: bounded_width(-n, n + 1),
        })
    }

    pub fn term_bits(&self) -> u64 {
        (self.index_width + self.payload_width) as u64
    }

    pub fn check(&self, t: &SketchTerm) -> Result<()> {
        if t.dims != self.dims || t.index >= self.dims.len() {
            return Err(Error::Internal(format!("term index {} outside shape", t.index)));
        }
        if t.payload < self.payload_lo || t.payload > self.payload_hi {
            return Err(Error::Internal(format!(
                "payload {} outside [{}, {}]",
                t.payload, self.payload_lo, self.payload_hi
            )));
        }
        Ok(())
    }

    pub(crate) fn push_term(&self, b: &mut BracketBuilder, index: usize, payload: i64) {
        b.open();
        b.push_uint(index as u64, self.index_width);
        b.push_uint((payload - self.payload_lo) as u64, self.payload_width);
        b.close();
    }

    pub(crate) fn read_term(&self, r: &mut BitReader<'_>) -> Result<SketchTerm> {
        let index = r.read(self.index_width)? as usize;
        let payload = self.payload_lo + r.read(self.payload_width)? as i64;
        if index >= self.dims.len() || payload > self.payload_hi {
            return invalid(format!("decoded term ({index}, {payload}) outside layout"));
        }
        Ok(SketchTerm { index, payload, dims: self.dims })
    }
}

/// Bound on the encoded length of a k-sketch: `2k⌈log₂(2d(M+1))⌉`.
pub fn encoded_length_bound(dims: Shape, k: usize, m_bound: f64) -> u64 {
    let d = dims.len() as f64;
    2 * k as u64 * (2.0 * d * (m_bound + 1.0)).log2().ceil() as u64
}

/// Concatenation of per-term `[index payload]` codes.
pub fn encode_sketch(s: &KSketch, m_bound: f64) -> Result<BracketedString> {
    let layout = SketchLayout::new(s.dims, m_bound)?;
    let mut b = BracketBuilder::new();
    for t in &s.terms {
        layout.check(t)?;
        layout.push_term(&mut b, t.index, t.payload);
    }
    Ok(b.finish())
}

/// Reads `k` fixed-width terms from the leaf bits of `code`.
pub fn decode_sketch(code: &BracketedString, dims: Shape, k: usize, m_bound: f64) -> Result<KSketch> {
    if k == 0 {
        return invalid("k-sketch needs k >= 1");
    }
    let layout = SketchLayout::new(dims, m_bound)?;
    let expected = layout.term_bits() * k as u64;
    if code.len() as u64 != expected {
        return invalid(format!("sketch code has {} bits, expected {expected}", code.len()));
    }
    let mut r = BitReader::new(code);
    let terms = (0..k).map(|_| layout.read_term(&mut r)).collect::<Result<Vec<_>>>()?;
    Ok(KSketch { terms, k, dims })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn root() -> RngStream {
        RngStream::new(11)
    }

    #[test]
    fn zero_vector_sketch_is_zero() {
        for t in 0..20 {
            let s = sketch_vector(&[0.0; 3], &root().derive(t)).unwrap();
            assert_eq!(s.payload, 0);
            assert!(s.reconstruct().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn three_four_example() {
        let dist = SketchDistribution::new(&[3.0, 4.0], Shape::vector(2)).unwrap();
        let p = dist.probabilities();
        assert!((p[0] - 0.43).abs() < 1e-12 && (p[1] - 0.57).abs() < 1e-12);
        let at1: Vec<_> = dist.outcomes().into_iter().filter(|o| o.0 == 1).collect();
        assert_eq!(at1.iter().map(|o| o.1).collect::<Vec<_>>(), vec![7, 8]);
        let cond: f64 = at1.iter().map(|o| o.1 as f64 * o.2).sum::<f64>();
        assert!((cond - 4.0).abs() < 1e-12);
        let at0: Vec<_> = dist.outcomes().into_iter().filter(|o| o.0 == 0).collect();
        assert_eq!(at0.iter().map(|o| o.1).collect::<Vec<_>>(), vec![6, 7]);
        assert!((at0.iter().map(|o| o.1 as f64 * o.2).sum::<f64>() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn matrix_flattening_matches_vector() {
        let m = Matrix::new(1, 2, vec![3.0, 4.0]).unwrap();
        let r = root().derive(5);
        let a = sketch_matrix(&m, &r).unwrap();
        let b = sketch_vector(&[3.0, 4.0], &r).unwrap();
        assert_eq!((a.index, a.payload), (b.index, b.payload));
        assert_eq!(sketch_matrix(&Matrix::zeros(2, 2), &r).unwrap().payload, 0);
    }

    #[test]
    fn exact_unbiasedness_small_dims() {
        let mags = [0.0, 0.3, 1.0, 5.0];
        for d in 1..=3usize {
            let total = mags.len().pow(d as u32);
            for code in 0..total {
                let mut c = code;
                let w: Vec<f64> = (0..d)
                    .map(|i| {
                        let v = mags[c % 4] * if i % 2 == 0 { 1.0 } else { -1.0 };
                        c /= 4;
                        v
                    })
                    .collect();
                let dist = SketchDistribution::new(&w, Shape::vector(d)).unwrap();
                let mut e = vec![0.0; d];
                let mut mass = 0.0;
                for (i, p, pr) in dist.outcomes() {
                    e[i] += p as f64 * pr;
                    mass += pr;
                }
                assert!((mass - 1.0).abs() < 1e-12);
                for i in 0..d {
                    assert!((e[i] - w[i]).abs() <= 1e-10, "{w:?}");
                }
            }
        }
    }

    #[test]
    fn index_sampler_matches_probabilities() {
        let dist = SketchDistribution::new(&[1.0, -2.0, 0.5, 0.0], Shape::vector(4)).unwrap();
        let mut g = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[dist.sample_index(&mut g)] += 1;
        }
        for (c, p) in counts.iter().zip(dist.probabilities()) {
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - p).abs() < 5.0 * se);
        }
    }

    #[test]
    fn apply_rank_one_term() {
        let s = KSketch {
            terms: vec![SketchTerm { index: 1, payload: 7, dims: Shape::matrix(2, 2) }],
            k: 1,
            dims: Shape::matrix(2, 2),
        };
        assert_eq!(apply_ksketch(&s, &[0.0, 1.0]).unwrap(), vec![7.0, 0.0]);
        assert!(apply_ksketch(&s, &[1.0]).is_err());
    }

    #[test]
    fn apply_matches_dense_reconstruction() {
        let mut g = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for case in 0..100u64 {
            let (r, c) = (g.random_range(1..6), g.random_range(1..6));
            let w = Matrix::new(r, c, (0..r * c).map(|_| g.random_range(-2.0..2.0)).collect()).unwrap();
            let k = g.random_range(1..20);
            let s = ksketch(&w, k, &root().derive(case)).unwrap();
            let x: Vec<f64> = (0..c).map(|_| g.random_range(-1.0..1.0)).collect();
            let fast = apply_ksketch(&s, &x).unwrap();
            let dense = s.reconstruct_matrix().matvec(&x).unwrap();
            for (a, b) in fast.iter().zip(&dense) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn ksketch_rejects_zero_k() {
        assert!(ksketch(&Matrix::identity(2), 0, &root()).is_err());
        assert_eq!(ksketch(&Matrix::identity(2), 1, &root()).unwrap().terms.len(), 1);
    }

    #[test]
    fn encoded_lengths_within_bound() {
        let layout = SketchLayout::new(Shape::matrix(2, 2), 1.0).unwrap();
        assert!(layout.term_bits() <= 8);
        assert_eq!(encoded_length_bound(Shape::matrix(2, 2), 1, 1.0), 8);
        let layout = SketchLayout::new(Shape::matrix(4, 4), 2.0).unwrap();
        assert_eq!(encoded_length_bound(Shape::matrix(4, 4), 9, 2.0), 126);
        assert!(9 * layout.term_bits() <= 126);
    }

    #[test]
    fn sketch_code_round_trip() {
        let mut g = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for case in 0..1000u64 {
            let (r, c) = (g.random_range(1..5), g.random_range(1..5));
            let w = Matrix::new(r, c, (0..r * c).map(|_| g.random_range(-3.0..3.0)).collect()).unwrap();
            let m = w.frobenius_norm();
            let k = g.random_range(1..12);
            let s = ksketch(&w, k, &root().derive(case)).unwrap();
            let code = encode_sketch(&s, m).unwrap();
            assert!(code.len() as u64 <= encoded_length_bound(s.dims, k, m));
            let text = code.serialize();
            let back = BracketedString::deserialize(&text).unwrap();
            assert_eq!(decode_sketch(&back, s.dims, k, m).unwrap(), s);
        }
    }

    #[test]
    fn out_of_range_payload_is_internal_error() {
        let s = KSketch {
            terms: vec![SketchTerm { index: 0, payload: 100, dims: Shape::vector(2) }],
            k: 1,
            dims: Shape::vector(2),
        };
        assert!(matches!(encode_sketch(&s, 1.0), Err(Error::Internal(_))));
    }
}
