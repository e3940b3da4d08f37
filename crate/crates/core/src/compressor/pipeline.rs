//! Whole-network compression on a sample set.
//!
//! One draw of the compressed network is a tree of estimator nodes: a
//! linear node averages `k₁` draws of the previous activation node and
//! carries a `k₂`-sketch, and an activation node holds its Taylor gates and
//! `N` groups of averaged previous-layer draws. The same [`CompressionPlan`]
//! evaluates trees for the encoder and the decoder, so decoded values match
//! the encoder's bit for bit.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::{strongly_bounded_b, taylor_coeffs, Activation, MAX_TAYLOR_ORDER};
use crate::codec::{bounded_width, BitReader, BitReport, BracketBuilder, BracketedString};
use crate::error::{invalid, Error, Result};
use crate::estimators::{probe_directions, ErrorMoments, VarianceReport, DEFAULT_DIRECTIONS};
use crate::numerics::{norm, spectral_norm, Matrix, RngStream};
use crate::sketch::{Shape, SketchDistribution};

use super::bounds::{adl_theoretical_class, AdlBudget, LayerBudget, CONVENTION};
use super::layers::{
    default_eps, expected_depth_bound, factor_mean_count, taylor_estimate, ActivationConstants, GateSchedule,
    LinearConstants, TaylorBudget, GATE_STREAM, SKETCH_STREAM,
};
use super::network::{NetworkClass, NetworkSpec, SampleSet};

/// Cap on the expected number of tree nodes in one draw.
pub const DEFAULT_NODE_CAP: f64 = 1e7;
const CHUNK: u64 = 64;
const DIRECTION_STREAM: u64 = u64::MAX;
/// Stream of the center estimators in seedless mode.
const CENTER_STREAM: u64 = u64::MAX - 3;

/// Where activation layers take their Taylor centers from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum SeedMode {
    /// Pre-activations on the sample, rounded to a grid of spacing `ε`.
    Quantized,
    /// Experimental: the center is the mean of `center_mean` fresh
    /// previous-layer draws carried in the code. Coefficient bounds fall
    /// back to `Bⁿ` and the center error is taken as `3σ/√center_mean`,
    /// so the variance claim is heuristic.
    Seedless { center_mean: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressorConfig {
    pub budget: TaylorBudget,
    pub eps: f64,
    pub node_cap: f64,
    pub seed_mode: SeedMode,
}

impl Default for CompressorConfig {
    fn default() -> Self {
        Self { budget: TaylorBudget::Tight, eps: default_eps(), node_cap: DEFAULT_NODE_CAP, seed_mode: SeedMode::Quantized }
    }
}

impl CompressorConfig {
    fn validate(&self) -> Result<()> {
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return invalid(format!("seed spacing must be positive, got {}", self.eps));
        }
        if !(self.node_cap > 0.0) {
            return invalid("node cap must be positive");
        }
        if let SeedMode::Seedless { center_mean: 0 } = self.seed_mode {
            return invalid("seedless mode needs at least one center draw");
        }
        Ok(())
    }
}

/// Seed contents of one stage.
#[derive(Clone, Debug, PartialEq)]
pub enum StageSeed {
    Linear { m_prev: f64 },
    /// Grid indices `j` with seed value `j·ε`, point-major.
    Activation { m_grid: f64, indices: Vec<i64> },
    Seedless,
}

/// Per-stage constants as reported.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StageConstants {
    Linear { layer: usize, d_in: usize, d_out: usize, constants: LinearConstants },
    Activation { layer: usize, d: usize, grid_half_width: i64, constants: ActivationConstants },
}

#[derive(Clone, Debug)]
struct LinearStage {
    layer: usize,
    d1: usize,
    d2: usize,
    w0: Matrix,
    first: bool,
    c: LinearConstants,
}

#[derive(Clone, Debug)]
struct ActivationStage {
    layer: usize,
    d: usize,
    act: Activation,
    c: ActivationConstants,
    half_width: i64,
    /// Seeded mode: centers, `ρ(center)` and coefficients, point-major.
    seed: Option<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)>,
    center_mean: usize,
}

#[derive(Clone, Debug)]
enum Stage {
    Linear(LinearStage),
    Activation(ActivationStage),
}

impl Stage {
    fn name(&self) -> String {
        match self {
            Stage::Linear(l) => format!("linear {}", l.layer + 1),
            Stage::Activation(a) => format!("{} {}", a.act.name(), a.layer + 1),
        }
    }
}

/// One draw of a stage's estimator.
#[derive(Clone, Debug, PartialEq)]
pub enum DrawNode {
    Linear { inputs: Vec<DrawNode>, terms: Vec<(u32, i64)> },
    Activation { center: Vec<DrawNode>, gates: Vec<bool>, factors: Vec<Vec<DrawNode>> },
}

/// Everything both ends share: the class, the sample, the config and the
/// seed-derived constants of every stage.
#[derive(Clone, Debug)]
pub struct CompressionPlan {
    class: NetworkClass,
    inputs: Vec<f64>,
    m: usize,
    config: CompressorConfig,
    stages: Vec<Stage>,
    seed: BracketedString,
    expected_nodes: Vec<f64>,
}

fn seed_bits_of(seeds: &[StageSeed], eps: f64) -> Result<BracketedString> {
    let mut b = BracketBuilder::new();
    for (s, st) in seeds.iter().enumerate() {
        match st {
            StageSeed::Linear { m_prev } => b.push_uint(m_prev.to_bits(), 64),
            StageSeed::Activation { m_grid, indices } => {
                b.push_uint(m_grid.to_bits(), 64);
                let j = grid_half_width(*m_grid, eps)?;
                let w = bounded_width(0, 2 * j);
                for &i in indices {
                    if i.abs() > j {
                        return Err(Error::Internal(format!("grid index {i} outside ±{j} at stage {s}")));
                    }
                    b.push_uint((i + j) as u64, w);
                }
            }
            StageSeed::Seedless => {}
        }
    }
    Ok(b.finish())
}

fn grid_half_width(m_grid: f64, eps: f64) -> Result<i64> {
    if !(m_grid.is_finite() && m_grid >= 0.0) {
        return invalid(format!("grid bound must be finite and nonnegative, got {m_grid}"));
    }
    let j = (m_grid / eps).ceil();
    if j > (1u64 << 52) as f64 {
        return invalid(format!("grid of half-width {m_grid} at spacing {eps} is too large"));
    }
    Ok(j as i64)
}

fn mean_of(tables: impl Iterator<Item = Vec<f64>>, k: usize) -> Vec<f64> {
    let mut acc: Option<Vec<f64>> = None;
    for t in tables {
        match acc.as_mut() {
            None => acc = Some(t),
            Some(a) => a.iter_mut().zip(&t).for_each(|(x, y)| *x += y),
        }
    }
    let mut a = acc.expect("at least one table");
    a.iter_mut().for_each(|x| *x /= k as f64);
    a
}

fn malformed(stage: &str, reason: impl std::fmt::Display) -> Error {
    Error::InvalidInput(format!("malformed code for {stage}: {reason}"))
}

impl CompressionPlan {
    fn build(
        class: &NetworkClass,
        samples: &SampleSet,
        config: &CompressorConfig,
        seeds: &[StageSeed],
        seed: BracketedString,
    ) -> Result<Self> {
        config.validate()?;
        if samples.dim() != class.input_dim() {
            return invalid(format!("samples have dimension {}, network input {}", samples.dim(), class.input_dim()));
        }
        let t = class.depth();
        let m = samples.len();
        let mut stages = Vec::with_capacity(2 * t - 1);
        let mut sigma_prev = 0.0;
        let mut seeds = seeds.iter();
        let mut next_seed = || seeds.next().ok_or_else(|| Error::InvalidInput("seed has too few stages".into()));
        let b = strongly_bounded_b();
        for i in 0..t {
            let (d1, d2) = (class.dims[i], class.dims[i + 1]);
            let StageSeed::Linear { m_prev } = *next_seed()? else {
                return invalid(format!("seed stage for linear layer {} has the wrong kind", i + 1));
            };
            let w0 = class.refs[i].clone();
            let c = LinearConstants::new(d1, d2, class.r, class.big_r, spectral_norm(&w0), m_prev, sigma_prev)?;
            sigma_prev = c.sigma_bound;
            stages.push(Stage::Linear(LinearStage { layer: i, d1, d2, w0, first: i == 0, c }));
            if i + 1 == t {
                break;
            }
            let act = class.activation;
            let stage = match (next_seed()?, config.seed_mode) {
                (StageSeed::Activation { m_grid, indices }, SeedMode::Quantized) => {
                    let half_width = grid_half_width(*m_grid, config.eps)?;
                    if indices.len() != m * d2 {
                        return invalid(format!("seed has {} grid values for layer {}, expected {}", indices.len(), i + 1, m * d2));
                    }
                    let centers: Vec<f64> = indices.iter().map(|&j| j as f64 * config.eps).collect();
                    let (c, coeffs) =
                        ActivationConstants::with_dim(act, &centers, d2, config.eps, config.budget, sigma_prev)?;
                    let base = centers.iter().map(|&v| act.eval(v)).collect();
                    ActivationStage {
                        layer: i,
                        d: d2,
                        act,
                        c,
                        half_width,
                        seed: Some((centers, base, coeffs)),
                        center_mean: 0,
                    }
                }
                (StageSeed::Seedless, SeedMode::Seedless { center_mean }) => {
                    let eps_eff = 3.0 * sigma_prev / (center_mean as f64).sqrt();
                    let schedule = GateSchedule::new(d2);
                    let bounds: Vec<f64> = (1..=MAX_TAYLOR_ORDER).map(|n| b.powi(n as i32)).collect();
                    let k = factor_mean_count(config.budget, &bounds, &schedule, sigma_prev, eps_eff, d2)?;
                    let sigma_claim = super::layers::taylor_sigma(
                        &bounds,
                        &schedule,
                        sigma_prev * sigma_prev / k as f64,
                        eps_eff,
                        d2,
                    );
                    let expected_factors = schedule.expected_max();
                    let c = ActivationConstants {
                        activation: act,
                        b,
                        eps: eps_eff,
                        budget: config.budget,
                        factor_mean: k,
                        schedule,
                        coeff_bounds: bounds,
                        sigma_claim,
                        expected_factors,
                    };
                    ActivationStage { layer: i, d: d2, act, c, half_width: 0, seed: None, center_mean }
                }
                _ => return invalid(format!("seed stage for activation {} does not match the seed mode", i + 1)),
            };
            sigma_prev = stage.c.sigma_claim;
            stages.push(Stage::Activation(stage));
        }
        if next_seed().is_ok() {
            return invalid("seed has too many stages");
        }
        let mut expected_nodes = Vec::with_capacity(stages.len());
        for st in &stages {
            let prev = expected_nodes.last().copied().unwrap_or(0.0);
            expected_nodes.push(match st {
                Stage::Linear(l) if l.first => 1.0,
                Stage::Linear(l) => 1.0 + l.c.k1 as f64 * prev,
                Stage::Activation(a) => {
                    1.0 + (a.center_mean as f64 + a.c.expected_factors * a.c.factor_mean as f64) * prev
                }
            });
        }
        let inputs = samples.points.iter().flatten().copied().collect();
        Ok(Self { class: class.clone(), inputs, m, config: *config, stages, seed, expected_nodes })
    }

    /// Parses a seed and rebuilds the constants of every stage.
    pub fn from_seed(
        class: &NetworkClass,
        samples: &SampleSet,
        config: &CompressorConfig,
        seed: &BracketedString,
    ) -> Result<Self> {
        config.validate()?;
        let t = class.depth();
        let m = samples.len();
        let mut r = BitReader::new(seed);
        let mut seeds = Vec::with_capacity(2 * t - 1);
        for i in 0..t {
            seeds.push(StageSeed::Linear { m_prev: f64::from_bits(r.read(64)?) });
            if i + 1 == t {
                break;
            }
            match config.seed_mode {
                SeedMode::Quantized => {
                    let m_grid = f64::from_bits(r.read(64)?);
                    let j = grid_half_width(m_grid, config.eps)?;
                    let w = bounded_width(0, 2 * j);
                    let mut indices = Vec::with_capacity(m * class.dims[i + 1]);
                    for _ in 0..m * class.dims[i + 1] {
                        let v = r.read(w)? as i64 - j;
                        if v > j {
                            return invalid(format!("seed grid index {v} above {j}"));
                        }
                        indices.push(v);
                    }
                    seeds.push(StageSeed::Activation { m_grid, indices });
                }
                SeedMode::Seedless { .. } => seeds.push(StageSeed::Seedless),
            }
        }
        if !r.is_exhausted() {
            return invalid("seed has trailing bits");
        }
        Self::build(class, samples, config, &seeds, seed.clone())
    }

    pub fn seed(&self) -> &BracketedString {
        &self.seed
    }

    pub fn class(&self) -> &NetworkClass {
        &self.class
    }

    pub fn config(&self) -> &CompressorConfig {
        &self.config
    }

    pub fn points(&self) -> usize {
        self.m
    }

    pub fn output_dim(&self) -> usize {
        self.class.output_dim()
    }

    pub fn stage_names(&self) -> Vec<String> {
        self.stages.iter().map(Stage::name).collect()
    }

    /// Expected tree nodes of one draw of each stage.
    pub fn expected_nodes(&self) -> &[f64] {
        &self.expected_nodes
    }

    /// Claimed σ of the final estimator.
    pub fn sigma_claim(&self) -> f64 {
        match self.stages.last() {
            Some(Stage::Linear(l)) => l.c.sigma_bound,
            Some(Stage::Activation(a)) => a.c.sigma_claim,
            None => 0.0,
        }
    }

    pub fn stage_constants(&self) -> Vec<StageConstants> {
        self.stages
            .iter()
            .map(|s| match s {
                Stage::Linear(l) => {
                    StageConstants::Linear { layer: l.layer + 1, d_in: l.d1, d_out: l.d2, constants: l.c.clone() }
                }
                Stage::Activation(a) => StageConstants::Activation {
                    layer: a.layer + 1,
                    d: a.d,
                    grid_half_width: a.half_width,
                    constants: a.c.clone(),
                },
            })
            .collect()
    }

    /// `64` bits per stage for the norm bounds plus `m·d·⌈log₂(2J + 1)⌉`
    /// per quantized activation, `J = ⌈M/ε⌉`.
    pub fn quantization_seed_bits(&self) -> u64 {
        self.stages
            .iter()
            .map(|s| match s {
                Stage::Linear(_) => 64,
                Stage::Activation(a) if a.seed.is_some() => {
                    64 + (self.m * a.d) as u64 * bounded_width(0, 2 * a.half_width) as u64
                }
                Stage::Activation(_) => 0,
            })
            .sum()
    }

    fn top(&self) -> usize {
        self.stages.len() - 1
    }

    /// The `m × d_t` output table of a draw.
    pub fn evaluate(&self, node: &DrawNode) -> Result<Vec<f64>> {
        self.eval(self.top(), node)
    }

    fn eval(&self, s: usize, node: &DrawNode) -> Result<Vec<f64>> {
        match (&self.stages[s], node) {
            (Stage::Linear(l), DrawNode::Linear { inputs, terms }) => {
                let x = if l.first {
                    self.inputs.clone()
                } else {
                    let tables = inputs.iter().map(|c| self.eval(s - 1, c)).collect::<Result<Vec<_>>>()?;
                    mean_of(tables.into_iter(), l.c.k1)
                };
                let mut sums = vec![0i64; l.d1 * l.d2];
                for &(i, p) in terms {
                    sums[i as usize] += p;
                }
                Ok(self.apply_linear(l, &x, &sums))
            }
            (Stage::Activation(a), DrawNode::Activation { center, gates, factors }) => {
                let k = a.c.factor_mean;
                let mut f = Vec::with_capacity(factors.len());
                for group in factors {
                    let tables = group.iter().map(|c| self.eval(s - 1, c)).collect::<Result<Vec<_>>>()?;
                    f.push(mean_of(tables.into_iter(), k));
                }
                let c = if a.seed.is_none() {
                    let tables = center.iter().map(|c| self.eval(s - 1, c)).collect::<Result<Vec<_>>>()?;
                    Some(mean_of(tables.into_iter(), a.center_mean))
                } else {
                    None
                };
                self.apply_activation(a, c, gates, &f)
            }
            _ => Err(Error::Internal(format!("draw node does not match {}", self.stages[s].name()))),
        }
    }

    /// `(W⁰ + S/k₂)·x` pointwise, with `S` the summed integer payloads.
    fn apply_linear(&self, l: &LinearStage, x: &[f64], sums: &[i64]) -> Vec<f64> {
        let k2 = l.c.k2 as f64;
        let a: Vec<f64> = l.w0.data().iter().zip(sums).map(|(w, &v)| w + v as f64 / k2).collect();
        let mut out = vec![0.0; self.m * l.d2];
        for p in 0..self.m {
            let xp = &x[p * l.d1..(p + 1) * l.d1];
            for i in 0..l.d2 {
                let row = &a[i * l.d1..(i + 1) * l.d1];
                out[p * l.d2 + i] = row.iter().zip(xp).map(|(u, v)| u * v).sum();
            }
        }
        out
    }

    fn apply_activation(
        &self,
        a: &ActivationStage,
        center: Option<Vec<f64>>,
        gates: &[bool],
        factors: &[Vec<f64>],
    ) -> Result<Vec<f64>> {
        match (&a.seed, center) {
            (Some((centers, base, coeffs)), _) => {
                Ok(taylor_estimate(base, centers, |j, n| coeffs[j][n], gates, &a.c.schedule, factors))
            }
            (None, Some(c)) => {
                let order = gates.len().max(1);
                let coeffs = c.iter().map(|&v| taylor_coeffs(a.act, v, order)).collect::<Result<Vec<_>>>()?;
                let base: Vec<f64> = c.iter().map(|&v| a.act.eval(v)).collect();
                Ok(taylor_estimate(&base, &c, |j, n| coeffs[j][n], gates, &a.c.schedule, factors))
            }
            (None, None) => Err(Error::Internal("seedless activation without a center".into())),
        }
    }

    /// Code length in bits, with per-stage tallies.
    fn tally(&self, s: usize, node: &DrawNode, t: &mut Tally) -> u64 {
        let bits = match (&self.stages[s], node) {
            (Stage::Linear(l), DrawNode::Linear { inputs, .. }) => {
                inputs.iter().map(|c| self.tally(s - 1, c, t)).sum::<u64>() + l.c.sketch_bits()
            }
            (Stage::Activation(_), DrawNode::Activation { center, gates, factors }) => {
                let n = gates.len() as f64;
                t.gates[s].0 += n;
                t.gates[s].1 += n * n;
                t.gates[s].2 += 1;
                let c: u64 = center.iter().map(|c| self.tally(s - 1, c, t)).sum();
                c + factors.iter().map(|g| 1 + g.iter().map(|c| self.tally(s - 1, c, t)).sum::<u64>()).sum::<u64>()
            }
            _ => 0,
        };
        t.bits[s].0 += bits as f64;
        t.bits[s].1 += 1;
        bits
    }

    pub fn code_bits(&self, node: &DrawNode) -> u64 {
        self.tally(self.top(), node, &mut Tally::new(self.stages.len()))
    }

    pub fn encode(&self, node: &DrawNode) -> BracketedString {
        let mut b = BracketBuilder::new();
        self.encode_into(self.top(), node, &mut b);
        b.finish()
    }

    fn encode_into(&self, s: usize, node: &DrawNode, b: &mut BracketBuilder) {
        match (&self.stages[s], node) {
            (Stage::Linear(l), DrawNode::Linear { inputs, terms }) => {
                b.open();
                for c in inputs {
                    self.encode_into(s - 1, c, b);
                }
                b.open();
                for &(i, p) in terms {
                    l.c.layout.push_term(b, i as usize, p);
                }
                b.close();
                b.close();
            }
            (Stage::Activation(a), DrawNode::Activation { center, gates, factors }) => {
                b.open();
                if a.seed.is_none() {
                    b.open();
                    for c in center {
                        self.encode_into(s - 1, c, b);
                    }
                    b.close();
                }
                b.open();
                for (z, group) in gates.iter().zip(factors) {
                    b.open();
                    b.push_bit(*z);
                    b.open();
                    for c in group {
                        self.encode_into(s - 1, c, b);
                    }
                    b.close();
                    b.close();
                }
                b.close();
                b.close();
            }
            _ => unreachable!("draw nodes are built against this plan"),
        }
    }

    pub fn decode(&self, code: &BracketedString) -> Result<DrawNode> {
        self.decode_stage(self.top(), code)
    }

    /// Decodes a code and evaluates it on the sample.
    pub fn decode_values(&self, code: &BracketedString) -> Result<Vec<f64>> {
        self.evaluate(&self.decode(code)?)
    }

    fn decode_group(&self, s: usize, code: &BracketedString, k: usize) -> Result<Vec<DrawNode>> {
        if k == 1 {
            return Ok(vec![self.decode_stage(s, code)?]);
        }
        let ch = code.children();
        if ch.len() != k {
            return Err(malformed(&self.stages[s + 1].name(), format!("group has {} codes, expected {k}", ch.len())));
        }
        ch.iter().map(|c| self.decode_stage(s, c)).collect()
    }

    fn decode_stage(&self, s: usize, code: &BracketedString) -> Result<DrawNode> {
        let name = self.stages[s].name();
        match &self.stages[s] {
            Stage::Linear(l) => {
                let (inputs, sketch) = if l.first {
                    (Vec::new(), code.clone())
                } else {
                    let mut ch = code.children();
                    if ch.len() != l.c.k1 + 1 {
                        return Err(malformed(&name, format!("{} parts, expected {}", ch.len(), l.c.k1 + 1)));
                    }
                    let sketch = ch.pop().expect("nonempty");
                    let inputs = ch.iter().map(|c| self.decode_stage(s - 1, c)).collect::<Result<Vec<_>>>()?;
                    (inputs, sketch)
                };
                let mut r = BitReader::new(&sketch);
                let mut terms = Vec::with_capacity(l.c.k2);
                for _ in 0..l.c.k2 {
                    let t = l.c.layout.read_term(&mut r).map_err(|e| malformed(&name, e))?;
                    terms.push((t.index as u32, t.payload));
                }
                if !r.is_exhausted() {
                    return Err(malformed(&name, "sketch has trailing bits"));
                }
                Ok(DrawNode::Linear { inputs, terms })
            }
            Stage::Activation(a) => {
                let (center, body) = if a.seed.is_none() {
                    let ch = code.children();
                    if ch.len() != 2 {
                        return Err(malformed(&name, "expected center and terms"));
                    }
                    (self.decode_group(s - 1, &ch[0], a.center_mean)?, ch[1].clone())
                } else {
                    (Vec::new(), code.clone())
                };
                let ch = body.children();
                let entries = match ch.first() {
                    Some(c) if !c.is_leaf() => ch,
                    _ => vec![body],
                };
                if entries.len() > a.c.schedule.max_order() {
                    return Err(malformed(&name, format!("{} Taylor terms exceed the cap", entries.len())));
                }
                let mut gates = Vec::with_capacity(entries.len());
                let mut factors = Vec::with_capacity(entries.len());
                for (i, e) in entries.iter().enumerate() {
                    let parts = e.children();
                    if parts.len() != 2 || !parts[0].is_leaf() {
                        return Err(malformed(&name, format!("term {} is not a gate and a factor group", i + 1)));
                    }
                    let z = parts[0].bits().next().expect("leaf has a bit");
                    if !z && a.c.schedule.p(i + 1) >= 1.0 {
                        return Err(malformed(&name, format!("deterministic gate {} is closed", i + 1)));
                    }
                    gates.push(z);
                    factors.push(self.decode_group(s - 1, &parts[1], a.c.factor_mean)?);
                }
                if gates.last() != Some(&true) {
                    return Err(malformed(&name, "last Taylor gate must be open"));
                }
                Ok(DrawNode::Activation { center, gates, factors })
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Tally {
    /// Per stage: summed code bits and instance count.
    bits: Vec<(f64, u64)>,
    /// Per stage: `Σ N`, `Σ N²` and instance count.
    gates: Vec<(f64, f64, u64)>,
}

impl Tally {
    fn new(stages: usize) -> Self {
        Self { bits: vec![(0.0, 0); stages], gates: vec![(0.0, 0.0, 0); stages] }
    }

    fn merge(&mut self, o: &Self) {
        for (a, b) in self.bits.iter_mut().zip(&o.bits) {
            a.0 += b.0;
            a.1 += b.1;
        }
        for (a, b) in self.gates.iter_mut().zip(&o.gates) {
            a.0 += b.0;
            a.1 += b.1;
            a.2 += b.2;
        }
    }
}

/// Encoder side: the plan plus the sketch distributions of `W − W⁰`.
#[derive(Clone, Debug)]
pub struct NetworkCompressor {
    plan: CompressionPlan,
    dists: Vec<Arc<SketchDistribution>>,
    truth: Vec<f64>,
}

impl NetworkCompressor {
    /// Measures norms, quantizes pre-activations and fixes all constants.
    pub fn new(net: &NetworkSpec, samples: &SampleSet, config: &CompressorConfig) -> Result<Self> {
        config.validate()?;
        let class = &net.class;
        let t = class.depth();
        let pre = samples.points.iter().map(|x| net.pre_activations(x)).collect::<Result<Vec<_>>>()?;
        let mut seeds = Vec::with_capacity(2 * t - 1);
        for i in 0..t {
            let m_prev = if i == 0 {
                samples.points.iter().map(|x| norm(x)).fold(0.0, f64::max)
            } else {
                pre.iter()
                    .map(|z| norm(&z[i - 1].iter().map(|&v| class.activation.eval(v)).collect::<Vec<_>>()))
                    .fold(0.0, f64::max)
            };
            seeds.push(StageSeed::Linear { m_prev: m_prev.max(f64::MIN_POSITIVE) });
            if i + 1 == t {
                break;
            }
            match config.seed_mode {
                SeedMode::Quantized => {
                    let m_grid = pre.iter().flat_map(|z| z[i].iter()).fold(0.0f64, |a, v| a.max(v.abs()));
                    let indices = pre.iter().flat_map(|z| z[i].iter()).map(|&v| (v / config.eps).round() as i64).collect();
                    seeds.push(StageSeed::Activation { m_grid, indices });
                }
                SeedMode::Seedless { .. } => seeds.push(StageSeed::Seedless),
            }
        }
        let seed = seed_bits_of(&seeds, config.eps)?;
        let plan = CompressionPlan::build(class, samples, config, &seeds, seed)?;
        let top = *plan.expected_nodes.last().expect("at least one stage");
        if top > config.node_cap {
            return Err(Error::Resource(format!(
                "expected estimator tree of {top:.3e} nodes exceeds the cap {:.3e} (per stage: {:?})",
                config.node_cap, plan.expected_nodes
            )));
        }
        let dists = net
            .layers
            .iter()
            .zip(&class.refs)
            .map(|(w, w0)| {
                let v = w.sub(w0)?;
                Ok(Arc::new(SketchDistribution::new(v.data(), Shape::matrix(v.rows(), v.cols()))?))
            })
            .collect::<Result<Vec<_>>>()?;
        let truth = pre.iter().flat_map(|z| z[t - 1].iter().copied()).collect();
        Ok(Self { plan, dists, truth })
    }

    pub fn plan(&self) -> &CompressionPlan {
        &self.plan
    }

    /// True outputs on the sample, point-major.
    pub fn truth(&self) -> &[f64] {
        &self.truth
    }

    /// Samples and evaluates a draw without keeping its tree; the values
    /// equal `plan().evaluate(&sample(rng))` bit for bit.
    pub fn sample_values(&self, rng: &RngStream) -> Result<(Vec<f64>, u64)> {
        let mut t = Tally::new(self.plan.stages.len());
        self.fused(self.plan.top(), rng, &mut t)
    }

    fn fused_mean(&self, s: usize, rngs: impl Iterator<Item = RngStream>, k: usize, t: &mut Tally) -> Result<(Vec<f64>, u64)> {
        let mut acc: Option<Vec<f64>> = None;
        let mut bits = 0;
        for r in rngs {
            let (v, b) = self.fused(s, &r, t)?;
            bits += b;
            match acc.as_mut() {
                None => acc = Some(v),
                Some(a) => a.iter_mut().zip(&v).for_each(|(x, y)| *x += y),
            }
        }
        let mut a = acc.expect("at least one draw");
        a.iter_mut().for_each(|x| *x /= k as f64);
        Ok((a, bits))
    }

    fn fused(&self, s: usize, rng: &RngStream, t: &mut Tally) -> Result<(Vec<f64>, u64)> {
        let plan = &self.plan;
        let (values, bits) = match &plan.stages[s] {
            Stage::Linear(l) => {
                let (x, in_bits) = if l.first {
                    (plan.inputs.clone(), 0)
                } else {
                    self.fused_mean(s - 1, (0..l.c.k1).map(|j| rng.derive(j as u64)), l.c.k1, t)?
                };
                let dist = &self.dists[l.layer];
                let mut g = rng.derive(SKETCH_STREAM).generator();
                let mut sums = vec![0i64; l.d1 * l.d2];
                for _ in 0..l.c.k2 {
                    let term = dist.sample(&mut g);
                    sums[term.index] += term.payload;
                }
                (plan.apply_linear(l, &x, &sums), in_bits + l.c.sketch_bits())
            }
            Stage::Activation(a) => {
                let gates = a.c.schedule.sample(&mut rng.derive(GATE_STREAM).generator());
                let k = a.c.factor_mean;
                let mut bits = 0;
                let mut f = Vec::with_capacity(gates.len());
                for n in 0..gates.len() {
                    let (v, b) = self.fused_mean(s - 1, (0..k).map(|j| rng.derive((n * k + j) as u64)), k, t)?;
                    f.push(v);
                    bits += 1 + b;
                }
                let center = if a.seed.is_none() {
                    let cr = rng.derive(CENTER_STREAM);
                    let (c, b) = self.fused_mean(s - 1, (0..a.center_mean).map(|j| cr.derive(j as u64)), a.center_mean, t)?;
                    bits += b;
                    Some(c)
                } else {
                    None
                };
                let n = gates.len() as f64;
                t.gates[s].0 += n;
                t.gates[s].1 += n * n;
                t.gates[s].2 += 1;
                (plan.apply_activation(a, center, &gates, &f)?, bits)
            }
        };
        t.bits[s].0 += bits as f64;
        t.bits[s].1 += 1;
        Ok((values, bits))
    }

    pub fn sample(&self, rng: &RngStream) -> DrawNode {
        self.sample_stage(self.plan.top(), rng)
    }

    fn sample_stage(&self, s: usize, rng: &RngStream) -> DrawNode {
        match &self.plan.stages[s] {
            Stage::Linear(l) => {
                let inputs = if l.first {
                    Vec::new()
                } else {
                    (0..l.c.k1).map(|j| self.sample_stage(s - 1, &rng.derive(j as u64))).collect()
                };
                let dist = &self.dists[l.layer];
                let mut g = rng.derive(SKETCH_STREAM).generator();
                let terms = (0..l.c.k2)
                    .map(|_| {
                        let t = dist.sample(&mut g);
                        (t.index as u32, t.payload)
                    })
                    .collect();
                DrawNode::Linear { inputs, terms }
            }
            Stage::Activation(a) => {
                let gates = a.c.schedule.sample(&mut rng.derive(GATE_STREAM).generator());
                let k = a.c.factor_mean;
                let factors = (0..gates.len())
                    .map(|n| (0..k).map(|j| self.sample_stage(s - 1, &rng.derive((n * k + j) as u64))).collect())
                    .collect();
                let center = if a.seed.is_none() {
                    let cr = rng.derive(CENTER_STREAM);
                    (0..a.center_mean).map(|j| self.sample_stage(s - 1, &cr.derive(j as u64))).collect()
                } else {
                    Vec::new()
                };
                DrawNode::Activation { center, gates, factors }
            }
        }
    }
}

/// A draw kept with its code and values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersistedDraw {
    pub index: u64,
    pub code: BracketedString,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GateStats {
    pub stage: String,
    pub instances: u64,
    pub mean_factors: f64,
    pub standard_error: f64,
    /// `E[N]` under the gate schedule.
    pub expected: f64,
    /// `(log₃ d + 4)/2`.
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: String,
    pub constants: StageConstants,
    pub instances: u64,
    pub mean_code_bits: f64,
    pub expected_nodes: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CompressionReport {
    pub draws: u64,
    pub points: usize,
    pub output_dim: usize,
    pub config: CompressorConfig,
    pub seed_bits: u64,
    pub quantization_seed_bits: u64,
    pub bits: BitReport,
    pub code_bits_standard_error: f64,
    /// Measured seed bits and mean code bits.
    pub measured: AdlBudget,
    pub theoretical: AdlBudget,
    /// Mean code bits over the theoretical `n`.
    pub code_ratio: f64,
    pub sigma_claim: f64,
    pub stages: Vec<StageReport>,
    pub gates: Vec<GateStats>,
    pub variance: Option<VarianceReport>,
    pub seed: BracketedString,
    pub persisted: Vec<PersistedDraw>,
}

impl CompressionReport {
    /// Every activation layer's mean Taylor depth is within `k` SE of the bound.
    pub fn depth_within(&self, k: f64) -> bool {
        self.gates.iter().all(|g| g.mean_factors <= g.bound + k * g.standard_error)
    }
}

/// Output of [`compress_network`].
#[derive(Clone, Debug)]
pub struct NetworkCompression {
    /// One `m × d_t` table per draw, point-major.
    pub tables: Vec<Vec<f64>>,
    pub report: CompressionReport,
}

struct Partial {
    moments: ErrorMoments,
    tally: Tally,
    code_bits: Vec<u64>,
    tables: Vec<Vec<f64>>,
    persisted: Vec<PersistedDraw>,
}

/// Options for [`run_compression`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub draws: u64,
    /// The first `persist` draws keep their codes.
    pub persist: u64,
    pub keep_tables: bool,
    pub directions: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { draws: 10_000, persist: 2, keep_tables: false, directions: DEFAULT_DIRECTIONS }
    }
}

/// Draws `opts.draws` compressed networks on streams `0..draws` of `rng`,
/// streaming error moments, bit counts and Taylor depths. Chunks of draws
/// are merged in order, so the result does not depend on the thread count.
pub fn run_compression(
    compressor: &NetworkCompressor,
    opts: &RunOptions,
    rng: &RngStream,
) -> Result<(CompressionReport, Vec<Vec<f64>>)> {
    let plan = &compressor.plan;
    let (m, d) = (plan.m, plan.output_dim());
    let n_stages = plan.stages.len();
    let dirs = probe_directions(d, opts.directions.max(1), &rng.derive(DIRECTION_STREAM));
    let chunks: Vec<u64> = (0..opts.draws.div_ceil(CHUNK)).collect();
    let partials: Vec<Result<Partial>> = chunks
        .par_iter()
        .map(|&c| {
            let mut p = Partial {
                moments: ErrorMoments::new(m, d, dirs.len()),
                tally: Tally::new(n_stages),
                code_bits: Vec::new(),
                tables: Vec::new(),
                persisted: Vec::new(),
            };
            for t in c * CHUNK..((c + 1) * CHUNK).min(opts.draws) {
                let r = rng.derive(t);
                let (values, bits) = if t < opts.persist {
                    let node = compressor.sample(&r);
                    let values = plan.evaluate(&node)?;
                    p.persisted.push(PersistedDraw { index: t, code: plan.encode(&node), values: values.clone() });
                    (values, plan.tally(plan.top(), &node, &mut p.tally))
                } else {
                    compressor.fused(plan.top(), &r, &mut p.tally)?
                };
                p.moments
                    .push(&values, &compressor.truth, &dirs)
                    .map_err(|reason| Error::ContractViolation { trial: t, reason })?;
                p.code_bits.push(bits);
                if opts.keep_tables {
                    p.tables.push(values);
                }
            }
            Ok(p)
        })
        .collect();
    let mut moments = ErrorMoments::new(m, d, dirs.len());
    let mut tally = Tally::new(n_stages);
    let mut code_bits = Vec::with_capacity(opts.draws as usize);
    let mut tables = Vec::new();
    let mut persisted = Vec::new();
    for p in partials {
        let p = p?;
        moments.merge(&p.moments);
        tally.merge(&p.tally);
        code_bits.extend(p.code_bits);
        tables.extend(p.tables);
        persisted.extend(p.persisted);
    }
    let variance = if opts.draws >= 2 {
        Some(moments.report(&compressor.truth, &dirs, plan.sigma_claim())?)
    } else {
        None
    };
    Ok((summarize(plan, opts.draws, &tally, &code_bits, variance, persisted), tables))
}

fn summarize(
    plan: &CompressionPlan,
    draws: u64,
    tally: &Tally,
    code_bits: &[u64],
    variance: Option<VarianceReport>,
    persisted: Vec<PersistedDraw>,
) -> CompressionReport {
    let seed_bits = plan.seed.len() as u64;
    let bits = BitReport::from_lengths(seed_bits, code_bits);
    let n = code_bits.len() as f64;
    let code_se = if code_bits.len() >= 2 {
        let mean = bits.expected_random_bits;
        let var = code_bits.iter().map(|&b| (b as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    let theoretical = adl_theoretical_class(&plan.class, plan.m);
    let constants = plan.stage_constants();
    let mut stages = Vec::new();
    let mut gates = Vec::new();
    let mut layers = Vec::new();
    let mut seed_so_far = 0u64;
    for (s, st) in plan.stages.iter().enumerate() {
        let (sum, count) = tally.bits[s];
        let mean = if count > 0 { sum / count as f64 } else { 0.0 };
        seed_so_far += match st {
            Stage::Linear(_) => 64,
            Stage::Activation(a) if a.seed.is_some() => {
                64 + (plan.m * a.d) as u64 * bounded_width(0, 2 * a.half_width) as u64
            }
            Stage::Activation(_) => 0,
        };
        layers.push(LayerBudget { stage: st.name(), n_s: seed_so_far as f64, n: mean });
        stages.push(StageReport {
            stage: st.name(),
            constants: constants[s].clone(),
            instances: count,
            mean_code_bits: mean,
            expected_nodes: plan.expected_nodes[s],
        });
        if let Stage::Activation(a) = st {
            let (sn, sn2, c) = tally.gates[s];
            let (mean_n, se) = if c >= 2 {
                let mu = sn / c as f64;
                let var = ((sn2 - c as f64 * mu * mu) / (c as f64 - 1.0)).max(0.0);
                (mu, (var / c as f64).sqrt())
            } else if c == 1 {
                (sn, 0.0)
            } else {
                (0.0, 0.0)
            };
            gates.push(GateStats {
                stage: st.name(),
                instances: c,
                mean_factors: mean_n,
                standard_error: se,
                expected: a.c.schedule.expected_max(),
                bound: expected_depth_bound(a.d),
            });
        }
    }
    let measured =
        AdlBudget { n_s: seed_bits as f64, n: bits.expected_random_bits, layers, convention: CONVENTION.to_string() };
    CompressionReport {
        draws,
        points: plan.m,
        output_dim: plan.output_dim(),
        config: plan.config,
        seed_bits,
        quantization_seed_bits: plan.quantization_seed_bits(),
        code_ratio: if theoretical.n > 0.0 { measured.n / theoretical.n } else { f64::NAN },
        bits,
        code_bits_standard_error: code_se,
        measured,
        theoretical,
        sigma_claim: plan.sigma_claim(),
        stages,
        gates,
        variance,
        seed: plan.seed.clone(),
        persisted,
    }
}

/// Draws `draws` end-to-end estimators of the network on the sample and
/// returns their value tables with the bit budget.
pub fn compress_network(
    net: &NetworkSpec,
    samples: &SampleSet,
    draws: u64,
    rng: &RngStream,
    config: &CompressorConfig,
) -> Result<NetworkCompression> {
    let c = NetworkCompressor::new(net, samples, config)?;
    let opts = RunOptions { draws, persist: draws.min(1), keep_tables: true, ..RunOptions::default() };
    let (report, tables) = run_compression(&c, &opts, rng)?;
    Ok(NetworkCompression { tables, report })
}

/// Decodes persisted draws against `plan`, typically rebuilt with
/// [`CompressionPlan::from_seed`], and returns the indices whose values
/// differ in any bit.
pub fn check_persisted(plan: &CompressionPlan, persisted: &[PersistedDraw]) -> Result<Vec<u64>> {
    let mut bad = Vec::new();
    for p in persisted {
        let v = plan.decode_values(&p.code)?;
        if v.len() != p.values.len() || v.iter().zip(&p.values).any(|(a, b)| a.to_bits() != b.to_bits()) {
            bad.push(p.index);
        }
    }
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::random_unit;

    fn net(dims: &[usize], r: f64, big_r: f64, zero_diff: bool, seed: u64) -> NetworkSpec {
        let class = NetworkClass::new(dims.to_vec(), Activation::Softplus, None, r, big_r).unwrap();
        let rng = RngStream::new(seed);
        let layers = if zero_diff {
            class.refs.clone()
        } else {
            super::super::bounds::random_member(&class, &rng).unwrap().layers
        };
        NetworkSpec::new(class, layers).unwrap()
    }

    fn samples(d: usize, m: usize, seed: u64) -> SampleSet {
        let mut g = RngStream::new(seed).generator();
        let pts = (0..m).map(|_| random_unit(d, &mut g).iter().map(|v| v * (d as f64).sqrt() * 0.8).collect()).collect();
        SampleSet::in_default_ball(pts).unwrap()
    }

    #[test]
    fn decode_reproduces_values_bitwise() {
        let n = net(&[4, 3, 2], 1.0, 1.0, false, 1);
        let a = samples(4, 5, 2);
        let cfg = CompressorConfig::default();
        let c = NetworkCompressor::new(&n, &a, &cfg).unwrap();
        let plan = CompressionPlan::from_seed(&n.class, &a, &cfg, c.plan().seed()).unwrap();
        for t in 0..5 {
            let node = c.sample(&RngStream::new(9).derive(t));
            let code = c.plan().encode(&node);
            assert_eq!(code.len() as u64, c.plan().code_bits(&node));
            let back = plan.decode(&code).unwrap();
            assert_eq!(back, node);
            let v1 = c.plan().evaluate(&node).unwrap();
            let v2 = plan.evaluate(&back).unwrap();
            assert!(v1.iter().zip(&v2).all(|(x, y)| x.to_bits() == y.to_bits()));
            let (fused, bits) = c.sample_values(&RngStream::new(9).derive(t)).unwrap();
            assert!(fused.iter().zip(&v1).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert_eq!(bits, code.len() as u64);
            let text = code.serialize();
            assert_eq!(BracketedString::deserialize(&text).unwrap(), code);
        }
    }

    #[test]
    fn seed_bits_match_quantization_count() {
        let n = net(&[4, 6, 6, 2], 1.0, 1.0, false, 3);
        let a = samples(4, 7, 4);
        let c = NetworkCompressor::new(&n, &a, &CompressorConfig::default()).unwrap();
        assert_eq!(c.plan().seed().len() as u64, c.plan().quantization_seed_bits());
    }

    #[test]
    fn zero_difference_single_layer_is_exact() {
        let class = NetworkClass::new(vec![3, 2], Activation::Softplus, None, 1.0, 1.0).unwrap();
        let w0 = Matrix::from_rows(&[vec![0.5, 0.0, -0.25], vec![0.0, 0.1, 0.2]]).unwrap();
        let class = NetworkClass { refs: vec![w0.clone()], ..class };
        let n = NetworkSpec::new(class, vec![w0]).unwrap();
        let a = samples(3, 4, 5);
        let out = compress_network(&n, &a, 3, &RngStream::new(1), &CompressorConfig::default()).unwrap();
        for table in &out.tables {
            for (p, x) in a.points.iter().enumerate() {
                let f = n.forward(x).unwrap();
                for i in 0..2 {
                    assert!((table[p * 2 + i] - f[i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn malformed_codes_are_rejected() {
        let n = net(&[3, 3, 2], 1.0, 1.0, false, 6);
        let a = samples(3, 3, 7);
        let cfg = CompressorConfig::default();
        let c = NetworkCompressor::new(&n, &a, &cfg).unwrap();
        let code = c.plan().encode(&c.sample(&RngStream::new(1)));
        let mut parts = code.children();
        parts.pop();
        let truncated = crate::codec::concat(&parts).unwrap();
        assert!(c.plan().decode(&truncated).is_err());
        assert!(c.plan().decode(&BracketedString::leaf(true)).is_err());
        assert!(CompressionPlan::from_seed(&n.class, &a, &cfg, &BracketedString::leaf(false)).is_err());
    }

    #[test]
    fn node_cap_is_enforced() {
        let n = net(&[4, 4, 4, 4], 1.0, 1.0, false, 8);
        let a = samples(4, 3, 9);
        let cfg = CompressorConfig { node_cap: 10.0, ..CompressorConfig::default() };
        assert!(matches!(NetworkCompressor::new(&n, &a, &cfg), Err(Error::Resource(_))));
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let n = net(&[3, 4, 2], 1.0, 1.0, false, 10);
        let a = samples(3, 4, 11);
        let c = NetworkCompressor::new(&n, &a, &CompressorConfig::default()).unwrap();
        let opts = RunOptions { draws: 150, persist: 1, keep_tables: true, directions: 8 };
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| run_compression(&c, &opts, &RngStream::new(12)).unwrap())
        };
        let (r1, t1) = run(1);
        let (r3, t3) = run(3);
        assert_eq!(t1, t3);
        assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r3).unwrap());
    }

    #[test]
    fn small_network_is_unbiased() {
        let n = net(&[3, 4, 2], 1.0, 1.0, false, 13);
        let a = samples(3, 4, 14);
        let c = NetworkCompressor::new(&n, &a, &CompressorConfig::default()).unwrap();
        let opts = RunOptions { draws: 2000, persist: 0, keep_tables: false, directions: 8 };
        let (rep, _) = run_compression(&c, &opts, &RngStream::new(15)).unwrap();
        let v = rep.variance.unwrap();
        assert!(v.mean_within(4.5), "{}", v.mean_error_z);
        assert!(v.variance_within(1.0, 4.0), "{}", v.worst_directional_var);
    }

    #[test]
    fn seedless_mode_round_trips() {
        let n = net(&[3, 3, 2], 1.0, 1.0, false, 16);
        let a = samples(3, 2, 17);
        let few = CompressorConfig { seed_mode: SeedMode::Seedless { center_mean: 2 }, ..CompressorConfig::default() };
        assert!(matches!(NetworkCompressor::new(&n, &a, &few), Err(Error::Contract(_))));
        let cfg = CompressorConfig { seed_mode: SeedMode::Seedless { center_mean: 400 }, ..CompressorConfig::default() };
        let c = NetworkCompressor::new(&n, &a, &cfg).unwrap();
        assert_eq!(c.plan().seed().len(), 128);
        let plan = CompressionPlan::from_seed(&n.class, &a, &cfg, c.plan().seed()).unwrap();
        let node = c.sample(&RngStream::new(18));
        let code = c.plan().encode(&node);
        assert_eq!(plan.decode(&code).unwrap(), node);
        let v = plan.evaluate(&node).unwrap();
        let (fused, _) = c.sample_values(&RngStream::new(18)).unwrap();
        assert!(fused.iter().zip(&v).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
