//! Fully connected network classes, concrete networks, and sample sets.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::activations::Activation;
use crate::error::{invalid, Error, Result};
use crate::numerics::{check_finite, frobenius_norm, norm, spectral_norm, Matrix};

/// Relative slack when checking declared norm caps.
const NORM_SLACK: f64 = 1e-9;

/// The class `W_t∘ρ∘…∘ρ∘W₁` with `‖Wᵢ − Wᵢ⁰‖ ≤ r`, `‖Wᵢ − Wᵢ⁰‖_F ≤ R`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkClass {
    pub dims: Vec<usize>,
    pub activation: Activation,
    pub refs: Vec<Matrix>,
    pub r: f64,
    pub big_r: f64,
}

impl NetworkClass {
    pub fn new(dims: Vec<usize>, activation: Activation, refs: Option<Vec<Matrix>>, r: f64, big_r: f64) -> Result<Self> {
        if dims.len() < 2 {
            return invalid("a network needs at least one layer (two dims)");
        }
        if dims.contains(&0) {
            return invalid("layer dimensions must be positive");
        }
        if !(r.is_finite() && r >= 0.0 && big_r.is_finite() && big_r >= 0.0) {
            return invalid(format!("norm caps must be finite and nonnegative (r={r}, R={big_r})"));
        }
        let t = dims.len() - 1;
        let refs = match refs {
            Some(refs) => {
                if refs.len() != t {
                    return invalid(format!("{} reference matrices for {t} layers", refs.len()));
                }
                for (i, w0) in refs.iter().enumerate() {
                    if (w0.rows(), w0.cols()) != (dims[i + 1], dims[i]) {
                        return invalid(format!(
                            "reference {i} has shape {}x{}, expected {}x{}",
                            w0.rows(),
                            w0.cols(),
                            dims[i + 1],
                            dims[i]
                        ));
                    }
                }
                refs
            }
            None => (0..t).map(|i| Matrix::zeros(dims[i + 1], dims[i])).collect(),
        };
        Ok(Self { dims, activation, refs, r, big_r })
    }

    pub fn depth(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.dims[self.depth()]
    }
}

/// A concrete member of a [`NetworkClass`].
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub class: NetworkClass,
    pub layers: Vec<Matrix>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    dims: Vec<usize>,
    activation: String,
    layers: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    refs: Option<Vec<Vec<f64>>>,
    r: f64,
    #[serde(rename = "R")]
    big_r: f64,
}

impl NetworkSpec {
    /// Checks shapes and the declared norm caps of every `Wᵢ − Wᵢ⁰`.
    pub fn new(class: NetworkClass, layers: Vec<Matrix>) -> Result<Self> {
        if layers.len() != class.depth() {
            return invalid(format!("{} layers for {} declared", layers.len(), class.depth()));
        }
        for (i, w) in layers.iter().enumerate() {
            let (rows, cols) = (class.dims[i + 1], class.dims[i]);
            if (w.rows(), w.cols()) != (rows, cols) {
                return invalid(format!("layer {i} has shape {}x{}, expected {rows}x{cols}", w.rows(), w.cols()));
            }
            let v = w.sub(&class.refs[i])?;
            let (spec, frob) = (spectral_norm(&v), frobenius_norm(&v));
            if spec > class.r * (1.0 + NORM_SLACK) + 1e-12 {
                return Err(Error::Contract(format!("layer {i}: spectral norm {spec} exceeds r = {}", class.r)));
            }
            if frob > class.big_r * (1.0 + NORM_SLACK) + 1e-12 {
                return Err(Error::Contract(format!(
                    "layer {i}: Frobenius norm {frob} exceeds R = {}",
                    class.big_r
                )));
            }
        }
        Ok(Self { class, layers })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: NetworkFile = serde_path_to_error::deserialize(de).map_err(|e| Error::Format {
            path: e.path().to_string(),
            reason: e.inner().to_string(),
        })?;
        let fmt = |path: String, reason: String| Error::Format { path, reason };
        let activation = Activation::from_name(&file.activation)?;
        let dims = file.dims;
        if dims.len() < 2 {
            return Err(fmt("dims".into(), "need at least two entries".into()));
        }
        let build = |name: &str, flat: Vec<Vec<f64>>| -> Result<Vec<Matrix>> {
            if flat.len() != dims.len() - 1 {
                return Err(fmt(name.into(), format!("expected {} matrices, got {}", dims.len() - 1, flat.len())));
            }
            flat.into_iter()
                .enumerate()
                .map(|(i, data)| {
                    Matrix::new(dims[i + 1], dims[i], data).map_err(|e| fmt(format!("{name}[{i}]"), e.to_string()))
                })
                .collect()
        };
        let layers = build("layers", file.layers)?;
        let refs = file.refs.map(|r| build("refs", r)).transpose()?;
        let class = NetworkClass::new(dims, activation, refs, file.r, file.big_r)?;
        Self::new(class, layers)
    }

    pub fn from_json_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let file = NetworkFile {
            dims: self.class.dims.clone(),
            activation: self.class.activation.name().to_string(),
            layers: self.layers.iter().map(|w| w.data().to_vec()).collect(),
            refs: if self.class.refs.iter().all(|w| w.data().iter().all(|&v| v == 0.0)) {
                None
            } else {
                Some(self.class.refs.iter().map(|w| w.data().to_vec()).collect())
            },
            r: self.class.r,
            big_r: self.class.big_r,
        };
        serde_json::to_string_pretty(&file).expect("network serializes")
    }

    /// Pre-activations `W₁x, W₂ρ(W₁x), …` with the final output last.
    pub fn pre_activations(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.class.input_dim() {
            return invalid(format!("input has {} entries, network expects {}", x.len(), self.class.input_dim()));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (i, w) in self.layers.iter().enumerate() {
            let z = w.matvec(&h)?;
            if i + 1 < self.layers.len() {
                h = z.iter().map(|&v| self.class.activation.eval(v)).collect();
            }
            out.push(z);
        }
        Ok(out)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.pre_activations(x)?.pop().expect("at least one layer"))
    }
}

/// Points of the sample set `A` on which functions are compressed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub points: Vec<Vec<f64>>,
    pub input_radius: f64,
}

impl SampleSet {
    pub fn new(points: Vec<Vec<f64>>, input_radius: f64) -> Result<Self> {
        let Some(first) = points.first() else {
            return invalid("sample set is empty");
        };
        let d = first.len();
        if d == 0 {
            return invalid("sample points have no coordinates");
        }
        for (i, p) in points.iter().enumerate() {
            if p.len() != d {
                return invalid(format!("point {i} has {} coordinates, expected {d}", p.len()));
            }
            check_finite(p, &format!("point {i}"))?;
            let n = norm(p);
            if n > input_radius * (1.0 + 1e-12) {
                return invalid(format!("point {i} has norm {n} above radius {input_radius}"));
            }
        }
        Ok(Self { points, input_radius })
    }

    /// Points in the ball of radius `√d`, the default input domain.
    pub fn in_default_ball(points: Vec<Vec<f64>>) -> Result<Self> {
        let d = points.first().map_or(0, Vec::len);
        Self::new(points, (d as f64).sqrt())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// CSV with header `x0,x1,…`, one point per row, in the `√d` ball.
    pub fn from_csv_reader(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(|e| Error::Format { path: "header".into(), reason: e.to_string() })?;
        for (i, name) in header.iter().enumerate() {
            if name != format!("x{i}") {
                return Err(Error::Format { path: format!("header[{i}]"), reason: format!("expected x{i}, got {name:?}") });
            }
        }
        let d = header.len();
        let mut points = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Format { path: format!("row {}", row + 1), reason: e.to_string() })?;
            if rec.len() != d {
                return Err(Error::Format {
                    path: format!("row {}", row + 1),
                    reason: format!("{} fields, expected {d}", rec.len()),
                });
            }
            let p = rec
                .iter()
                .enumerate()
                .map(|(c, f)| {
                    f.parse::<f64>().map_err(|e| Error::Format { path: format!("row {}, x{c}", row + 1), reason: e.to_string() })
                })
                .collect::<Result<Vec<f64>>>()?;
            points.push(p);
        }
        Self::in_default_ball(points)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = (0..d).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",");
        out.push('\n');
        for p in &self.points {
            out.push_str(&p.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }
}
