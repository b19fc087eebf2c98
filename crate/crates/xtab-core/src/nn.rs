//! Minimal dense-network substrate: specs, initialization, forward/backward,
//! weight clipping and weight histograms.
//!
//! Networks here are plain stacks of affine layers with an element-wise
//! activation and optional (inverted) dropout. The backward pass is written
//! out analytically; there is no general autodiff.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Negative slope used by every leaky ReLU in the crate.
pub const LEAKY_RELU_SLOPE: f64 = 0.01;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    LeakyRelu,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::LeakyRelu => {
                if z >= 0.0 {
                    z
                } else {
                    LEAKY_RELU_SLOPE * z
                }
            }
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through pre-activation `z` and activation `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::LeakyRelu => {
                if z >= 0.0 {
                    1.0
                } else {
                    LEAKY_RELU_SLOPE
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    /// Dropout probability applied to this layer's output in `Train` mode.
    pub dropout_p: f64,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation, dropout_p: f64) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::invalid("layer dimensions must be >= 1"));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::invalid("dropout probability must lie in [0, 1)"));
        }
        Ok(Self { in_dim, out_dim, activation, dropout_p })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("a network needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::invalid(format!(
                    "layer dimensions do not chain: {} -> {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }
}

/// Weights and bias of one layer. Weight shape is `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Ordered parameters of one network; the unit of averaging and interpolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub layers: Vec<LayerParams>,
}

/// Per-parameter partial derivatives, shaped exactly like a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerParams>,
}

impl ParamSet {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layers = spec
            .layers()
            .iter()
            .map(|l| LayerParams {
                weight: Array2::zeros((l.out_dim, l.in_dim)),
                bias: Array1::zeros(l.out_dim),
            })
            .collect();
        Self { layers }
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.dim() == b.weight.dim() && a.bias.len() == b.bias.len()
            })
    }

    pub fn matches_spec(&self, spec: &NetworkSpec) -> bool {
        self.layers.len() == spec.layers().len()
            && self.layers.iter().zip(spec.layers()).all(|(p, s)| {
                p.weight.dim() == (s.out_dim, s.in_dim) && p.bias.len() == s.out_dim
            })
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All parameter values in a fixed order (per layer: weights row-major,
    /// then bias).
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }
}

impl GradientSet {
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }
}

/// Draw a fresh parameter set. Each layer's weights and biases are uniform on
/// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`; draw order is layer by layer, weights
/// row-major, then bias, so a seed fixes the result bit for bit.
pub fn init_params(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> ParamSet {
    let layers = spec
        .layers()
        .iter()
        .map(|l| {
            let bound = 1.0 / (l.in_dim as f64).sqrt();
            let mut weight = Array2::zeros((l.out_dim, l.in_dim));
            for w in weight.iter_mut() {
                *w = rng.random_range(-bound..=bound);
            }
            let mut bias = Array1::zeros(l.out_dim);
            for b in bias.iter_mut() {
                *b = rng.random_range(-bound..=bound);
            }
            LayerParams { weight, bias }
        })
        .collect();
    ParamSet { layers }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct LayerTape {
    /// Input the layer saw (output of the previous layer after its dropout).
    input: Array2<f64>,
    /// d(output)/d(pre-activation): activation derivative times the dropout
    /// keep/scale factor recorded for this pass.
    factor: Array2<f64>,
}

/// Record of one forward pass, sufficient to run [`backward`].
pub struct Tape<'a> {
    params: &'a ParamSet,
    layers: Vec<LayerTape>,
    n: usize,
    out_dim: usize,
}

/// Run the network on a batch (rows are samples). In `Train` mode dropout
/// zeroes activations with probability `dropout_p` and scales survivors by
/// `1/(1-p)`; in `Eval` mode it is the identity and `rng` is untouched.
pub fn forward<'a>(
    params: &'a ParamSet,
    spec: &NetworkSpec,
    x: ArrayView2<f64>,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Array2<f64>, Tape<'a>)> {
    if !params.matches_spec(spec) {
        return Err(Error::shape("parameters do not match network spec"));
    }
    if x.ncols() != spec.in_dim() {
        return Err(Error::shape(format!(
            "input has {} columns, first layer expects {}",
            x.ncols(),
            spec.in_dim()
        )));
    }
    let n = x.nrows();
    let mut tape_layers = Vec::with_capacity(spec.layers().len());
    let mut cur = x.to_owned();
    for (layer, p) in spec.layers().iter().zip(&params.layers) {
        // z = x W^T + b
        let mut z = crate::linalg::matmul_nt(cur.view(), p.weight.view());
        for mut row in z.rows_mut() {
            row += &p.bias;
        }
        let mut out = Array2::zeros(z.dim());
        let mut factor = Array2::zeros(z.dim());
        for ((o, f), &zv) in out.iter_mut().zip(factor.iter_mut()).zip(z.iter()) {
            let a = layer.activation.apply(zv);
            *f = layer.activation.derivative(zv, a);
            *o = a;
        }
        if mode == Mode::Train && layer.dropout_p > 0.0 {
            let scale = 1.0 / (1.0 - layer.dropout_p);
            for (o, f) in out.iter_mut().zip(factor.iter_mut()) {
                if rng.random::<f64>() < layer.dropout_p {
                    *o = 0.0;
                    *f = 0.0;
                } else {
                    *o *= scale;
                    *f *= scale;
                }
            }
        }
        tape_layers.push(LayerTape { input: cur, factor });
        cur = out;
    }
    let tape = Tape { params, layers: tape_layers, n, out_dim: spec.out_dim() };
    Ok((cur, tape))
}

/// Gradients of `sum(output * upstream_grad)` w.r.t. parameters and input.
pub fn backward(tape: &Tape<'_>, upstream_grad: ArrayView2<f64>) -> Result<(GradientSet, Array2<f64>)> {
    if upstream_grad.dim() != (tape.n, tape.out_dim) {
        return Err(Error::shape(format!(
            "upstream gradient is {:?}, tape expects ({}, {})",
            upstream_grad.dim(),
            tape.n,
            tape.out_dim
        )));
    }
    let mut grads: Vec<LayerParams> = Vec::with_capacity(tape.layers.len());
    let mut up = upstream_grad.to_owned();
    for (lt, p) in tape.layers.iter().zip(&tape.params.layers).rev() {
        // dz = upstream (.) factor
        let mut dz = up;
        dz.zip_mut_with(&lt.factor, |u, &f| *u *= f);
        let dw = crate::linalg::matmul_tn(dz.view(), lt.input.view());
        let db = dz.sum_axis(ndarray::Axis(0));
        up = crate::linalg::matmul(dz.view(), p.weight.view());
        grads.push(LayerParams { weight: dw, bias: db });
    }
    grads.reverse();
    Ok((GradientSet { layers: grads }, up))
}

/// Clamp every parameter into `[lo, hi]`.
pub fn clip_weights(params: &ParamSet, lo: f64, hi: f64) -> Result<ParamSet> {
    if lo >= hi {
        return Err(Error::invalid(format!("clip bounds must satisfy lo < hi, got [{lo}, {hi}]")));
    }
    let mut out = params.clone();
    for v in out.values_mut() {
        *v = v.clamp(lo, hi);
    }
    Ok(out)
}

/// Histogram of all parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` edges spanning `[min, max]` of the entries.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// CSV rows `bin_lo,bin_hi,count`.
    pub fn to_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "bin_lo,bin_hi,count")?;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(w, "{},{},{}", self.edges[i], self.edges[i + 1], c)?;
        }
        Ok(())
    }
}

pub fn weight_histogram(params: &ParamSet, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut total = 0usize;
    for v in params.values() {
        min = min.min(v);
        max = max.max(v);
        total += 1;
    }
    if total == 0 {
        return Err(Error::invalid("cannot build a histogram of an empty parameter set"));
    }
    let span = max - min;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| min + span * (i as f64) / (bins as f64))
        .collect();
    let mut counts = vec![0u64; bins];
    for v in params.values() {
        let idx = if span == 0.0 {
            0
        } else {
            (((v - min) / span) * bins as f64).floor() as usize
        };
        counts[idx.min(bins - 1)] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Mean and (population) standard deviation over every entry of a parameter set.
pub fn entry_stats(params: &ParamSet) -> (f64, f64) {
    let n = params.num_params() as f64;
    let mean = params.values().sum::<f64>() / n;
    let var = params.values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
