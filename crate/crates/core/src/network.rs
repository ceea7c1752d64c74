//! Fixed-architecture MLP with a sinusoidal input embedding.
//!
//! Everything here is differentiated by hand: spatial derivatives (up to the
//! Hessian) by forward mode through the embedding, the layers and the optional
//! boundary envelope, and parameter derivatives by tangent propagation (JVP)
//! and reverse accumulation (VJP) over a cached forward pass.
//!
//! Parameter layout is `(W_1, b_1, ..., W_last, b_last)` with every `W` stored
//! row-major as `fan_out x fan_in`. A row-major `out x in` block read as a
//! column-major `in x out` matrix is `W^T`, which is what the batched products
//! below use directly.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use std::ops::Range;

use crate::error::{Error, Result};

/// Rows per work unit for batched evaluation. Reductions over chunks are always
/// summed in chunk order, so results do not depend on the thread count.
pub const CHUNK_ROWS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Swish,
    Tanh,
    Relu,
}

impl Activation {
    /// `(σ(z), σ'(z), σ''(z))`
    #[inline]
    pub fn eval3(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Swish => {
                let s = sigmoid(z);
                let ds = s * (1.0 - s);
                (z * s, s + z * ds, ds * (2.0 + z * (1.0 - 2.0 * s)))
            }
            Activation::Tanh => {
                let t = z.tanh();
                let d = 1.0 - t * t;
                (t, d, -2.0 * t * d)
            }
            Activation::Relu => {
                if z > 0.0 {
                    (z, 1.0, 0.0)
                } else {
                    (0.0, 0.0, 0.0)
                }
            }
        }
    }

    #[inline]
    fn eval2(self, z: f64) -> (f64, f64) {
        match self {
            Activation::Swish => {
                let s = sigmoid(z);
                (z * s, s + z * s * (1.0 - s))
            }
            Activation::Tanh => {
                let t = z.tanh();
                (t, 1.0 - t * t)
            }
            Activation::Relu => {
                if z > 0.0 {
                    (z, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Multiplicative output factor used to impose boundary values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Envelope {
    None,
    /// `Π_i (1 - x_i²)`, zero on the boundary of `[-1, 1]^D`.
    DirichletCube,
}

fn default_hidden() -> Vec<usize> {
    vec![100, 100, 100]
}
fn default_levels() -> usize {
    5
}
fn default_alpha() -> f64 {
    1.0
}
fn default_scale() -> f64 {
    1.5
}
fn default_activation() -> Activation {
    Activation::Swish
}
fn default_envelope() -> Envelope {
    Envelope::None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_widths: Vec<usize>,
    /// Highest frequency power `L` of the embedding.
    #[serde(default = "default_levels")]
    pub embed_levels: usize,
    /// Amplitude decay exponent: level `k` is scaled by `2^{-alpha k}`.
    #[serde(default = "default_alpha")]
    pub embed_alpha: f64,
    #[serde(default = "default_scale")]
    pub embed_scale: f64,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_envelope")]
    pub envelope: Envelope,
}

/// Offsets of one linear layer inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerLayout {
    pub fn weights(&self) -> Range<usize> {
        self.weight_offset..self.weight_offset + self.fan_in * self.fan_out
    }

    pub fn biases(&self) -> Range<usize> {
        self.bias_offset..self.bias_offset + self.fan_out
    }

    /// Weights and biases together (they are adjacent).
    pub fn all(&self) -> Range<usize> {
        self.weight_offset..self.bias_offset + self.fan_out
    }
}

impl NetworkSpec {
    pub fn new(input_dim: usize, output_dim: usize, hidden_widths: Vec<usize>) -> Self {
        NetworkSpec {
            input_dim,
            output_dim,
            hidden_widths,
            embed_levels: default_levels(),
            embed_alpha: default_alpha(),
            embed_scale: default_scale(),
            activation: default_activation(),
            envelope: default_envelope(),
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_envelope(mut self, envelope: Envelope) -> Self {
        self.envelope = envelope;
        self
    }

    pub fn with_embedding(mut self, levels: usize, alpha: f64, scale: f64) -> Self {
        self.embed_levels = levels;
        self.embed_alpha = alpha;
        self.embed_scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidSpec("input and output dimensions must be positive".into()));
        }
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidSpec("hidden widths must be positive".into()));
        }
        if !(self.embed_alpha.is_finite() && self.embed_scale.is_finite()) {
            return Err(Error::InvalidSpec("embedding constants must be finite".into()));
        }
        Ok(())
    }

    /// Width of the embedded input, `2 (L + 1) D`.
    pub fn embed_dim(&self) -> usize {
        2 * (self.embed_levels + 1) * self.input_dim
    }

    pub fn layers(&self) -> Vec<LayerLayout> {
        let mut sizes = Vec::with_capacity(self.hidden_widths.len() + 2);
        sizes.push(self.embed_dim());
        sizes.extend_from_slice(&self.hidden_widths);
        sizes.push(self.output_dim);
        let mut offset = 0;
        sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let layer = LayerLayout {
                    fan_in,
                    fan_out,
                    weight_offset: offset,
                    bias_offset: offset + fan_in * fan_out,
                };
                offset += fan_in * fan_out + fan_out;
                layer
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.fan_in * l.fan_out + l.fan_out).sum()
    }

    /// Width of the penultimate representation (input of the last layer).
    pub fn feature_dim(&self) -> usize {
        self.hidden_widths.last().copied().unwrap_or_else(|| self.embed_dim())
    }

    pub fn last_layer(&self) -> LayerLayout {
        *self.layers().last().expect("a network has at least one layer")
    }
}

/// Flat parameter vector θ.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub data: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        ParamVector { data: vec![0.0; spec.param_count()] }
    }

    pub fn from_vec(spec: &NetworkSpec, data: Vec<f64>) -> Result<Self> {
        let theta = ParamVector { data };
        theta.check(spec)?;
        Ok(theta)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let p = spec.param_count();
        if self.data.len() != p {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: p,
                got: self.data.len(),
            });
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { stage: "parameter vector", index: i });
        }
        Ok(())
    }

    /// Contiguous `(W_last, b_last)` slice.
    pub fn last_layer(&self, spec: &NetworkSpec) -> &[f64] {
        &self.data[spec.last_layer().all()]
    }

    pub fn last_layer_mut(&mut self, spec: &NetworkSpec) -> &mut [f64] {
        let range = spec.last_layer().all();
        &mut self.data[range]
    }
}

/// Gaussian fan-in weights (variance `1 / fan_in`), zero biases.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = ParamVector::zeros(spec);
    for layer in spec.layers() {
        let std = (1.0 / layer.fan_in as f64).sqrt();
        for w in &mut theta.data[layer.weights()] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w = std * z;
        }
    }
    theta
}

#[inline]
fn level_constants(spec: &NetworkSpec, k: usize) -> (f64, f64) {
    let freq = (1u64 << k) as f64 * FRAC_PI_2;
    let amp = spec.embed_scale * (-(spec.embed_alpha) * k as f64).exp2();
    (freq, amp)
}

/// Sinusoidal embedding of one point. Per coordinate: the `L + 1` sine terms
/// followed by the `L + 1` cosine terms.
pub fn embed(x: &[f64], spec: &NetworkSpec) -> Vec<f64> {
    let levels = spec.embed_levels + 1;
    let mut out = vec![0.0; spec.embed_dim()];
    for (d, &xd) in x.iter().enumerate() {
        let block = &mut out[2 * levels * d..2 * levels * (d + 1)];
        for k in 0..levels {
            let (freq, amp) = level_constants(spec, k);
            let (s, c) = (freq * xd).sin_cos();
            block[k] = amp * s;
            block[levels + k] = amp * c;
        }
    }
    out
}

fn embed_batch(x: &DMatrix<f64>, spec: &NetworkSpec) -> DMatrix<f64> {
    let levels = spec.embed_levels + 1;
    let mut out = DMatrix::zeros(x.nrows(), spec.embed_dim());
    for d in 0..spec.input_dim {
        for k in 0..levels {
            let (freq, amp) = level_constants(spec, k);
            for i in 0..x.nrows() {
                let (s, c) = (freq * x[(i, d)]).sin_cos();
                out[(i, 2 * levels * d + k)] = amp * s;
                out[(i, 2 * levels * d + levels + k)] = amp * c;
            }
        }
    }
    out
}

/// Envelope value with its gradient and Hessian at one point.
fn envelope_jet(x: &[f64]) -> (f64, Vec<f64>, DMatrix<f64>) {
    let dim = x.len();
    let factors: Vec<f64> = x.iter().map(|v| 1.0 - v * v).collect();
    let prod_except = |skip: &[usize]| -> f64 {
        factors
            .iter()
            .enumerate()
            .filter(|(i, _)| !skip.contains(i))
            .map(|(_, f)| f)
            .product()
    };
    let value = prod_except(&[]);
    let grad: Vec<f64> = (0..dim).map(|i| -2.0 * x[i] * prod_except(&[i])).collect();
    let mut hess = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        hess[(i, i)] = -2.0 * prod_except(&[i]);
        for j in i + 1..dim {
            let v = 4.0 * x[i] * x[j] * prod_except(&[i, j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    (value, grad, hess)
}

fn envelope_value(x: &[f64]) -> f64 {
    x.iter().map(|v| 1.0 - v * v).product()
}

fn weights_t<'a>(params: &'a [f64], layer: &LayerLayout) -> DMatrixView<'a, f64> {
    DMatrixView::from_slice(&params[layer.weights()], layer.fan_in, layer.fan_out)
}

fn add_bias(z: &mut DMatrix<f64>, bias: &[f64]) {
    for (mut col, &b) in z.column_iter_mut().zip(bias) {
        col.add_scalar_mut(b);
    }
}

fn check_batch(spec: &NetworkSpec, x: &DMatrix<f64>) -> Result<()> {
    if x.ncols() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            what: "input batch columns",
            expected: spec.input_dim,
            got: x.ncols(),
        });
    }
    Ok(())
}

fn row_chunks(n: usize) -> Vec<Range<usize>> {
    (0..n).step_by(CHUNK_ROWS).map(|s| s..(s + CHUNK_ROWS).min(n)).collect()
}

/// Cached forward pass over one chunk of rows.
struct ChunkTrace {
    rows: Range<usize>,
    /// `acts[0]` is the embedding, `acts[l]` the output of hidden layer `l`.
    acts: Vec<DMatrix<f64>>,
    /// `σ'(Z_l)` for every hidden layer.
    slopes: Vec<DMatrix<f64>>,
    raw: DMatrix<f64>,
    envelope: Option<DVector<f64>>,
}

impl ChunkTrace {
    fn new(spec: &NetworkSpec, layers: &[LayerLayout], params: &[f64], x: DMatrix<f64>, rows: Range<usize>) -> Self {
        let envelope = match spec.envelope {
            Envelope::None => None,
            Envelope::DirichletCube => Some(DVector::from_iterator(
                x.nrows(),
                x.row_iter().map(|r| envelope_value(&r.iter().copied().collect::<Vec<_>>())),
            )),
        };
        let mut acts = vec![embed_batch(&x, spec)];
        let mut slopes = Vec::with_capacity(layers.len() - 1);
        let last = layers.len() - 1;
        let mut raw = DMatrix::zeros(0, 0);
        for (l, layer) in layers.iter().enumerate() {
            let mut z = acts[l].clone() * weights_t(params, layer);
            add_bias(&mut z, &params[layer.biases()]);
            if l == last {
                raw = z;
            } else {
                let mut slope = z.clone();
                for (zv, sv) in z.iter_mut().zip(slope.iter_mut()) {
                    let (a, d) = spec.activation.eval2(*zv);
                    *zv = a;
                    *sv = d;
                }
                acts.push(z);
                slopes.push(slope);
            }
        }
        ChunkTrace { rows, acts, slopes, raw, envelope }
    }

    fn outputs(&self) -> DMatrix<f64> {
        let mut out = self.raw.clone();
        if let Some(env) = &self.envelope {
            scale_rows(&mut out, env);
        }
        out
    }

    /// Tangent of the outputs along parameter direction `v`.
    fn jvp(&self, layers: &[LayerLayout], params: &[f64], v: &[f64]) -> DMatrix<f64> {
        let last = layers.len() - 1;
        let mut dh: Option<DMatrix<f64>> = None;
        for (l, layer) in layers.iter().enumerate() {
            let mut dz = &self.acts[l] * weights_t(v, layer);
            if let Some(dh) = &dh {
                dz.gemm(1.0, dh, &weights_t(params, layer), 1.0);
            }
            add_bias(&mut dz, &v[layer.biases()]);
            if l == last {
                if let Some(env) = &self.envelope {
                    scale_rows(&mut dz, env);
                }
                return dz;
            }
            dz.component_mul_assign(&self.slopes[l]);
            dh = Some(dz);
        }
        unreachable!("layer list is never empty")
    }

    /// `J^T u` for this chunk, written into `grad` (length p, overwritten).
    fn vjp_into(&self, layers: &[LayerLayout], params: &[f64], u: DMatrix<f64>, grad: &mut [f64]) {
        let mut dz = u;
        if let Some(env) = &self.envelope {
            scale_rows(&mut dz, env);
        }
        for (l, layer) in layers.iter().enumerate().rev() {
            let h_t = self.acts[l].transpose();
            let mut gw = DMatrixViewMut::from_slice(&mut grad[layer.weights()], layer.fan_in, layer.fan_out);
            gw.gemm(1.0, &h_t, &dz, 0.0);
            for (g, col) in grad[layer.biases()].iter_mut().zip(dz.column_iter()) {
                *g = col.sum();
            }
            if l > 0 {
                let w = weights_t(params, layer).transpose();
                let mut dh = &dz * w;
                dh.component_mul_assign(&self.slopes[l - 1]);
                dz = dh;
            }
        }
    }
}

fn scale_rows(m: &mut DMatrix<f64>, s: &DVector<f64>) {
    for mut col in m.column_iter_mut() {
        col.component_mul_assign(s);
    }
}

/// Forward pass of a batch cached for repeated JVP/VJP products with fixed θ.
///
/// This is the linearization `J` of the network outputs with respect to θ at
/// the batch points; `J` itself is never materialized.
pub struct Linearization<'a> {
    spec: &'a NetworkSpec,
    params: &'a [f64],
    layers: Vec<LayerLayout>,
    chunks: Vec<ChunkTrace>,
    n: usize,
}

impl<'a> Linearization<'a> {
    pub fn new(spec: &'a NetworkSpec, theta: &'a ParamVector, x: &DMatrix<f64>) -> Result<Self> {
        theta.check(spec)?;
        check_batch(spec, x)?;
        let layers = spec.layers();
        let params = theta.as_slice();
        let chunks = row_chunks(x.nrows())
            .into_par_iter()
            .map(|rows| {
                let xs = x.rows(rows.start, rows.len()).into_owned();
                ChunkTrace::new(spec, &layers, params, xs, rows)
            })
            .collect();
        Ok(Linearization { spec, params, layers, chunks, n: x.nrows() })
    }

    pub fn spec(&self) -> &NetworkSpec {
        self.spec
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Network outputs, `n x k`.
    pub fn outputs(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.spec.output_dim);
        for c in &self.chunks {
            out.rows_mut(c.rows.start, c.rows.len()).copy_from(&c.outputs());
        }
        out
    }

    /// Penultimate features `φ_θ(X)` (before the last layer), `n x q`.
    pub fn features(&self) -> DMatrix<f64> {
        let q = self.spec.feature_dim();
        let mut out = DMatrix::zeros(self.n, q);
        for c in &self.chunks {
            out.rows_mut(c.rows.start, c.rows.len()).copy_from(c.acts.last().unwrap());
        }
        out
    }

    /// Per-sample envelope factor (ones when no envelope is used).
    pub fn envelope(&self) -> DVector<f64> {
        let mut out = DVector::from_element(self.n, 1.0);
        for c in &self.chunks {
            if let Some(env) = &c.envelope {
                out.rows_mut(c.rows.start, c.rows.len()).copy_from(env);
            }
        }
        out
    }

    /// `J v`, `n x k`.
    pub fn jvp(&self, v: &[f64]) -> Result<DMatrix<f64>> {
        self.check_param_len(v.len())?;
        let parts: Vec<DMatrix<f64>> =
            self.chunks.par_iter().map(|c| c.jvp(&self.layers, self.params, v)).collect();
        let mut out = DMatrix::zeros(self.n, self.spec.output_dim);
        for (c, part) in self.chunks.iter().zip(parts) {
            out.rows_mut(c.rows.start, c.rows.len()).copy_from(&part);
        }
        Ok(out)
    }

    /// `J^T u` for `u` of shape `n x k`.
    pub fn vjp(&self, u: &DMatrix<f64>) -> Result<Vec<f64>> {
        if u.nrows() != self.n || u.ncols() != self.spec.output_dim {
            return Err(Error::DimensionMismatch {
                what: "cotangent rows x cols",
                expected: self.n * self.spec.output_dim,
                got: u.nrows() * u.ncols(),
            });
        }
        let parts: Vec<Vec<f64>> = self
            .chunks
            .par_iter()
            .map(|c| {
                let mut g = vec![0.0; self.params.len()];
                c.vjp_into(&self.layers, self.params, u.rows(c.rows.start, c.rows.len()).into_owned(), &mut g);
                g
            })
            .collect();
        Ok(sum_in_order(parts, self.params.len()))
    }

    /// `J^T J v` without forming `J`; chunks never leave their worker.
    pub fn gram_apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_param_len(v.len())?;
        let parts: Vec<Vec<f64>> = self
            .chunks
            .par_iter()
            .map(|c| {
                let t = c.jvp(&self.layers, self.params, v);
                let mut g = vec![0.0; self.params.len()];
                c.vjp_into(&self.layers, self.params, t, &mut g);
                g
            })
            .collect();
        Ok(sum_in_order(parts, self.params.len()))
    }

    fn check_param_len(&self, got: usize) -> Result<()> {
        if got != self.params.len() {
            return Err(Error::DimensionMismatch {
                what: "parameter-space vector",
                expected: self.params.len(),
                got,
            });
        }
        Ok(())
    }
}

fn sum_in_order(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for part in parts {
        for (a, p) in acc.iter_mut().zip(part) {
            *a += p;
        }
    }
    acc
}

/// Network output at one point.
pub fn forward(spec: &NetworkSpec, theta: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    let batch = DMatrix::from_row_slice(1, x.len(), x);
    let out = forward_batch(spec, theta, &batch)?;
    Ok(out.row(0).iter().copied().collect())
}

/// Network outputs for a batch of points (rows), `n x k`.
pub fn forward_batch(spec: &NetworkSpec, theta: &ParamVector, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(Linearization::new(spec, theta, x)?.outputs())
}

/// `J v` where `J_{(i,c),j} = ∂N_c(x_i, θ)/∂θ_j`.
pub fn param_jvp(spec: &NetworkSpec, theta: &ParamVector, v: &[f64], x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Linearization::new(spec, theta, x)?.jvp(v)
}

/// `J^T u`.
pub fn param_vjp(spec: &NetworkSpec, theta: &ParamVector, u: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    Linearization::new(spec, theta, x)?.vjp(u)
}

/// Requested spatial derivative order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum JetOrder {
    Value = 0,
    Gradient = 1,
    Hessian = 2,
}

impl JetOrder {
    pub fn from_usize(order: usize) -> Result<Self> {
        match order {
            0 => Ok(JetOrder::Value),
            1 => Ok(JetOrder::Gradient),
            2 => Ok(JetOrder::Hessian),
            _ => Err(Error::Unsupported(format!("spatial derivative order {order} (max 2)"))),
        }
    }
}

/// Network value and spatial derivatives at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialJet {
    /// `N_c(x)`, length k.
    pub value: Vec<f64>,
    /// `∂N_c/∂x_i`, `k x D` (empty columns for order 0).
    pub grad: DMatrix<f64>,
    /// `∂²N_c/∂x_i∂x_j`, one `D x D` matrix per component (empty for order < 2).
    pub hess: Vec<DMatrix<f64>>,
}

impl SpatialJet {
    pub fn laplacian(&self, c: usize) -> f64 {
        self.hess[c].trace()
    }

    pub fn zeros(k: usize, dim: usize, order: JetOrder) -> Self {
        SpatialJet {
            value: vec![0.0; k],
            grad: DMatrix::zeros(k, if order >= JetOrder::Gradient { dim } else { 0 }),
            hess: if order == JetOrder::Hessian { vec![DMatrix::zeros(dim, dim); k] } else { Vec::new() },
        }
    }
}

#[inline]
fn pair_index(i: usize, j: usize, dim: usize) -> usize {
    // upper triangle, row by row
    debug_assert!(i <= j);
    i * dim - i * (i + 1) / 2 + j
}

/// Forward-mode jet channels for a chunk of rows.
struct JetChannels {
    value: DMatrix<f64>,
    grad: Vec<DMatrix<f64>>,
    hess: Vec<DMatrix<f64>>,
}

impl JetChannels {
    fn embedding(x: &DMatrix<f64>, spec: &NetworkSpec, order: JetOrder) -> Self {
        let n = x.nrows();
        let dim = spec.input_dim;
        let levels = spec.embed_levels + 1;
        let width = spec.embed_dim();
        let value = embed_batch(x, spec);
        let mut grad = Vec::new();
        let mut hess = Vec::new();
        if order >= JetOrder::Gradient {
            grad = vec![DMatrix::zeros(n, width); dim];
        }
        if order == JetOrder::Hessian {
            hess = vec![DMatrix::zeros(n, width); dim * (dim + 1) / 2];
        }
        if order >= JetOrder::Gradient {
            for d in 0..dim {
                let diag = pair_index(d, d, dim);
                for k in 0..levels {
                    let (freq, amp) = level_constants(spec, k);
                    let (cs, cc) = (2 * levels * d + k, 2 * levels * d + levels + k);
                    for i in 0..n {
                        let (s, c) = (freq * x[(i, d)]).sin_cos();
                        grad[d][(i, cs)] = amp * freq * c;
                        grad[d][(i, cc)] = -amp * freq * s;
                        if order == JetOrder::Hessian {
                            hess[diag][(i, cs)] = -amp * freq * freq * s;
                            hess[diag][(i, cc)] = -amp * freq * freq * c;
                        }
                    }
                }
            }
        }
        JetChannels { value, grad, hess }
    }

    fn linear(&self, params: &[f64], layer: &LayerLayout) -> Self {
        let wt = weights_t(params, layer);
        let mut value = &self.value * &wt;
        add_bias(&mut value, &params[layer.biases()]);
        JetChannels {
            value,
            grad: self.grad.iter().map(|g| g * &wt).collect(),
            hess: self.hess.iter().map(|h| h * &wt).collect(),
        }
    }

    fn activate(mut self, act: Activation, dim: usize) -> Self {
        let n = self.value.len();
        for idx in 0..n {
            let (a, d1, d2) = act.eval3(self.value[idx]);
            self.value[idx] = a;
            if !self.hess.is_empty() {
                for i in 0..dim {
                    for j in i..dim {
                        let h = &mut self.hess[pair_index(i, j, dim)][idx];
                        *h = d2 * self.grad[i][idx] * self.grad[j][idx] + d1 * *h;
                    }
                }
            }
            for g in &mut self.grad {
                g[idx] *= d1;
            }
        }
        self
    }
}

/// Spatial jets for every row of `x`.
pub fn spatial_jet_batch(
    spec: &NetworkSpec,
    theta: &ParamVector,
    x: &DMatrix<f64>,
    order: JetOrder,
) -> Result<Vec<SpatialJet>> {
    theta.check(spec)?;
    check_batch(spec, x)?;
    let layers = spec.layers();
    let params = theta.as_slice();
    let dim = spec.input_dim;
    let k = spec.output_dim;
    let parts: Vec<Vec<SpatialJet>> = row_chunks(x.nrows())
        .into_par_iter()
        .map(|rows| {
            let xs = x.rows(rows.start, rows.len()).into_owned();
            let mut ch = JetChannels::embedding(&xs, spec, order);
            let last = layers.len() - 1;
            for (l, layer) in layers.iter().enumerate() {
                ch = ch.linear(params, layer);
                if l != last {
                    ch = ch.activate(spec.activation, dim);
                }
            }
            (0..xs.nrows())
                .map(|i| {
                    let mut jet = SpatialJet::zeros(k, dim, order);
                    for c in 0..k {
                        jet.value[c] = ch.value[(i, c)];
                        for a in 0..jet.grad.ncols() {
                            jet.grad[(c, a)] = ch.grad[a][(i, c)];
                        }
                        if order == JetOrder::Hessian {
                            for a in 0..dim {
                                for b in a..dim {
                                    let h = ch.hess[pair_index(a, b, dim)][(i, c)];
                                    jet.hess[c][(a, b)] = h;
                                    jet.hess[c][(b, a)] = h;
                                }
                            }
                        }
                    }
                    if spec.envelope == Envelope::DirichletCube {
                        let point: Vec<f64> = xs.row(i).iter().copied().collect();
                        apply_envelope(&mut jet, &point, order);
                    }
                    jet
                })
                .collect()
        })
        .collect();
    Ok(parts.into_iter().flatten().collect())
}

/// Product rule for `N = raw * e(x)`.
fn apply_envelope(jet: &mut SpatialJet, x: &[f64], order: JetOrder) {
    let (e, de, d2e) = envelope_jet(x);
    let dim = x.len();
    for c in 0..jet.value.len() {
        let raw = jet.value[c];
        if order == JetOrder::Hessian {
            let mut h = DMatrix::zeros(dim, dim);
            for a in 0..dim {
                for b in a..dim {
                    let v = jet.hess[c][(a, b)] * e
                        + jet.grad[(c, a)] * de[b]
                        + jet.grad[(c, b)] * de[a]
                        + raw * d2e[(a, b)];
                    h[(a, b)] = v;
                    h[(b, a)] = v;
                }
            }
            jet.hess[c] = h;
        }
        if order >= JetOrder::Gradient {
            for a in 0..dim {
                jet.grad[(c, a)] = jet.grad[(c, a)] * e + raw * de[a];
            }
        }
        jet.value[c] = raw * e;
    }
}

/// Spatial jet at one point.
pub fn spatial_jet(spec: &NetworkSpec, theta: &ParamVector, x: &[f64], order: JetOrder) -> Result<SpatialJet> {
    if x.len() != spec.input_dim {
        return Err(Error::DimensionMismatch { what: "input point", expected: spec.input_dim, got: x.len() });
    }
    let batch = DMatrix::from_row_slice(1, x.len(), x);
    Ok(spatial_jet_batch(spec, theta, &batch, order)?.pop().unwrap())
}
