//! Residuals, errors against reference solutions, spectra of `M̂` and the
//! parameter-symmetry null directions.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{derive_seed, mass_operator, operator_values, stream};
use crate::error::{Error, Result};
use crate::linops::{dense_spectrum, gaussian_vector};
use crate::network::{forward_batch, param_jvp, Activation, NetworkSpec, ParamVector};
use crate::pde::{sample_domain, PdeProblem};

/// `(1/n) Σ_i |J_i θ' - f_i|²`; use a batch disjoint from the one `θ'` was solved on.
pub fn residual_estimate(
    spec: &NetworkSpec,
    theta: &ParamVector,
    theta_dot: &[f64],
    problem: &PdeProblem,
    x: &DMatrix<f64>,
) -> Result<f64> {
    let f = operator_values(spec, theta, problem, x)?;
    let jv = param_jvp(spec, theta, theta_dot, x)?;
    Ok((jv - f).norm_squared() / x.nrows() as f64)
}

/// `|N(X, θ) - u*(X, t)| / |u*(X, t)|` over the batch, first component only.
pub fn relative_error(spec: &NetworkSpec, theta: &ParamVector, problem: &PdeProblem, t: f64, x: &DMatrix<f64>) -> Result<f64> {
    let exact = problem.analytic_batch(x, t)?;
    let net = forward_batch(spec, theta, x)?;
    let denom = exact.column(0).norm();
    if denom == 0.0 {
        return Err(Error::Domain(format!("reference solution vanishes on the batch at t = {t}")));
    }
    Ok((net.column(0) - exact.column(0)).norm() / denom)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub t: f64,
    /// Descending.
    pub eigenvalues: Vec<f64>,
}

/// Dense spectra of `M̂(θ_t)` at every `stride`-th checkpoint, each on a batch
/// of `n_samples` points drawn with `seed`.
pub fn spectrum_over_time(
    times: &[f64],
    thetas: &[ParamVector],
    spec: &NetworkSpec,
    problem: &PdeProblem,
    stride: usize,
    n_samples: usize,
    seed: u64,
    dense_cap: usize,
) -> Result<Vec<SpectrumRow>> {
    if times.len() != thetas.len() {
        return Err(Error::DimensionMismatch { what: "checkpoint times vs parameters", expected: times.len(), got: thetas.len() });
    }
    if times.is_empty() {
        return Err(Error::Format("trajectory has no checkpoints".into()));
    }
    if spec.param_count() > dense_cap {
        return Err(Error::DenseCap { dim: spec.param_count(), cap: dense_cap });
    }
    let stride = stride.max(1);
    let x = sample_domain(problem, n_samples, derive_seed(seed, stream::BATCH, 0));
    (0..times.len())
        .step_by(stride)
        .map(|i| {
            let m = mass_operator(spec, &thetas[i], &x)?;
            Ok(SpectrumRow { t: times[i], eigenvalues: dense_spectrum(&m, dense_cap)? })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymmetryKind {
    ReluRescale,
    SwishRescale,
}

impl SymmetryKind {
    fn activation(self) -> Activation {
        match self {
            SymmetryKind::ReluRescale => Activation::Relu,
            SymmetryKind::SwishRescale => Activation::Swish,
        }
    }
}

/// Applies `T_α`: the weights and biases of hidden layer `layer` are scaled by
/// `e^α` and the weights of the following layer by `e^{-α}`.
pub fn rescale_transform(spec: &NetworkSpec, theta: &ParamVector, layer: usize, alpha: f64) -> Result<ParamVector> {
    let layers = check_pair(spec, theta, layer)?;
    let mut out = theta.clone();
    let up = alpha.exp();
    let down = (-alpha).exp();
    for i in layers.0.all() {
        out.data[i] *= up;
    }
    for i in layers.1.weights() {
        out.data[i] *= down;
    }
    Ok(out)
}

fn check_pair(
    spec: &NetworkSpec,
    theta: &ParamVector,
    layer: usize,
) -> Result<(crate::network::LayerLayout, crate::network::LayerLayout)> {
    theta.check(spec)?;
    if spec.hidden_widths.len() < 2 {
        return Err(Error::InvalidSpec("symmetry directions need at least two hidden layers".into()));
    }
    let layers = spec.layers();
    if layer + 1 >= layers.len() {
        return Err(Error::InvalidSpec(format!(
            "layer index {layer} out of range for {} hidden layers",
            spec.hidden_widths.len()
        )));
    }
    Ok((layers[layer], layers[layer + 1]))
}

/// Unit tangent of `α ↦ T_α(θ)` at `α = 0`: `(W_l, b_l, -W_{l+1})`, zero elsewhere.
pub fn symmetry_direction(spec: &NetworkSpec, theta: &ParamVector, kind: SymmetryKind, layer: usize) -> Result<Vec<f64>> {
    if spec.activation != kind.activation() {
        return Err(Error::Unsupported(format!("{kind:?} direction on a {:?} network", spec.activation)));
    }
    let (lo, hi) = check_pair(spec, theta, layer)?;
    let mut v = vec![0.0; theta.len()];
    for i in lo.all() {
        v[i] = theta.data[i];
    }
    for i in hi.weights() {
        v[i] = -theta.data[i];
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Domain("rescaling direction vanishes (zero weights)".into()));
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    Ok(v)
}

/// `vᵀ M̂ v = |J v|² / n`.
pub fn symmetry_rayleigh(spec: &NetworkSpec, theta: &ParamVector, x: &DMatrix<f64>, v: &[f64]) -> Result<f64> {
    let jv = param_jvp(spec, theta, v, x)?;
    Ok(jv.norm_squared() / x.nrows() as f64)
}

/// Rayleigh quotients along `count` random unit directions.
pub fn random_rayleigh(spec: &NetworkSpec, theta: &ParamVector, x: &DMatrix<f64>, count: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<DVector<f64>> = (0..count).map(|_| gaussian_vector(theta.len(), &mut rng).normalize()).collect();
    dirs.iter().map(|d| symmetry_rayleigh(spec, theta, x, d.as_slice())).collect()
}

/// `|J|_F` by one JVP per parameter; intended for small networks.
pub fn jacobian_frobenius(spec: &NetworkSpec, theta: &ParamVector, x: &DMatrix<f64>) -> Result<f64> {
    let p = theta.len();
    let sq: Vec<f64> = (0..p)
        .into_par_iter()
        .map(|c| {
            let mut e = vec![0.0; p];
            e[c] = 1.0;
            param_jvp(spec, theta, &e, x).map(|j| j.norm_squared())
        })
        .collect::<Result<_>>()?;
    Ok(sq.iter().sum::<f64>().sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetryRow {
    pub layer: usize,
    pub kind: SymmetryKind,
    pub rayleigh: f64,
    pub random_median: f64,
    /// `rayleigh / random_median`.
    pub ratio: f64,
}

/// Rescaling Rayleigh quotient against the median over random directions, for
/// every adjacent pair of hidden layers.
pub fn symmetry_report(spec: &NetworkSpec, theta: &ParamVector, x: &DMatrix<f64>, probes: usize, seed: u64) -> Result<Vec<SymmetryRow>> {
    let kind = match spec.activation {
        Activation::Relu => SymmetryKind::ReluRescale,
        Activation::Swish => SymmetryKind::SwishRescale,
        Activation::Tanh => return Err(Error::Unsupported("no rescaling symmetry for tanh networks".into())),
    };
    let random_median = median(&random_rayleigh(spec, theta, x, probes, seed)?);
    (0..spec.hidden_widths.len() - 1)
        .map(|layer| {
            let v = symmetry_direction(spec, theta, kind, layer)?;
            let rayleigh = symmetry_rayleigh(spec, theta, x, &v)?;
            Ok(SymmetryRow { layer, kind, rayleigh, random_median, ratio: rayleigh / random_median })
        })
        .collect()
}
