//! Least-squares fits of the network to a target function: Adam on
//! minibatches followed by an exact ridge solve for the last layer.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::{derive_seed, stream, SolverConfig};
use crate::error::{Error, Result};
use crate::linops::ridge_lstsq;
use crate::network::{forward_batch, init_params, Linearization, NetworkSpec, ParamVector};
use crate::pde::Sampler;

/// Batch target: maps an `m × D` batch of points to `m × k` values.
pub type Target<'a> = dyn Fn(&DMatrix<f64>) -> Result<DMatrix<f64>> + Sync + 'a;

/// Adam with the usual moment constants.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// `(iteration, minibatch MSE)` every 100 iterations and at the last one.
    pub history: Vec<(usize, f64)>,
    /// MSE on the head-tuning batch before and after the last-layer solve.
    pub pre_head_mse: f64,
    pub post_head_mse: f64,
    pub head_accepted: bool,
}

impl FitReport {
    pub fn final_mse(&self) -> f64 {
        if self.head_accepted {
            self.post_head_mse
        } else {
            self.pre_head_mse
        }
    }
}

fn mse(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm_squared() / a.len() as f64
}

/// Mean squared error of the network against `y` on the batch `x`.
pub fn batch_mse(spec: &NetworkSpec, theta: &ParamVector, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    Ok(mse(&forward_batch(spec, theta, x)?, y))
}

/// Minimizes the sample MSE against `target`: `cfg.fit_iters` Adam steps on
/// fresh minibatches, then [`head_tune`] on a fixed batch of
/// `cfg.head_samples` points. Of the two candidates the one with the lower MSE
/// on that batch is returned.
pub fn fit_function(
    spec: &NetworkSpec,
    target: &Target<'_>,
    sampler: &Sampler,
    cfg: &SolverConfig,
    seed: u64,
    theta_init: Option<&ParamVector>,
) -> Result<(ParamVector, FitReport)> {
    spec.validate()?;
    if cfg.fit_iters == 0 {
        return Err(Error::Config("fit_iters must be at least 1".into()));
    }
    let mut theta = match theta_init {
        Some(t) => {
            t.check(spec)?;
            t.clone()
        }
        None => init_params(spec, derive_seed(seed, stream::INIT, 0)),
    };
    let mut adam = Adam::new(theta.len(), cfg.fit_lr);
    let mut report = FitReport::default();
    for it in 0..cfg.fit_iters {
        let x = sampler.sample(spec.input_dim, cfg.fit_batch, derive_seed(seed, stream::FIT_BATCH, it as u64));
        let y = target(&x)?;
        let lin = Linearization::new(spec, &theta, &x)?;
        let resid = lin.outputs() - &y;
        let loss = resid.norm_squared() / resid.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite { stage: "fit loss", index: it });
        }
        if it % 100 == 0 || it + 1 == cfg.fit_iters {
            report.history.push((it, loss));
        }
        let mut grad = lin.vjp(&resid)?;
        let scale = 2.0 / resid.len() as f64;
        for g in grad.iter_mut() {
            *g *= scale;
        }
        drop(lin);
        adam.step(&mut theta.data, &grad);
    }

    let x = sampler.sample(spec.input_dim, cfg.head_samples, derive_seed(seed, stream::HEAD, 0));
    let y = target(&x)?;
    report.pre_head_mse = batch_mse(spec, &theta, &x, &y)?;
    let tuned = head_tune(spec, &theta, &x, &y, cfg.head_lambda)?;
    report.post_head_mse = batch_mse(spec, &tuned, &x, &y)?;
    report.head_accepted = report.post_head_mse <= report.pre_head_mse;
    if report.head_accepted {
        theta = tuned;
    }
    Ok((theta, report))
}

/// Replaces the last layer by the ridge solution over the penultimate
/// features (plus a constant column for the bias). With the Dirichlet
/// envelope the features are scaled by the envelope, which keeps the problem
/// linear in the last layer.
pub fn head_tune(
    spec: &NetworkSpec,
    theta: &ParamVector,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    lambda: f64,
) -> Result<ParamVector> {
    if x.nrows() == 0 {
        return Err(Error::Config("head tuning needs at least one sample".into()));
    }
    if y.nrows() != x.nrows() || y.ncols() != spec.output_dim {
        return Err(Error::DimensionMismatch {
            what: "head-tune targets",
            expected: x.nrows() * spec.output_dim,
            got: y.nrows() * y.ncols(),
        });
    }
    let lin = Linearization::new(spec, theta, x)?;
    let feats = lin.features();
    let env = lin.envelope();
    let (m, q) = feats.shape();
    let design = DMatrix::from_fn(m, q + 1, |i, j| env[i] * if j < q { feats[(i, j)] } else { 1.0 });
    let coef = ridge_lstsq(&design, y, lambda)?;

    let last = spec.last_layer();
    let mut out = theta.clone();
    for o in 0..last.fan_out {
        for i in 0..q {
            out.data[last.weight_offset + o * q + i] = coef[(i, o)];
        }
        out.data[last.bias_offset + o] = coef[(q, o)];
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct RestartOutcome {
    /// The refit parameters if accepted, otherwise the input parameters.
    pub theta: ParamVector,
    pub accepted: bool,
    /// MSE and max abs deviation of the refit on a held-out batch.
    pub mse: f64,
    pub max_dev: f64,
    pub report: FitReport,
}

/// Refits a freshly initialized network to `x ↦ N(x, θ_current)`. The refit is
/// kept only if, on a held-out batch of `cfg.eval_samples` points, its MSE is
/// at most `cfg.restart_gate_mse` and its max abs deviation at most
/// `cfg.restart_max_dev`.
pub fn restart_refit(
    spec: &NetworkSpec,
    theta_current: &ParamVector,
    cfg: &SolverConfig,
    sampler: &Sampler,
    seed: u64,
) -> Result<RestartOutcome> {
    theta_current.check(spec)?;
    let target = |x: &DMatrix<f64>| forward_batch(spec, theta_current, x);
    let (refit, report) = fit_function(spec, &target, sampler, cfg, seed, None)?;

    let x = sampler.sample(spec.input_dim, cfg.eval_samples, derive_seed(seed, stream::EVAL, 0));
    let want = target(&x)?;
    let got = forward_batch(spec, &refit, &x)?;
    let diff = &got - &want;
    let mse = diff.norm_squared() / diff.len() as f64;
    let max_dev = diff.amax();
    let accepted = mse <= cfg.restart_gate_mse && max_dev <= cfg.restart_max_dev && mse.is_finite();
    if !accepted {
        eprintln!("warning: restart refit rejected (mse {mse:.3e}, max deviation {max_dev:.3e}); keeping current parameters");
    }
    Ok(RestartOutcome {
        theta: if accepted { refit } else { theta_current.clone() },
        accepted,
        mse,
        max_dev,
        report,
    })
}
