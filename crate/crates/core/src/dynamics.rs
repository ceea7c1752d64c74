//! The parameter ODE `(M̂ + μI) θ' = F̂` and its adaptive time integration.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::{restart_refit, RestartOutcome};
use crate::linops::{cg_solve, shifted, NystromPreconditioner, Preconditioner, SolveStats, SymmetricOperator};
use crate::network::{spatial_jet_batch, Linearization, NetworkSpec, ParamVector};
use crate::pde::{sample_domain, PdeProblem};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Rk45,
    Rk23,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Absolute tolerance of the step error estimate.
    pub ode_tol: f64,
    pub ode_rtol: f64,
    pub integrator: Integrator,
    pub n_samples: usize,
    pub cg_tol: f64,
    pub cg_maxiter: usize,
    /// 0 disables preconditioning.
    pub precond_rank: usize,
    pub reg_mu: f64,
    pub n_restarts: usize,
    pub fit_iters: usize,
    pub fit_lr: f64,
    pub fit_batch: usize,
    pub head_lambda: f64,
    pub head_samples: usize,
    /// A restart is rejected if its eval-batch MSE exceeds this...
    pub restart_gate_mse: f64,
    /// ...or its max abs deviation exceeds this.
    pub restart_max_dev: f64,
    pub eval_samples: usize,
    /// Start CG for each stage from the previous stage's solution.
    pub warm_start: bool,
    /// Reuse one sample batch for the whole run instead of drawing one per step.
    pub fixed_batch: bool,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            ode_tol: 1e-4,
            ode_rtol: 1e-4,
            integrator: Integrator::Rk45,
            n_samples: 50_000,
            cg_tol: 1e-8,
            cg_maxiter: 1000,
            precond_rank: 200,
            reg_mu: 1e-6,
            n_restarts: 10,
            fit_iters: 50_000,
            fit_lr: 1e-3,
            fit_batch: 2048,
            head_lambda: 1e-8,
            head_samples: 16_384,
            restart_gate_mse: 1e-6,
            restart_max_dev: 1e-3,
            eval_samples: 4096,
            warm_start: false,
            fixed_batch: false,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("ode_tol", self.ode_tol),
            ("ode_rtol", self.ode_rtol),
            ("cg_tol", self.cg_tol),
            ("reg_mu", self.reg_mu),
            ("fit_lr", self.fit_lr),
            ("restart_gate_mse", self.restart_gate_mse),
            ("restart_max_dev", self.restart_max_dev),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.head_lambda >= 0.0) {
            return Err(Error::Config(format!("head_lambda must be non-negative, got {}", self.head_lambda)));
        }
        let counts = [
            ("n_samples", self.n_samples),
            ("cg_maxiter", self.cg_maxiter),
            ("fit_iters", self.fit_iters),
            ("fit_batch", self.fit_batch),
            ("head_samples", self.head_samples),
            ("eval_samples", self.eval_samples),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Independent seed for stream `stream`, item `index` of a run seeded with `base`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a fold of the three words
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) mod stream {
    pub const BATCH: u64 = 1;
    pub const PRECOND: u64 = 2;
    pub const INIT: u64 = 3;
    pub const FIT_BATCH: u64 = 4;
    pub const HEAD: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const RESTART: u64 = 7;
    pub const PROBE: u64 = 8;
}

fn gram_operator<'a>(lin: Linearization<'a>) -> SymmetricOperator<'a> {
    let p = lin.n_params();
    let n = lin.n_samples() as f64;
    let op = SymmetricOperator::new(p, true, move |v: &DVector<f64>| {
        let mut out = DVector::from_vec(lin.gram_apply(v.as_slice())?);
        out /= n;
        if let Some(i) = out.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { stage: "mass matrix product", index: i });
        }
        Ok(out)
    });
    if cfg!(debug_assertions) {
        if let Ok(defect) = op.symmetry_defect(1, derive_seed(0, stream::PROBE, p as u64)) {
            debug_assert!(defect <= 1e-10 * (1.0 + op_scale(&op)), "mass operator asymmetric: {defect}");
        }
    }
    op
}

fn op_scale(op: &SymmetricOperator<'_>) -> f64 {
    // crude |M| estimate for the relative symmetry check
    let e = DVector::from_element(op.dim(), 1.0 / (op.dim() as f64).sqrt());
    op.apply_uncounted(&e).map(|v| v.norm()).unwrap_or(0.0)
}

/// `v ↦ (1/n) Jᵀ J v` at the batch `x`.
pub fn mass_operator<'a>(spec: &'a NetworkSpec, theta: &'a ParamVector, x: &DMatrix<f64>) -> Result<SymmetricOperator<'a>> {
    if x.nrows() == 0 {
        return Err(Error::Config("mass operator needs a nonempty batch".into()));
    }
    Ok(gram_operator(Linearization::new(spec, theta, x)?))
}

/// `f_i = L[N](x_i)` as an `n × k` matrix.
pub fn operator_values(spec: &NetworkSpec, theta: &ParamVector, problem: &PdeProblem, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_problem(spec, problem)?;
    let jets = spatial_jet_batch(spec, theta, x, problem.order())?;
    problem.operator_batch(&jets, x)
}

/// `F̂ = (1/n) Jᵀ f`.
pub fn rhs_vector(spec: &NetworkSpec, theta: &ParamVector, problem: &PdeProblem, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    let f = operator_values(spec, theta, problem, x)?;
    let lin = Linearization::new(spec, theta, x)?;
    rhs_from(&lin, &f)
}

fn rhs_from(lin: &Linearization<'_>, f: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = lin.n_samples() as f64;
    let mut g = lin.vjp(f)?;
    for v in g.iter_mut() {
        *v /= n;
    }
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { stage: "right-hand side", index: i });
    }
    Ok(g)
}

fn check_problem(spec: &NetworkSpec, problem: &PdeProblem) -> Result<()> {
    if spec.input_dim != problem.dim() {
        return Err(Error::DimensionMismatch { what: "network input vs problem dimension", expected: problem.dim(), got: spec.input_dim });
    }
    if spec.output_dim != problem.components() {
        return Err(Error::DimensionMismatch {
            what: "network output vs problem components",
            expected: problem.components(),
            got: spec.output_dim,
        });
    }
    Ok(())
}

/// One regularized, preconditioned solve for `θ'`.
#[derive(Clone, Debug)]
pub struct ThetaDot {
    pub value: Vec<f64>,
    pub stats: SolveStats,
    pub rhs_norm: f64,
}

/// Solves `(M̂ + μI) θ' = F̂` on the given batch.
pub fn theta_dot_on_batch(
    spec: &NetworkSpec,
    theta: &ParamVector,
    problem: &PdeProblem,
    cfg: &SolverConfig,
    x: &DMatrix<f64>,
    precond_seed: u64,
    x0: Option<&[f64]>,
) -> Result<ThetaDot> {
    let f = operator_values(spec, theta, problem, x)?;
    let lin = Linearization::new(spec, theta, x)?;
    let rhs = DVector::from_vec(rhs_from(&lin, &f)?);
    let p = rhs.len();
    let rhs_norm = rhs.norm();
    if rhs_norm == 0.0 {
        return Ok(ThetaDot { value: vec![0.0; p], stats: SolveStats { converged: true, ..Default::default() }, rhs_norm });
    }
    let m = gram_operator(lin);
    let a = shifted(&m, cfg.reg_mu);
    let rank = cfg.precond_rank.min(p);
    let precond = if rank > 0 { Some(NystromPreconditioner::build(&m, rank, cfg.reg_mu, precond_seed)?) } else { None };
    let guess = x0.map(|g| DVector::from_column_slice(g));
    let (sol, stats) = cg_solve(
        &a,
        &rhs,
        precond.as_ref().map(|p| p as &dyn Preconditioner),
        cfg.cg_tol,
        cfg.cg_maxiter,
        guess.as_ref(),
    )?;
    if !stats.converged {
        return Err(Error::CgNotConverged(stats));
    }
    Ok(ThetaDot { value: sol.as_slice().to_vec(), stats, rhs_norm })
}

/// `θ'` on a fresh batch drawn with `seed`.
pub fn theta_dot(
    spec: &NetworkSpec,
    theta: &ParamVector,
    problem: &PdeProblem,
    cfg: &SolverConfig,
    seed: u64,
) -> Result<(Vec<f64>, SolveStats)> {
    let x = sample_domain(problem, cfg.n_samples, derive_seed(seed, stream::BATCH, 0));
    let out = theta_dot_on_batch(spec, theta, problem, cfg, &x, derive_seed(seed, stream::PRECOND, 0), None)?;
    Ok((out.value, out.stats))
}

struct Tableau {
    a: &'static [&'static [f64]],
    /// Weights of the propagated (higher order) solution.
    b: &'static [f64],
    /// `b - b̂`: weights of the embedded error estimate.
    e: &'static [f64],
    /// Order of the embedded (lower order) solution.
    low_order: i32,
}

const DOPRI5: Tableau = Tableau {
    a: &[
        &[],
        &[1.0 / 5.0],
        &[3.0 / 40.0, 9.0 / 40.0],
        &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
        &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
        &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
        &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ],
    b: &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0],
    e: &[
        35.0 / 384.0 - 5179.0 / 57600.0,
        0.0,
        500.0 / 1113.0 - 7571.0 / 16695.0,
        125.0 / 192.0 - 393.0 / 640.0,
        -2187.0 / 6784.0 + 92097.0 / 339200.0,
        11.0 / 84.0 - 187.0 / 2100.0,
        -1.0 / 40.0,
    ],
    low_order: 4,
};

const BS23: Tableau = Tableau {
    a: &[&[], &[1.0 / 2.0], &[0.0, 3.0 / 4.0], &[2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0]],
    b: &[2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0, 0.0],
    e: &[2.0 / 9.0 - 7.0 / 24.0, 1.0 / 3.0 - 1.0 / 4.0, 4.0 / 9.0 - 1.0 / 3.0, -1.0 / 8.0],
    low_order: 2,
};

impl Integrator {
    fn tableau(self) -> &'static Tableau {
        match self {
            Integrator::Rk45 => &DOPRI5,
            Integrator::Rk23 => &BS23,
        }
    }

    pub(crate) fn low_order(self) -> i32 {
        self.tableau().low_order
    }
}

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

/// Result of one embedded Runge–Kutta attempt.
pub struct RkAttempt {
    pub y: Vec<f64>,
    /// Scaled max-norm error; the step is acceptable when `<= 1`.
    pub error: f64,
    pub stage_stats: Vec<SolveStats>,
}

/// One embedded Runge–Kutta step of size `h` for an autonomous system `y' = f(y)`.
pub fn rk_attempt<F>(integrator: Integrator, y: &[f64], h: f64, atol: f64, rtol: f64, mut f: F) -> Result<RkAttempt>
where
    F: FnMut(usize, &[f64], Option<&[f64]>) -> Result<(Vec<f64>, SolveStats)>,
{
    let tab = integrator.tableau();
    let stages = tab.a.len();
    let mut ks: Vec<Vec<f64>> = Vec::with_capacity(stages);
    let mut stage_stats = Vec::with_capacity(stages);
    let mut ytmp = vec![0.0; y.len()];
    for (s, row) in tab.a.iter().enumerate() {
        ytmp.copy_from_slice(y);
        for (aij, k) in row.iter().zip(&ks) {
            if *aij != 0.0 {
                for (t, kv) in ytmp.iter_mut().zip(k) {
                    *t += h * aij * kv;
                }
            }
        }
        let (k, st) = f(s, &ytmp, ks.last().map(|k| k.as_slice()))?;
        ks.push(k);
        stage_stats.push(st);
    }
    let mut ynew = y.to_vec();
    for (bj, k) in tab.b.iter().zip(&ks) {
        if *bj != 0.0 {
            for (t, kv) in ynew.iter_mut().zip(k) {
                *t += h * bj * kv;
            }
        }
    }
    let mut error = 0.0f64;
    for i in 0..y.len() {
        let mut e = 0.0;
        for (ej, k) in tab.e.iter().zip(&ks) {
            e += ej * k[i];
        }
        let scale = atol + rtol * y[i].abs().max(ynew[i].abs());
        let r = (h * e).abs() / scale;
        if r.is_nan() {
            error = f64::NAN;
            break;
        }
        error = error.max(r);
    }
    Ok(RkAttempt { y: ynew, error, stage_stats })
}

pub(crate) fn step_factor(error: f64, low_order: i32) -> f64 {
    if !error.is_finite() {
        return MIN_FACTOR;
    }
    if error == 0.0 {
        return MAX_FACTOR;
    }
    (SAFETY * error.powf(-1.0 / (low_order as f64 + 1.0))).clamp(MIN_FACTOR, MAX_FACTOR)
}

/// Metrics for one accepted step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Time at the end of the step.
    pub t: f64,
    pub dt: f64,
    /// CG iterations of the first-stage solve at the start of the step.
    pub cg_iterations: usize,
    /// CG iterations over all solves of the step, rejected attempts included.
    pub cg_total: usize,
    pub solves: usize,
    /// Largest relative CG residual among the accepted attempt's solves.
    pub residual: f64,
    pub error_norm: f64,
    pub rejected: usize,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartRecord {
    pub t: f64,
    pub accepted: bool,
    pub mse: f64,
    pub max_dev: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub thetas: Vec<ParamVector>,
    pub steps: Vec<StepRecord>,
    pub restarts: Vec<RestartRecord>,
}

/// Events emitted while integrating.
pub enum Event<'a> {
    Checkpoint { t: f64, theta: &'a ParamVector },
    Step(&'a StepRecord),
    Restart(&'a RestartRecord),
}

// `pending` is sorted in decreasing order.
fn emit_checkpoints(
    t: f64,
    eps_t: f64,
    theta: &ParamVector,
    traj: &mut Trajectory,
    pending: &mut Vec<f64>,
    sink: &mut dyn FnMut(Event<'_>) -> Result<()>,
) -> Result<()> {
    while let Some(&c) = pending.last() {
        if c > t + eps_t {
            break;
        }
        pending.pop();
        traj.times.push(c);
        traj.thetas.push(theta.clone());
        sink(Event::Checkpoint { t: c, theta })?;
    }
    Ok(())
}

/// Restart times `jT/(n+1)`, `j = 1..=n`.
pub fn restart_times(final_time: f64, n_restarts: usize) -> Vec<f64> {
    (1..=n_restarts).map(|j| j as f64 * final_time / (n_restarts + 1) as f64).collect()
}

/// Integrates `θ` from 0 to the problem's final time, recording `θ` at the
/// requested checkpoint times.
pub fn evolve(
    problem: &PdeProblem,
    spec: &NetworkSpec,
    cfg: &SolverConfig,
    theta0: &ParamVector,
    checkpoint_times: &[f64],
) -> Result<Trajectory> {
    evolve_from(problem, spec, cfg, theta0, 0.0, checkpoint_times, &mut |_| Ok(()))
}

/// As [`evolve`], starting from `θ(t0) = theta0` and reporting progress to `sink`.
pub fn evolve_from(
    problem: &PdeProblem,
    spec: &NetworkSpec,
    cfg: &SolverConfig,
    theta0: &ParamVector,
    t0: f64,
    checkpoint_times: &[f64],
    sink: &mut dyn FnMut(Event<'_>) -> Result<()>,
) -> Result<Trajectory> {
    cfg.validate()?;
    check_problem(spec, problem)?;
    theta0.check(spec)?;
    let t_end = problem.final_time();
    if !(t_end > 0.0) || !(t0 >= 0.0 && t0 <= t_end) {
        return Err(Error::Config(format!("need 0 <= t0 <= T with T > 0 (t0 = {t0}, T = {t_end})")));
    }
    if checkpoint_times.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("checkpoint times must be sorted".into()));
    }
    if let Some(&last) = checkpoint_times.last() {
        if last > t_end * (1.0 + 1e-12) {
            return Err(Error::Config(format!("checkpoint time {last} is past the final time {t_end}")));
        }
    }

    let clock = Instant::now();
    let tab = cfg.integrator.tableau();
    let eps_t = 1e-12 * t_end;
    let mut checkpoints: Vec<f64> = checkpoint_times.iter().copied().filter(|&c| c >= t0 - eps_t).collect();
    checkpoints.reverse();
    let mut restarts: Vec<(usize, f64)> =
        restart_times(t_end, cfg.n_restarts).into_iter().enumerate().filter(|&(_, r)| r > t0 + eps_t).collect();
    restarts.reverse();

    let salt = t0.to_bits();
    let mut traj = Trajectory::default();
    let mut t = t0;
    let mut theta = theta0.clone();
    let mut dt = (20.0 * t_end * cfg.ode_tol).min(t_end - t0).max(eps_t);
    let mut step = 0usize;
    let fixed_batch =
        if cfg.fixed_batch { Some(sample_domain(problem, cfg.n_samples, derive_seed(cfg.seed, stream::BATCH, u64::MAX))) } else { None };

    emit_checkpoints(t, eps_t, &theta, &mut traj, &mut checkpoints, sink)?;

    while t < t_end - eps_t {
        let next_event = checkpoints
            .last()
            .copied()
            .unwrap_or(t_end)
            .min(restarts.last().map(|r| r.1).unwrap_or(t_end))
            .min(t_end);
        let batch_seed = derive_seed(cfg.seed ^ salt, stream::BATCH, step as u64);
        let owned_batch;
        let x = match &fixed_batch {
            Some(x) => x,
            None => {
                owned_batch = sample_domain(problem, cfg.n_samples, batch_seed);
                &owned_batch
            }
        };

        let mut rejected = 0usize;
        let mut cg_total = 0usize;
        let mut solves = 0usize;
        let mut first_stage: Option<(Vec<f64>, SolveStats)> = None;
        loop {
            let clipped = t + dt >= next_event - eps_t;
            let h = if clipped { next_event - t } else { dt };
            let attempt = rk_attempt(cfg.integrator, theta.as_slice(), h, cfg.ode_tol, cfg.ode_rtol, |stage, y, prev| {
                // k1 does not depend on h: reuse it across retries of the same step
                if stage == 0 {
                    if let Some(k) = &first_stage {
                        return Ok(k.clone());
                    }
                }
                let th = ParamVector { data: y.to_vec() };
                let seed = derive_seed(cfg.seed ^ salt, stream::PRECOND, (step as u64) << 8 | stage as u64);
                let guess = if cfg.warm_start { prev.or(first_stage.as_ref().map(|k| k.0.as_slice())) } else { None };
                let out = theta_dot_on_batch(spec, &th, problem, cfg, x, seed, guess)?;
                cg_total += out.stats.iterations;
                solves += 1;
                if stage == 0 {
                    first_stage = Some((out.value.clone(), out.stats.clone()));
                }
                Ok((out.value, out.stats))
            })?;
            if attempt.error <= 1.0 {
                let record = StepRecord {
                    step,
                    t: if clipped { next_event } else { t + h },
                    dt: h,
                    cg_iterations: first_stage.as_ref().map(|k| k.1.iterations).unwrap_or(0),
                    cg_total,
                    solves,
                    residual: attempt.stage_stats.iter().map(|s| s.final_residual).fold(0.0, f64::max),
                    error_norm: attempt.error,
                    rejected,
                    wall_time: clock.elapsed().as_secs_f64(),
                };
                t = record.t;
                theta = ParamVector { data: attempt.y };
                dt = h * step_factor(attempt.error, tab.low_order);
                sink(Event::Step(&record))?;
                traj.steps.push(record);
                break;
            }
            rejected += 1;
            dt = h * step_factor(attempt.error, tab.low_order);
            if dt < eps_t {
                return Err(Error::StepCollapse { t, dt });
            }
        }
        step += 1;

        emit_checkpoints(t, eps_t, &theta, &mut traj, &mut checkpoints, sink)?;
        while let Some(&(idx, tr)) = restarts.last() {
            if tr > t + eps_t {
                break;
            }
            restarts.pop();
            let RestartOutcome { theta: refit, accepted, mse, max_dev, .. } =
                restart_refit(spec, &theta, cfg, problem.sampler(), derive_seed(cfg.seed ^ salt, stream::RESTART, idx as u64))?;
            theta = refit;
            let record = RestartRecord { t, accepted, mse, max_dev, wall_time: clock.elapsed().as_secs_f64() };
            sink(Event::Restart(&record))?;
            traj.restarts.push(record);
        }
    }
    Ok(traj)
}
