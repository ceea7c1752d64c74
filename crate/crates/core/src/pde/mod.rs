//! PDE right-hand sides `L[u]`, initial conditions and reference solutions.
//!
//! Every problem lives on the cube `[-1, 1]^D`. Operators see the spatial jet
//! of the network at a point and return `∂_t u` there.

mod metric;
mod problems;

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::distr::{Distribution, Open01};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{JetOrder, SpatialJet};

pub use metric::{christoffel, schwarzschild_metric, Christoffel, Metric};
pub use problems::{
    advection_problem, fit_only_problem, fokker_planck_problem, gaussian_bump, vlasov_field, vlasov_problem,
    wave_maps_operator, wave_maps_problem, wave_maps_problem_with, wave_problem, WaveMapsIc, WavePacket,
};

pub type OperatorFn = Arc<dyn Fn(&SpatialJet, &[f64]) -> Result<Vec<f64>> + Send + Sync>;
pub type FieldFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type SolutionFn = Arc<dyn Fn(&[f64], f64) -> Vec<f64> + Send + Sync>;

/// An initial value problem `∂_t u = L[u]` on `[-1, 1]^D` with `k` components.
#[derive(Clone)]
pub struct PdeProblem {
    name: String,
    dim: usize,
    components: usize,
    order: JetOrder,
    final_time: f64,
    operator: OperatorFn,
    initial: FieldFn,
    analytic: Option<SolutionFn>,
    sampler: Sampler,
}

impl fmt::Debug for PdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PdeProblem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("components", &self.components)
            .field("order", &self.order)
            .field("final_time", &self.final_time)
            .field("analytic", &self.analytic.is_some())
            .field("sampler", &self.sampler)
            .finish()
    }
}

impl PdeProblem {
    /// `order` is the highest spatial derivative the operator reads.
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        components: usize,
        order: JetOrder,
        final_time: f64,
        operator: OperatorFn,
        initial: FieldFn,
    ) -> Self {
        PdeProblem {
            name: name.into(),
            dim,
            components,
            order,
            final_time,
            operator,
            initial,
            analytic: None,
            sampler: Sampler::Uniform,
        }
    }

    pub fn with_sampler(mut self, sampler: Sampler) -> Self {
        self.sampler = sampler;
        self
    }

    pub fn sampler(&self) -> &Sampler {
        &self.sampler
    }

    pub fn with_analytic(mut self, solution: SolutionFn) -> Self {
        self.analytic = Some(solution);
        self
    }

    pub fn with_final_time(mut self, t: f64) -> Self {
        self.final_time = t;
        self
    }

    pub fn with_initial(mut self, initial: FieldFn) -> Self {
        self.initial = initial;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn order(&self) -> JetOrder {
        self.order
    }

    pub fn final_time(&self) -> f64 {
        self.final_time
    }

    pub fn has_analytic(&self) -> bool {
        self.analytic.is_some()
    }

    pub fn operator(&self, jet: &SpatialJet, x: &[f64]) -> Result<Vec<f64>> {
        (self.operator)(jet, x)
    }

    pub fn initial_condition(&self, x: &[f64]) -> Vec<f64> {
        (self.initial)(x)
    }

    pub fn analytic_solution(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        match &self.analytic {
            Some(u) => Ok(u(x, t)),
            None => Err(Error::MissingAnalytic(self.name.clone())),
        }
    }

    /// `L[N](x_i)` for every row of `x`, as an `n × k` matrix.
    pub fn operator_batch(&self, jets: &[SpatialJet], x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if jets.len() != x.nrows() {
            return Err(Error::DimensionMismatch { what: "jet batch", expected: x.nrows(), got: jets.len() });
        }
        let k = self.components;
        let rows: Vec<Vec<f64>> = jets
            .par_iter()
            .enumerate()
            .map(|(i, jet)| {
                let xi: Vec<f64> = x.row(i).iter().copied().collect();
                let f = self.operator(jet, &xi)?;
                if f.len() != k {
                    return Err(Error::DimensionMismatch { what: "operator output", expected: k, got: f.len() });
                }
                if f.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { stage: "pde operator", index: i });
                }
                Ok(f)
            })
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(x.nrows(), k, |i, c| rows[i][c]))
    }

    pub fn initial_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.field_batch(x, |p| self.initial_condition(p))
    }

    pub fn analytic_batch(&self, x: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
        let u = self.analytic.as_ref().ok_or_else(|| Error::MissingAnalytic(self.name.clone()))?;
        Ok(self.field_batch(x, |p| u(p, t)))
    }

    fn field_batch(&self, x: &DMatrix<f64>, f: impl Fn(&[f64]) -> Vec<f64> + Sync) -> DMatrix<f64> {
        let rows: Vec<Vec<f64>> = (0..x.nrows())
            .into_par_iter()
            .map(|i| {
                let xi: Vec<f64> = x.row(i).iter().copied().collect();
                f(&xi)
            })
            .collect();
        DMatrix::from_fn(x.nrows(), self.components, |i, c| rows[i][c])
    }
}

/// Sampling distribution `μ` for the Monte Carlo estimates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sampler {
    /// Uniform on the open cube.
    #[default]
    Uniform,
    /// Mixture: with probability `weight` an isotropic normal draw of standard
    /// deviation `sigma` around the origin (redrawn until it lands inside the
    /// cube), otherwise uniform.
    Focused { weight: f64, sigma: f64 },
}

impl Sampler {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Sampler::Uniform => Ok(()),
            Sampler::Focused { weight, sigma } => {
                if !(0.0..=1.0).contains(&weight) || !(sigma > 0.0) {
                    return Err(Error::Config(format!(
                        "focused sampler needs 0 <= weight <= 1 and sigma > 0 (got {weight}, {sigma})"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn sample(&self, dim: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = DMatrix::zeros(n, dim);
        let mut row = vec![0.0; dim];
        for i in 0..n {
            match *self {
                Sampler::Uniform => uniform_point(&mut rng, &mut row),
                Sampler::Focused { weight, sigma } => {
                    let u: f64 = Open01.sample(&mut rng);
                    if u < weight {
                        loop {
                            for v in row.iter_mut() {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                *v = sigma * z;
                            }
                            if row.iter().all(|v| v.abs() < 1.0) {
                                break;
                            }
                        }
                    } else {
                        uniform_point(&mut rng, &mut row);
                    }
                }
            }
            for (j, v) in row.iter().enumerate() {
                x[(i, j)] = *v;
            }
        }
        x
    }
}

fn uniform_point(rng: &mut ChaCha8Rng, row: &mut [f64]) {
    for v in row.iter_mut() {
        let u: f64 = Open01.sample(rng);
        *v = 2.0 * u - 1.0;
    }
}

/// `n` i.i.d. uniform points in the open cube `(-1, 1)^dim`, one per row.
pub fn sample_cube(dim: usize, n: usize, seed: u64) -> DMatrix<f64> {
    Sampler::Uniform.sample(dim, n, seed)
}

/// A batch from the problem's sampling distribution (uniform unless configured).
pub fn sample_domain(problem: &PdeProblem, n: usize, seed: u64) -> DMatrix<f64> {
    problem.sampler.sample(problem.dim(), n, seed)
}
