//! Python bindings for `paramflow`. Points and outputs cross the boundary as
//! nested lists (one row per point), parameter vectors as flat lists.

use std::path::PathBuf;

use nalgebra::DMatrix;
use paramflow::config::RunConfig;
use paramflow::io::TrajectoryFile;
use paramflow::network::{self, Activation, Envelope, ParamVector};
use paramflow::run::Run;
use paramflow::Error;
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e if e.is_numerical() => PyArithmeticError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>], width: usize) -> PyResult<DMatrix<f64>> {
    if let Some(r) = rows.iter().find(|r| r.len() != width) {
        return Err(PyValueError::new_err(format!("expected rows of length {width}, got {}", r.len())));
    }
    Ok(DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Network architecture. `activation` is one of "swish", "tanh", "relu".
#[pyclass(name = "NetworkSpec", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyNetworkSpec(network::NetworkSpec);

impl PyNetworkSpec {
    fn theta(&self, theta: Vec<f64>) -> PyResult<ParamVector> {
        ParamVector::from_vec(&self.0, theta).map_err(to_py)
    }
}

#[pymethods]
impl PyNetworkSpec {
    #[new]
    #[pyo3(signature = (input_dim, output_dim, hidden, activation="swish", envelope=false, embed_levels=5, embed_alpha=1.0, embed_scale=1.5))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        input_dim: usize,
        output_dim: usize,
        hidden: Vec<usize>,
        activation: &str,
        envelope: bool,
        embed_levels: usize,
        embed_alpha: f64,
        embed_scale: f64,
    ) -> PyResult<Self> {
        let activation = match activation {
            "swish" => Activation::Swish,
            "tanh" => Activation::Tanh,
            "relu" => Activation::Relu,
            other => return Err(PyValueError::new_err(format!("unknown activation {other:?}"))),
        };
        let spec = network::NetworkSpec::new(input_dim, output_dim, hidden)
            .with_activation(activation)
            .with_envelope(if envelope { Envelope::DirichletCube } else { Envelope::None })
            .with_embedding(embed_levels, embed_alpha, embed_scale);
        spec.validate().map_err(to_py)?;
        Ok(PyNetworkSpec(spec))
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.0.input_dim
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.0.output_dim
    }

    fn init(&self, seed: u64) -> Vec<f64> {
        network::init_params(&self.0, seed).data
    }

    fn forward(&self, theta: Vec<f64>, points: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = matrix(&points, self.0.input_dim)?;
        let out = network::forward_batch(&self.0, &self.theta(theta)?, &x).map_err(to_py)?;
        Ok(rows(&out))
    }

    /// `J v`: one row of output perturbations per point.
    fn jvp(&self, theta: Vec<f64>, v: Vec<f64>, points: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = matrix(&points, self.0.input_dim)?;
        let out = network::param_jvp(&self.0, &self.theta(theta)?, &v, &x).map_err(to_py)?;
        Ok(rows(&out))
    }

    /// `Jᵀ u` for `u` shaped like the output of `forward`.
    fn vjp(&self, theta: Vec<f64>, u: Vec<Vec<f64>>, points: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let x = matrix(&points, self.0.input_dim)?;
        let u = matrix(&u, self.0.output_dim)?;
        network::param_vjp(&self.0, &self.theta(theta)?, &u, &x).map_err(to_py)
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("spec serializes")
    }

    fn __repr__(&self) -> String {
        format!("NetworkSpec({})", self.to_json())
    }
}

/// A run directory driven by a TOML configuration, as on the command line.
#[pyclass(name = "Run", frozen)]
struct PyRun {
    config: RunConfig,
    out: PathBuf,
}

impl PyRun {
    fn open(&self) -> PyResult<Run> {
        Run::new(self.config.clone(), &self.out).map_err(to_py)
    }
}

#[pymethods]
impl PyRun {
    #[new]
    #[pyo3(signature = (config, out, desk_scale=false, seed=None))]
    fn new(config: &str, out: PathBuf, desk_scale: bool, seed: Option<u64>) -> PyResult<Self> {
        let config = RunConfig::from_toml_str(config, desk_scale, seed).map_err(to_py)?;
        Ok(PyRun { config, out })
    }

    #[getter]
    fn config_toml(&self) -> PyResult<String> {
        self.config.to_toml().map_err(to_py)
    }

    #[getter]
    fn spec(&self) -> PyResult<PyNetworkSpec> {
        let problem = self.config.build_problem().map_err(to_py)?;
        Ok(PyNetworkSpec(self.config.network_spec(&problem)))
    }

    /// Returns `(theta, final_mse)`.
    fn fit(&self, py: Python<'_>) -> PyResult<(Vec<f64>, f64)> {
        let run = self.open()?;
        let (theta, report) = py.detach(|| run.fit()).map_err(to_py)?;
        Ok((theta.data, report.final_mse()))
    }

    /// Returns `(times, thetas)` of the written trajectory.
    #[pyo3(signature = (start=None))]
    fn evolve(&self, py: Python<'_>, start: Option<PathBuf>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let run = self.open()?;
        let ev = py.detach(|| run.evolve(start.as_deref())).map_err(to_py)?;
        Ok(split(ev.trajectory))
    }

    /// `(t, held-out residual, CG iterations)` per checkpoint.
    fn residuals(&self, py: Python<'_>) -> PyResult<Vec<(f64, f64, usize)>> {
        let run = self.open()?;
        let rows = py.detach(|| run.diagnose_residual(None)).map_err(to_py)?;
        Ok(rows.into_iter().map(|r| (r.t, r.residual, r.cg_iterations)).collect())
    }

    /// `(t, slice, volume, fd vs analytic, network vs analytic)` per checkpoint.
    fn compare_fd(&self, py: Python<'_>) -> PyResult<Vec<(f64, f64, f64, f64, f64)>> {
        let run = self.open()?;
        let rows = py.detach(|| run.compare_fd(None)).map_err(to_py)?;
        Ok(rows
            .into_iter()
            .map(|r| (r.t, r.slice_discrepancy, r.volume_discrepancy, r.fd_vs_analytic, r.network_vs_analytic))
            .collect())
    }
}

fn split(tf: TrajectoryFile) -> (Vec<f64>, Vec<Vec<f64>>) {
    (tf.header.times, tf.thetas.into_iter().map(|t| t.data).collect())
}

/// Reads a trajectory file into `(spec, times, thetas)`.
#[pyfunction]
fn read_trajectory(path: PathBuf) -> PyResult<(PyNetworkSpec, Vec<f64>, Vec<Vec<f64>>)> {
    let tf = TrajectoryFile::read(&path).map_err(to_py)?;
    let spec = PyNetworkSpec(tf.header.spec.clone());
    let (times, thetas) = split(tf);
    Ok((spec, times, thetas))
}

#[pymodule]
fn paramflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetworkSpec>()?;
    m.add_class::<PyRun>()?;
    m.add_function(wrap_pyfunction!(read_trajectory, m)?)?;
    Ok(())
}
