//! Run orchestration behind the command-line tool: each command reads a
//! resolved [`RunConfig`], writes it into the run directory and produces the
//! trajectory and metric files there.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::{ProblemKind, RunConfig};
use crate::diagnostics::{relative_error, residual_estimate, spectrum_over_time, symmetry_report, SymmetryKind};
use crate::dynamics::{derive_seed, evolve_from, stream, theta_dot_on_batch, Event, RestartRecord, StepRecord};
use crate::error::{Error, Result};
use crate::fd::{fd_wave_solve, grid_compare, relative_grid_error, write_snapshot, SliceSpec};
use crate::fitting::{fit_function, FitReport};
use crate::io::{csv_err, write_csv, write_table, TrajectoryFile};
use crate::network::{NetworkSpec, ParamVector};
use crate::pde::{sample_domain, PdeProblem, Sampler};

pub const CONFIG_FILE: &str = "config.toml";
pub const THETA0_FILE: &str = "theta0.traj";
pub const TRAJECTORY_FILE: &str = "trajectory.traj";

/// Problem, network and output directory shared by the commands.
pub struct Run {
    pub config: RunConfig,
    pub problem: PdeProblem,
    pub spec: NetworkSpec,
    pub out: PathBuf,
    /// Progress lines on stderr.
    pub verbose: bool,
}

impl Run {
    /// Creates the output directory and writes the resolved config into it.
    pub fn new(config: RunConfig, out: &Path) -> Result<Self> {
        let problem = config.build_problem()?;
        let spec = config.network_spec(&problem);
        spec.validate()?;
        fs::create_dir_all(out)?;
        fs::write(out.join(CONFIG_FILE), config.to_toml()?)?;
        Ok(Run { config, problem, spec, out: out.to_path_buf(), verbose: false })
    }

    fn note(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn hash(&self) -> Result<String> {
        self.config.hash()
    }

    fn trajectory_file(&self, times: Vec<f64>, thetas: Vec<ParamVector>) -> Result<TrajectoryFile> {
        TrajectoryFile::new(self.hash()?, self.spec.clone(), times, thetas)
    }

    /// Fits the initial condition and writes `theta0.traj` and `fit.csv`.
    pub fn fit(&self) -> Result<(ParamVector, FitReport)> {
        let problem = &self.problem;
        let target = |x: &DMatrix<f64>| Ok(problem.initial_batch(x));
        self.note(format!("fitting {} parameters to the initial condition", self.spec.param_count()));
        let (theta, report) =
            fit_function(&self.spec, &target, problem.sampler(), &self.config.solver, self.config.solver.seed, None)?;
        self.trajectory_file(vec![0.0], vec![theta.clone()])?.write(&self.out.join(THETA0_FILE))?;
        write_csv(&self.out.join("fit.csv"), &fit_rows(&report))?;
        self.note(format!("fit done: head {:.3e} -> {:.3e}", report.pre_head_mse, report.post_head_mse));
        Ok((theta, report))
    }

    /// Integrates from the last checkpoint of `from` (default: `theta0.traj` in
    /// the run directory, fitting first if it is missing). Checkpoints
    /// already in `from` are kept, which makes an interrupted run resumable.
    pub fn evolve(&self, from: Option<&Path>) -> Result<Evolution> {
        let default = self.out.join(THETA0_FILE);
        let start = match from {
            Some(p) => TrajectoryFile::read(p)?,
            None if default.exists() => TrajectoryFile::read(&default)?,
            None => {
                let (theta, _) = self.fit()?;
                self.trajectory_file(vec![0.0], vec![theta])?
            }
        };
        if start.header.spec != self.spec {
            return Err(Error::Config("checkpoint network does not match the config".into()));
        }
        let (t0, theta0) = start.last().ok_or_else(|| Error::Format("starting file has no checkpoints".into()))?;
        let theta0 = theta0.clone();
        let mut times = start.header.times.clone();
        let mut thetas = start.thetas.clone();
        let traj_path = self.out.join(TRAJECTORY_FILE);
        self.trajectory_file(times.clone(), thetas.clone())?.write(&traj_path)?;

        let mut steps_csv = csv::Writer::from_path(self.out.join("steps.csv")).map_err(csv_err)?;
        let mut steps: Vec<StepRecord> = Vec::new();
        let mut restarts: Vec<RestartRecord> = Vec::new();
        let hash = self.hash()?;
        let verbose = self.verbose;
        let mut sink = |e: Event<'_>| -> Result<()> {
            match e {
                Event::Checkpoint { t, theta } => {
                    if t > t0 {
                        times.push(t);
                        thetas.push(theta.clone());
                        TrajectoryFile::new(hash.clone(), self.spec.clone(), times.clone(), thetas.clone())?.write(&traj_path)?;
                    }
                }
                Event::Step(s) => {
                    if verbose {
                        eprintln!(
                            "step {:>4} t {:.5} dt {:.2e} cg {:>4} (total {:>5}) rejected {}",
                            s.step, s.t, s.dt, s.cg_iterations, s.cg_total, s.rejected
                        );
                    }
                    steps_csv.serialize(s).map_err(csv_err)?;
                    steps_csv.flush()?;
                    steps.push(s.clone());
                }
                Event::Restart(r) => {
                    if verbose {
                        eprintln!("restart at t {:.5}: accepted {} (mse {:.2e}, max deviation {:.2e})", r.t, r.accepted, r.mse, r.max_dev);
                    }
                    restarts.push(r.clone());
                }
            }
            Ok(())
        };
        let checkpoints = self.config.checkpoint_times();
        let result = evolve_from(&self.problem, &self.spec, &self.config.solver, &theta0, t0, &checkpoints, &mut sink);
        drop(sink);
        write_csv(&self.out.join("restarts.csv"), &restarts)?;
        result?;
        let trajectory = TrajectoryFile::read(&traj_path)?;
        Ok(Evolution { trajectory, steps, restarts })
    }

    fn load_trajectory(&self, path: Option<&Path>) -> Result<TrajectoryFile> {
        let path = path.map(Path::to_path_buf).unwrap_or_else(|| self.out.join(TRAJECTORY_FILE));
        let tf = TrajectoryFile::read(&path)?;
        if tf.thetas.is_empty() {
            return Err(Error::Format(format!("{} has no checkpoints", path.display())));
        }
        if tf.header.spec != self.spec {
            return Err(Error::Config("trajectory network does not match the config".into()));
        }
        Ok(tf)
    }

    /// Held-out residual at every checkpoint: `θ'` is solved on one batch and
    /// the residual measured on a disjoint one. Writes `residuals.csv`.
    pub fn diagnose_residual(&self, trajectory: Option<&Path>) -> Result<Vec<ResidualRow>> {
        let tf = self.load_trajectory(trajectory)?;
        let cfg = &self.config.solver;
        let mut rows = Vec::new();
        for (i, (&t, theta)) in tf.header.times.iter().zip(&tf.thetas).enumerate() {
            let i = i as u64;
            let x = sample_domain(&self.problem, cfg.n_samples, derive_seed(cfg.seed, stream::EVAL, i));
            let td = theta_dot_on_batch(&self.spec, theta, &self.problem, cfg, &x, derive_seed(cfg.seed, stream::PRECOND, i), None)?;
            let held = sample_domain(&self.problem, self.config.diagnostics.residual_samples, derive_seed(cfg.seed, stream::PROBE, i));
            let residual = residual_estimate(&self.spec, theta, &td.value, &self.problem, &held)?;
            self.note(format!("t {t:.5} residual {residual:.4e}"));
            rows.push(ResidualRow { t, residual, cg_iterations: td.stats.iterations });
        }
        write_csv(&self.out.join("residuals.csv"), &rows)?;
        Ok(rows)
    }

    /// Dense spectra of `M̂`; writes one `spectrum_t<t>.csv` per checkpoint used.
    pub fn diagnose_spectrum(&self, trajectory: Option<&Path>) -> Result<Vec<PathBuf>> {
        let tf = self.load_trajectory(trajectory)?;
        let d = &self.config.diagnostics;
        let rows = spectrum_over_time(
            &tf.header.times,
            &tf.thetas,
            &self.spec,
            &self.problem,
            d.spectrum_stride,
            d.spectrum_samples,
            self.config.solver.seed,
            d.dense_cap,
        )?;
        rows.iter()
            .map(|row| {
                let path = self.out.join(format!("spectrum_t{:.6}.csv", row.t));
                write_table(&path, &["index", "eigenvalue"], row.eigenvalues.iter().enumerate().map(|(i, &e)| vec![i as f64, e]))?;
                Ok(path)
            })
            .collect()
    }

    /// Rescaling-direction Rayleigh quotients; writes `symmetry.csv`.
    pub fn diagnose_symmetry(&self, trajectory: Option<&Path>) -> Result<Vec<SymmetryCsvRow>> {
        let tf = self.load_trajectory(trajectory)?;
        let d = &self.config.diagnostics;
        let seed = self.config.solver.seed;
        let x = Sampler::Uniform.sample(self.spec.input_dim, d.symmetry_samples, derive_seed(seed, stream::PROBE, 0));
        let mut out = Vec::new();
        for (&t, theta) in tf.header.times.iter().zip(&tf.thetas) {
            for r in symmetry_report(&self.spec, theta, &x, d.symmetry_probes, derive_seed(seed, stream::PROBE, 1))? {
                out.push(SymmetryCsvRow { t, layer: r.layer, kind: r.kind, rayleigh: r.rayleigh, random_median: r.random_median, ratio: r.ratio });
            }
        }
        write_csv(&self.out.join("symmetry.csv"), &out)?;
        Ok(out)
    }

    /// Solves the finite-difference reference at every checkpoint time and
    /// compares. Writes `compare_fd.csv`, `slice_t<t>.csv` and the snapshots.
    pub fn compare_fd(&self, trajectory: Option<&Path>) -> Result<Vec<CompareRow>> {
        let flat = self.config.params.flat_metric;
        match self.config.problem {
            ProblemKind::Wave => {}
            ProblemKind::WaveMaps if flat => {}
            other => return Err(Error::Unsupported(format!("finite-difference comparison for {other:?}"))),
        }
        let tf = self.load_trajectory(trajectory)?;
        let fd = &self.config.fd;
        let times = &tf.header.times;
        let problem = &self.problem;
        let ic = |x: &[f64]| problem.initial_condition(x);
        let t_end = times.last().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
        self.note(format!("finite differences on a {}³ grid", fd.grid_n));
        let snaps = fd_wave_solve(fd.grid_n, t_end, &ic, fd.ode_tol, times, fd.memory_cap_bytes)?;
        let d = &self.config.diagnostics;
        let seed = self.config.solver.seed;
        let mut rows = Vec::new();
        for snap in &snaps {
            let tag = format!("{:.6}", snap.t);
            write_snapshot(&self.out.join(format!("fd_t{tag}.f64")), snap)?;
            let volume = grid_compare(times, &tf.thetas, &self.spec, snap, SliceSpec::Volume, fd.time_tol)?;
            let slice = grid_compare(times, &tf.thetas, &self.spec, snap, fd.slice, fd.time_tol)?;
            let axes: Vec<usize> = match fd.slice {
                SliceSpec::Plane { axis, .. } => (0..3).filter(|&a| a != axis).collect(),
                SliceSpec::Volume => vec![0, 1, 2],
            };
            let mut header: Vec<&str> = axes.iter().map(|&a| ["x", "y", "z"][a]).collect();
            header.extend(["network", "fd"]);
            write_table(
                &self.out.join(format!("slice_t{tag}.csv")),
                &header,
                (0..slice.points.nrows()).map(|r| {
                    let mut row: Vec<f64> = axes.iter().map(|&a| slice.points[(r, a)]).collect();
                    row.extend([slice.network[r], slice.reference[r]]);
                    row
                }),
            )?;
            let (fd_error, network_error) = if problem.has_analytic() {
                let exact = |x: &[f64]| problem.analytic_solution(x, snap.t).map(|u| u[0]).unwrap_or(f64::NAN);
                let i = times.iter().position(|&t| t == volume.t).unwrap_or(0);
                let xu = Sampler::Uniform.sample(3, d.error_samples, derive_seed(seed, stream::PROBE, 3));
                (relative_grid_error(snap, &exact), relative_error(&self.spec, &tf.thetas[i], problem, volume.t, &xu)?)
            } else {
                (f64::NAN, f64::NAN)
            };
            self.note(format!(
                "t {:.5}: slice {:.4} volume {:.4} fd-vs-exact {:.4} net-vs-exact {:.4}",
                snap.t, slice.discrepancy, volume.discrepancy, fd_error, network_error
            ));
            rows.push(CompareRow {
                t: snap.t,
                slice_discrepancy: slice.discrepancy,
                volume_discrepancy: volume.discrepancy,
                fd_vs_analytic: fd_error,
                network_vs_analytic: network_error,
            });
        }
        write_csv(&self.out.join("compare_fd.csv"), &rows)?;
        Ok(rows)
    }
}

pub struct Evolution {
    pub trajectory: TrajectoryFile,
    pub steps: Vec<StepRecord>,
    pub restarts: Vec<RestartRecord>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FitRow {
    pub stage: &'static str,
    pub iter: usize,
    pub mse: f64,
}

fn fit_rows(report: &FitReport) -> Vec<FitRow> {
    let mut rows: Vec<FitRow> = report.history.iter().map(|&(iter, mse)| FitRow { stage: "adam", iter, mse }).collect();
    let last = report.history.last().map(|h| h.0).unwrap_or(0);
    rows.push(FitRow { stage: "head_pre", iter: last, mse: report.pre_head_mse });
    rows.push(FitRow { stage: "head_post", iter: last, mse: report.post_head_mse });
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResidualRow {
    pub t: f64,
    pub residual: f64,
    pub cg_iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SymmetryCsvRow {
    pub t: f64,
    pub layer: usize,
    pub kind: SymmetryKind,
    pub rayleigh: f64,
    pub random_median: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub t: f64,
    pub slice_discrepancy: f64,
    pub volume_discrepancy: f64,
    pub fd_vs_analytic: f64,
    /// Over the cube, uniformly weighted.
    pub network_vs_analytic: f64,
}
