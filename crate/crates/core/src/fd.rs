//! Finite-difference reference solver for the 3D wave equation
//! `φ_t = ψ, ψ_t = Δφ` on `[-1, 1]³` with `φ = ψ = 0` on the boundary.
//!
//! The grid has `grid_n` nodes per axis including both boundary planes; fields
//! are flat `f64` arrays with x varying fastest.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{rk_attempt, step_factor, Integrator};
use crate::error::{Error, Result};
use crate::linops::SolveStats;
use crate::network::{forward_batch, NetworkSpec, ParamVector};

pub const DEFAULT_MEMORY_CAP: u64 = 4 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub n: usize,
}

impl Grid {
    pub fn new(n: usize) -> Result<Self> {
        if n < 8 {
            return Err(Error::Config(format!("grid_n must be at least 8 (got {n})")));
        }
        Ok(Grid { n })
    }

    pub fn h(&self) -> f64 {
        2.0 / (self.n - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        -1.0 + i as f64 * self.h()
    }

    pub fn len(&self) -> usize {
        self.n * self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.n * (j + self.n * k)
    }

    pub fn point(&self, idx: usize) -> [f64; 3] {
        let n = self.n;
        [self.coord(idx % n), self.coord((idx / n) % n), self.coord(idx / (n * n))]
    }

    fn on_boundary(&self, idx: usize) -> bool {
        let n = self.n;
        let (i, j, k) = (idx % n, (idx / n) % n, idx / (n * n));
        [i, j, k].iter().any(|&c| c == 0 || c == n - 1)
    }

    /// All nodes as an `n³ × 3` matrix, in storage order.
    pub fn points(&self) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(self.len(), 3);
        for idx in 0..self.len() {
            let p = self.point(idx);
            for d in 0..3 {
                x[(idx, d)] = p[d];
            }
        }
        x
    }
}

/// Bytes held by the integrator for a grid with `n_snapshots` stored snapshots.
pub fn memory_estimate(grid_n: usize, n_snapshots: usize) -> u64 {
    let state = 2 * (grid_n as u64).pow(3) * 8;
    // y, the seven stages, the stage input and the proposal
    state * (10 + n_snapshots as u64)
}

/// `out = Δ_h φ` at interior nodes, zero on the boundary.
pub fn laplacian(grid: Grid, phi: &[f64], out: &mut [f64]) {
    let n = grid.n;
    let inv_h2 = 1.0 / (grid.h() * grid.h());
    let plane = n * n;
    out.par_chunks_mut(plane).enumerate().for_each(|(k, slab)| {
        if k == 0 || k == n - 1 {
            slab.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        for j in 0..n {
            for i in 0..n {
                let local = i + n * j;
                if i == 0 || i == n - 1 || j == 0 || j == n - 1 {
                    slab[local] = 0.0;
                    continue;
                }
                let c = local + plane * k;
                slab[local] = (phi[c - 1] + phi[c + 1] + phi[c - n] + phi[c + n] + phi[c - plane] + phi[c + plane]
                    - 6.0 * phi[c])
                    * inv_h2;
            }
        }
    });
}

/// `h³ (Σ ψ² + Σ |∇_h φ|²)` with forward differences over every grid edge;
/// conserved by the semi-discrete system.
pub fn discrete_energy(grid: Grid, phi: &[f64], psi: &[f64]) -> f64 {
    let n = grid.n;
    let h = grid.h();
    let mut grad = 0.0;
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let c = grid.index(i, j, k);
                if i + 1 < n {
                    grad += (phi[c + 1] - phi[c]).powi(2);
                }
                if j + 1 < n {
                    grad += (phi[c + n] - phi[c]).powi(2);
                }
                if k + 1 < n {
                    grad += (phi[c + n * n] - phi[c]).powi(2);
                }
            }
        }
    }
    let kinetic: f64 = psi.iter().map(|v| v * v).sum();
    h.powi(3) * kinetic + h * grad
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdSnapshot {
    pub grid_n: usize,
    pub t: f64,
    pub phi: Vec<f64>,
    /// Kept in memory only; not part of the exported file.
    pub psi: Vec<f64>,
}

impl FdSnapshot {
    pub fn grid(&self) -> Grid {
        Grid { n: self.grid_n }
    }
}

/// Method-of-lines solve with adaptive RK45. `ic(x)` returns `[φ₀, ψ₀]`;
/// snapshots are returned at each of the sorted `times` in `[0, final_time]`.
pub fn fd_wave_solve(
    grid_n: usize,
    final_time: f64,
    ic: &(dyn Fn(&[f64]) -> Vec<f64> + Sync),
    ode_tol: f64,
    times: &[f64],
    memory_cap: u64,
) -> Result<Vec<FdSnapshot>> {
    let grid = Grid::new(grid_n)?;
    if !(final_time > 0.0) || !(ode_tol > 0.0) {
        return Err(Error::Config(format!("need T > 0 and ode_tol > 0 (got {final_time}, {ode_tol})")));
    }
    if times.windows(2).any(|w| w[0] > w[1]) || times.iter().any(|&t| t < 0.0 || t > final_time) {
        return Err(Error::Config("snapshot times must be sorted and inside [0, T]".into()));
    }
    let needed = memory_estimate(grid_n, times.len());
    if needed > memory_cap {
        return Err(Error::MemoryCap { needed, cap: memory_cap });
    }

    let m = grid.len();
    let mut y = vec![0.0; 2 * m];
    {
        let (phi, psi) = y.split_at_mut(m);
        phi.par_iter_mut().zip(psi.par_iter_mut()).enumerate().for_each(|(idx, (p, q))| {
            if !grid.on_boundary(idx) {
                let u = ic(&grid.point(idx));
                *p = u[0];
                *q = u[1];
            }
        });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { stage: "finite-difference initial data", index: 0 });
    }

    let eps_t = 1e-12 * final_time;
    let mut pending: Vec<f64> = times.to_vec();
    pending.reverse();
    let mut out = Vec::with_capacity(times.len());
    let mut t = 0.0;
    let mut dt = (20.0 * final_time * ode_tol).min(final_time);
    let low = Integrator::Rk45.low_order();
    let take = |t: f64, y: &[f64]| FdSnapshot { grid_n, t, phi: y[..m].to_vec(), psi: y[m..].to_vec() };

    while let Some(&c) = pending.last() {
        if c > t + eps_t {
            break;
        }
        pending.pop();
        out.push(take(c, &y));
    }
    let t_end = times.last().copied().unwrap_or(0.0);
    while t < t_end - eps_t {
        let next = pending.last().copied().unwrap_or(t_end);
        loop {
            let clipped = t + dt >= next - eps_t;
            let h = if clipped { next - t } else { dt };
            let attempt = rk_attempt(Integrator::Rk45, &y, h, ode_tol, ode_tol, |_, state, _| {
                let mut k = vec![0.0; 2 * m];
                k[..m].copy_from_slice(&state[m..]);
                laplacian(grid, &state[..m], &mut k[m..]);
                Ok((k, SolveStats::default()))
            })?;
            if attempt.error <= 1.0 {
                t = if clipped { next } else { t + h };
                y = attempt.y;
                dt = h * step_factor(attempt.error, low);
                break;
            }
            dt = h * step_factor(attempt.error, low);
            if dt < eps_t {
                return Err(Error::StepCollapse { t, dt });
            }
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { stage: "finite-difference state", index: i });
        }
        while let Some(&c) = pending.last() {
            if c > t + eps_t {
                break;
            }
            pending.pop();
            out.push(take(c, &y));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SliceSpec {
    /// The grid plane nearest to `axis = value`.
    Plane { axis: usize, value: f64 },
    Volume,
}

impl Default for SliceSpec {
    fn default() -> Self {
        SliceSpec::Plane { axis: 0, value: 0.0 }
    }
}

/// Node indices selected by a slice, in storage order.
pub fn slice_indices(grid: Grid, slice: SliceSpec) -> Result<Vec<usize>> {
    match slice {
        SliceSpec::Volume => Ok((0..grid.len()).collect()),
        SliceSpec::Plane { axis, value } => {
            if axis > 2 || !(-1.0..=1.0).contains(&value) {
                return Err(Error::Config(format!("slice axis {axis} at {value} is outside the cube")));
            }
            let plane = ((value + 1.0) / grid.h()).round() as usize;
            let n = grid.n;
            let mut idx = Vec::with_capacity(n * n);
            for b in 0..n {
                for a in 0..n {
                    idx.push(match axis {
                        0 => grid.index(plane, a, b),
                        1 => grid.index(a, plane, b),
                        _ => grid.index(a, b, plane),
                    });
                }
            }
            Ok(idx)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub t: f64,
    /// `|φ_net - φ_fd| / |φ_fd|` over the slice.
    pub discrepancy: f64,
    pub points: DMatrix<f64>,
    pub network: Vec<f64>,
    pub reference: Vec<f64>,
}

/// Compares the checkpoint at the snapshot's time against the snapshot on a slice.
pub fn grid_compare(
    times: &[f64],
    thetas: &[ParamVector],
    spec: &NetworkSpec,
    snapshot: &FdSnapshot,
    slice: SliceSpec,
    time_tol: f64,
) -> Result<Comparison> {
    if times.len() != thetas.len() {
        return Err(Error::DimensionMismatch { what: "checkpoint times vs parameters", expected: times.len(), got: thetas.len() });
    }
    let (i, gap) = times
        .iter()
        .enumerate()
        .map(|(i, &t)| (i, (t - snapshot.t).abs()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| Error::Format("trajectory has no checkpoints".into()))?;
    if gap > time_tol {
        return Err(Error::Config(format!("no checkpoint within {time_tol:e} of t = {} (closest is off by {gap:e})", snapshot.t)));
    }
    if spec.input_dim != 3 {
        return Err(Error::DimensionMismatch { what: "network input for a 3D grid", expected: 3, got: spec.input_dim });
    }
    let grid = snapshot.grid();
    let idx = slice_indices(grid, slice)?;
    let points = DMatrix::from_fn(idx.len(), 3, |r, d| grid.point(idx[r])[d]);
    let net = forward_batch(spec, &thetas[i], &points)?;
    let network: Vec<f64> = net.column(0).iter().copied().collect();
    let reference: Vec<f64> = idx.iter().map(|&j| snapshot.phi[j]).collect();
    let denom = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    if denom == 0.0 {
        return Err(Error::Domain("reference field vanishes on the slice".into()));
    }
    let diff = network.iter().zip(&reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(Comparison { t: times[i], discrepancy: diff / denom, points, network, reference })
}

/// Relative discrete L2 error of `φ` against `exact` over all grid nodes.
pub fn relative_grid_error(snapshot: &FdSnapshot, exact: &(dyn Fn(&[f64]) -> f64 + Sync)) -> f64 {
    let grid = snapshot.grid();
    let (num, den) = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let e = exact(&grid.point(idx));
            ((snapshot.phi[idx] - e).powi(2), e * e)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    (num / den).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub grid_n: usize,
    pub t: f64,
    pub bounds: [[f64; 2]; 3],
}

fn sidecar_path(data: &Path) -> PathBuf {
    data.with_extension("json")
}

/// Writes `φ` as raw little-endian `f64` to `path` and the header next to it
/// with a `.json` extension.
pub fn write_snapshot(path: &Path, snapshot: &FdSnapshot) -> Result<()> {
    let mut bytes = Vec::with_capacity(snapshot.phi.len() * 8);
    for v in &snapshot.phi {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    let header = SnapshotHeader { grid_n: snapshot.grid_n, t: snapshot.t, bounds: [[-1.0, 1.0]; 3] };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&header)?)?;
    Ok(())
}

/// Reads a snapshot written by [`write_snapshot`]; `psi` comes back empty.
pub fn read_snapshot(path: &Path) -> Result<FdSnapshot> {
    let header: SnapshotHeader = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let bytes = fs::read(path)?;
    let expected = header.grid_n.pow(3) * 8;
    if bytes.len() != expected {
        return Err(Error::Format(format!("snapshot holds {} bytes, header implies {expected}", bytes.len())));
    }
    let phi = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(FdSnapshot { grid_n: header.grid_n, t: header.t, phi, psi: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, Envelope};
    use std::f64::consts::PI;

    fn standing(x: &[f64]) -> f64 {
        x.iter().map(|&v| (PI * (v + 1.0) / 2.0).sin()).product()
    }

    fn standing_ic(x: &[f64]) -> Vec<f64> {
        vec![standing(x), 0.0]
    }

    fn omega() -> f64 {
        3f64.sqrt() * PI / 2.0
    }

    #[test]
    fn zero_data_stays_zero() {
        let snaps = fd_wave_solve(10, 0.3, &|_| vec![0.0, 0.0], 1e-4, &[0.0, 0.1, 0.3], DEFAULT_MEMORY_CAP).unwrap();
        assert_eq!(snaps.len(), 3);
        assert!(snaps.iter().all(|s| s.phi.iter().all(|&v| v == 0.0)));
        assert_eq!(snaps[2].t, 0.3);
    }

    #[test]
    fn standing_mode_at_64() {
        let t = 0.5;
        let snaps = fd_wave_solve(64, t, &standing_ic, 1e-6, &[t], DEFAULT_MEMORY_CAP).unwrap();
        let grid = Grid { n: 64 };
        let c = (omega() * t).cos();
        let err = (0..grid.len()).map(|i| (snaps[0].phi[i] - c * standing(&grid.point(i))).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-3, "{err}");
    }

    #[test]
    fn second_order_in_space() {
        let t = 0.5;
        let err = |n: usize| {
            let s = fd_wave_solve(n, t, &standing_ic, 1e-10, &[t], DEFAULT_MEMORY_CAP).unwrap().remove(0);
            let c = (omega() * t).cos();
            relative_grid_error(&s, &|x| c * standing(x))
        };
        let ratio = err(11) / err(21);
        assert!((3.0..=5.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn energy_is_nearly_conserved() {
        let ic = |x: &[f64]| {
            let r2: f64 = x.iter().map(|v| v * v).sum();
            vec![(-20.0 * r2).exp(), 0.0]
        };
        let snaps = fd_wave_solve(24, 0.5, &ic, 1e-6, &[0.0, 0.25, 0.5], DEFAULT_MEMORY_CAP).unwrap();
        let grid = Grid { n: 24 };
        let e0 = discrete_energy(grid, &snaps[0].phi, &snaps[0].psi);
        for s in &snaps[1..] {
            let e = discrete_energy(grid, &s.phi, &s.psi);
            assert!((e - e0).abs() <= 0.01 * e0, "{e} vs {e0}");
        }
    }

    #[test]
    fn laplacian_of_quadratic() {
        let grid = Grid { n: 9 };
        let phi: Vec<f64> = (0..grid.len()).map(|i| grid.point(i).iter().map(|v| v * v).sum()).collect();
        let mut out = vec![0.0; grid.len()];
        laplacian(grid, &phi, &mut out);
        for idx in 0..grid.len() {
            if grid.on_boundary(idx) {
                assert_eq!(out[idx], 0.0);
            } else {
                assert!((out[idx] - 6.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rejects_small_grids_and_memory_overruns() {
        assert!(matches!(Grid::new(7), Err(Error::Config(_))));
        let e = fd_wave_solve(512, 0.1, &standing_ic, 1e-4, &[0.1], 1 << 30).unwrap_err();
        assert!(matches!(e, Error::MemoryCap { .. }));
        assert!(e.to_string().contains("run out of memory"));
    }

    #[test]
    fn snapshot_round_trip_is_bit_exact() {
        let snaps = fd_wave_solve(8, 0.05, &standing_ic, 1e-4, &[0.05], DEFAULT_MEMORY_CAP).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("phi_t0.05.f64");
        write_snapshot(&path, &snaps[0]).unwrap();
        let back = read_snapshot(&path).unwrap();
        assert_eq!(back.t.to_bits(), snaps[0].t.to_bits());
        assert!(back.phi.iter().zip(&snaps[0].phi).all(|(a, b)| a.to_bits() == b.to_bits()));
        let sidecar: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("phi_t0.05.json")).unwrap()).unwrap();
        assert_eq!(sidecar["grid_n"], 8);
        fs::write(&path, [0u8; 7]).unwrap();
        assert!(matches!(read_snapshot(&path), Err(Error::Format(_))));
    }

    fn net_snapshot(spec: &NetworkSpec, theta: &ParamVector, n: usize, t: f64) -> FdSnapshot {
        let grid = Grid { n };
        let phi = forward_batch(spec, theta, &grid.points()).unwrap().column(0).iter().copied().collect();
        FdSnapshot { grid_n: n, t, phi, psi: Vec::new() }
    }

    #[test]
    fn self_comparison_and_zero_network() {
        let spec = NetworkSpec::new(3, 2, vec![8]).with_embedding(1, 1.0, 1.5).with_envelope(Envelope::DirichletCube);
        let theta = init_params(&spec, 4);
        let snap = net_snapshot(&spec, &theta, 12, 0.1);
        let c = grid_compare(&[0.0, 0.1], &[theta.clone(), theta.clone()], &spec, &snap, SliceSpec::Volume, 1e-9).unwrap();
        assert_eq!(c.discrepancy, 0.0);
        assert_eq!(c.network.len(), 12 * 12 * 12);
        let zero = ParamVector::zeros(&spec);
        let plane = SliceSpec::Plane { axis: 0, value: 0.0 };
        let c = grid_compare(&[0.1], &[zero], &spec, &snap, plane, 1e-9).unwrap();
        assert_eq!(c.discrepancy, 1.0);
        assert_eq!(c.points.nrows(), 144);
        // nearest plane to x = 0 on a 12-node grid
        assert!((c.points[(0, 0)].abs() - 1.0 / 11.0).abs() < 1e-12);
        assert!(grid_compare(&[0.2], &[theta], &spec, &snap, plane, 1e-6).is_err());
    }
}
