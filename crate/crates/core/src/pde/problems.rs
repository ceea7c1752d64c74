use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::metric::{christoffel, schwarzschild_metric, Metric};
use super::{FieldFn, OperatorFn, PdeProblem, SolutionFn};
use crate::error::{Error, Result};
use crate::network::{JetOrder, SpatialJet};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `exp(-|x - center|² / (2 width²))`.
pub fn gaussian_bump(center: Vec<f64>, width: f64) -> impl Fn(&[f64]) -> f64 + Send + Sync + Clone {
    move |x: &[f64]| {
        let d2: f64 = x.iter().zip(&center).map(|(a, c)| (a - c) * (a - c)).sum();
        (-d2 / (2.0 * width * width)).exp()
    }
}

/// `∂_t u = -c·∇u`, started from a Gaussian bump of width 0.25 at the origin.
/// The exact solution `u₀(x - ct)` ignores the boundary, so it is only
/// meaningful while the bump stays well inside the cube.
pub fn advection_problem(velocity: &[f64]) -> PdeProblem {
    let dim = velocity.len();
    let c = velocity.to_vec();
    let bump = gaussian_bump(vec![0.0; dim], 0.25);

    let cv = c.clone();
    let operator: OperatorFn = Arc::new(move |jet: &SpatialJet, _x: &[f64]| {
        let mut s = 0.0;
        for (i, ci) in cv.iter().enumerate() {
            s += ci * jet.grad[(0, i)];
        }
        Ok(vec![-s])
    });
    let b0 = bump.clone();
    let initial: FieldFn = Arc::new(move |x| vec![b0(x)]);
    let analytic: SolutionFn = Arc::new(move |x, t| {
        let shifted: Vec<f64> = x.iter().zip(&c).map(|(xi, ci)| xi - ci * t).collect();
        vec![bump(&shifted)]
    });
    PdeProblem::new("advection", dim, 1, JetOrder::Gradient, 0.5, operator, initial).with_analytic(analytic)
}

// f(s) = 2 s² exp(-200 s²) and f'(s).
fn radial_profile(s: f64) -> (f64, f64) {
    let e = (-200.0 * s * s).exp();
    (2.0 * s * s * e, (4.0 * s - 800.0 * s * s * s) * e)
}

/// `[φ, ψ]` for the outgoing spherical wave built on `f(s) = 2s² e^{-200s²}`.
///
/// `f(t - r)/r` solves the wave equation away from the origin only; for `t > 0`
/// it carries a point source of strength `f(t)`. The source-free solution with
/// the same data agrees with it outside the light cone `r > t` and vanishes
/// inside (d'Alembert for `rφ` with odd extension), and that is what is
/// returned here. At `t = 0` both coincide.
fn radial_wave(x: &[f64], t: f64) -> [f64; 2] {
    let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
    if t == 0.0 {
        let e = (-200.0 * r * r).exp();
        return [2.0 * r * e, (-4.0 + 800.0 * r * r) * e];
    }
    if r <= t {
        return [0.0, 0.0];
    }
    let (f, df) = radial_profile(t - r);
    [f / r, df / r]
}

/// Three-dimensional wave equation `φ_tt = Δφ` as the first-order system
/// `∂_t [φ, ψ] = [ψ, Δφ]`, final time 0.5.
pub fn wave_problem() -> PdeProblem {
    let operator: OperatorFn = Arc::new(|jet: &SpatialJet, _x: &[f64]| Ok(vec![jet.value[1], jet.laplacian(0)]));
    let initial: FieldFn = Arc::new(|x| radial_wave(x, 0.0).to_vec());
    let analytic: SolutionFn = Arc::new(|x, t| radial_wave(x, t).to_vec());
    PdeProblem::new("wave", 3, 2, JetOrder::Hessian, 0.5, operator, initial).with_analytic(analytic)
}

/// Fixed field `E(x) = ∇ exp(-|x|²) = -2x exp(-|x|²)`.
pub fn vlasov_field(x: &[f64]) -> [f64; 3] {
    let s = -2.0 * (-(x[0] * x[0] + x[1] * x[1] + x[2] * x[2])).exp();
    [s * x[0], s * x[1], s * x[2]]
}

/// Collisionless Vlasov equation in phase space `(x, v) ∈ [-1,1]³ × [-1,1]³`,
/// `∂_t u = -v·∇_x u - E(x)·∇_v u` with unit charge and mass.
pub fn vlasov_problem() -> PdeProblem {
    let operator: OperatorFn = Arc::new(|jet: &SpatialJet, x: &[f64]| {
        let e = vlasov_field(&x[..3]);
        let mut s = 0.0;
        for i in 0..3 {
            s += x[3 + i] * jet.grad[(0, i)] + e[i] * jet.grad[(0, 3 + i)];
        }
        Ok(vec![-s])
    });
    let var = 0.3f64 * 0.3;
    let norm = (2.0 * PI * var).powi(-3);
    let initial: FieldFn = Arc::new(move |z| {
        let r2: f64 = z.iter().map(|v| v * v).sum();
        vec![norm * (-r2 / (2.0 * var)).exp()]
    });
    PdeProblem::new("vlasov", 6, 1, JetOrder::Gradient, 0.5, operator, initial)
}

/// Particles in a harmonic trap with weak mutual coupling:
/// `∂_t u = DΔu - ∇·(hu)`, `h(x) = (a - x) + α(11ᵀ/d - I)x`,
/// with `a = 0.2·1`, `D = 0.01`, `α = 1/4`.
pub fn fokker_planck_problem(d: usize) -> Result<PdeProblem> {
    if !(1..=20).contains(&d) {
        return Err(Error::Config(format!("fokker_planck dimension must be in 1..=20, got {d}")));
    }
    const DIFFUSION: f64 = 0.01;
    const ALPHA: f64 = 0.25;
    const A: f64 = 0.2;
    let div_h = -(d as f64) + ALPHA * (1.0 - d as f64);

    let operator: OperatorFn = Arc::new(move |jet: &SpatialJet, x: &[f64]| {
        let mean = x.iter().sum::<f64>() / d as f64;
        let mut drift = 0.0;
        for (i, &xi) in x.iter().enumerate() {
            let h = (A - xi) + ALPHA * (mean - xi);
            drift += h * jet.grad[(0, i)];
        }
        Ok(vec![DIFFUSION * jet.laplacian(0) - drift - jet.value[0] * div_h])
    });
    let initial: FieldFn = Arc::new(move |x| vec![0.75f64.powi(d as i32) * x.iter().map(|v| 1.0 - v * v).product::<f64>()]);
    Ok(PdeProblem::new("fokker_planck", d, 1, JetOrder::Hessian, 0.5, operator, initial))
}

/// Sum of two Gaussian wave packets in three dimensions:
///
/// `u₀(x) = 30(2πs₁²)⁻¹ e^{-|v|²/2s₁²} cos(2πf x·n) + 24(2πs₂²)⁻¹ e^{-|w|²/2s₂²} cos(2πf x·m)`
///
/// with `v = x - (e₂ + e₃)/2`, `w = x + (e₁ + e₂ + e₃)/6`, `n = (e₁ + e₂)/√2`
/// and `m = (e₂ + x₁e₁/3)/2`. Note that `m` depends on `x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WavePacket {
    pub f: f64,
    pub s1: f64,
    pub s2: f64,
}

impl Default for WavePacket {
    fn default() -> Self {
        WavePacket { f: 2.0, s1: 0.1, s2: 0.15 }
    }
}

impl WavePacket {
    pub fn new(f: f64, s1: f64, s2: f64) -> Result<Self> {
        if !(s1 > 0.0 && s2 > 0.0 && f >= 0.0) {
            return Err(Error::Config(format!("wave packet needs s1, s2 > 0 and f >= 0 (got f={f}, s1={s1}, s2={s2})")));
        }
        Ok(WavePacket { f, s1, s2 })
    }

    pub fn first(&self, x: &[f64]) -> f64 {
        let v = [x[0], x[1] - 0.5, x[2] - 0.5];
        let s2 = self.s1 * self.s1;
        let phase = 2.0 * PI * self.f * (x[0] + x[1]) * FRAC_1_SQRT_2;
        30.0 / (2.0 * PI * s2) * (-dot(&v, &v) / (2.0 * s2)).exp() * phase.cos()
    }

    pub fn second(&self, x: &[f64]) -> f64 {
        let w = [x[0] + 1.0 / 6.0, x[1] + 1.0 / 6.0, x[2] + 1.0 / 6.0];
        let s2 = self.s2 * self.s2;
        let xm = 0.5 * (x[1] + x[0] * x[0] / 3.0);
        let phase = 2.0 * PI * self.f * xm;
        24.0 / (2.0 * PI * s2) * (-dot(&w, &w) / (2.0 * s2)).exp() * phase.cos()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.first(x) + self.second(x)
    }
}

/// Fitting-only problem: `L ≡ 0`, so `u(x, t) = u₀(x)` is stationary.
pub fn fit_only_problem(packet: WavePacket) -> PdeProblem {
    let operator: OperatorFn = Arc::new(|_, _| Ok(vec![0.0]));
    let initial: FieldFn = Arc::new(move |x| vec![packet.value(x)]);
    let analytic: SolutionFn = Arc::new(move |x, _| vec![packet.value(x)]);
    PdeProblem::new("fit_only", 3, 1, JetOrder::Value, 0.1, operator, initial).with_analytic(analytic)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WaveMapsIc {
    WavePacket(WavePacket),
}

impl Default for WaveMapsIc {
    fn default() -> Self {
        WaveMapsIc::WavePacket(WavePacket::default())
    }
}

/// `∂_t [φ, ψ]` for the wave maps equation
/// `g^{μν}∂_μ∂_νφ - g^{μν}Γ^σ_{μν}∂_σφ = 0` on a static metric without
/// time-space terms:
/// `∂_tψ = -(1/g^{tt}) [g^{ij}∂_i∂_jφ - g^{μν}Γ^t_{μν}ψ - g^{μν}Γ^k_{μν}∂_kφ]`.
pub fn wave_maps_operator(metric: &Metric, jet: &SpatialJet, x: &[f64]) -> Result<Vec<f64>> {
    let gtt_inv = 1.0 / metric.g_tt(x)?;
    let hinv = metric.g_spatial_inv(x)?;
    let gamma = christoffel(metric, x)?;

    // g^{μν} Γ^σ_{μν}
    let mut contracted = [0.0; 4];
    for (s, c) in contracted.iter_mut().enumerate() {
        let mut v = gtt_inv * gamma[s][0][0];
        for i in 0..3 {
            for j in 0..3 {
                v += hinv[(i, j)] * gamma[s][i + 1][j + 1];
            }
        }
        *c = v;
    }
    let hess = &jet.hess[0];
    let mut second = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            second += hinv[(i, j)] * hess[(i, j)];
        }
    }
    let psi = jet.value[1];
    let mut first = contracted[0] * psi;
    for k in 0..3 {
        first += contracted[k + 1] * jet.grad[(0, k)];
    }
    Ok(vec![psi, -(second - first) / gtt_inv])
}

/// Wave maps on the Schwarzschild background, final time 0.5.
pub fn wave_maps_problem(ic: WaveMapsIc) -> PdeProblem {
    wave_maps_problem_with(schwarzschild_metric(), ic)
}

pub fn wave_maps_problem_with(metric: Metric, ic: WaveMapsIc) -> PdeProblem {
    let operator: OperatorFn = Arc::new(move |jet: &SpatialJet, x: &[f64]| wave_maps_operator(&metric, jet, x));
    let initial: FieldFn = match ic {
        WaveMapsIc::WavePacket(p) => Arc::new(move |x| vec![p.value(x), 0.0]),
    };
    PdeProblem::new("wave_maps", 3, 2, JetOrder::Hessian, 0.5, operator, initial)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, Matrix4};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_jet(k: usize, dim: usize, rng: &mut ChaCha8Rng) -> SpatialJet {
        let mut jet = SpatialJet::zeros(k, dim, JetOrder::Hessian);
        for v in jet.value.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        for v in jet.grad.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        for h in jet.hess.iter_mut() {
            for i in 0..dim {
                for j in i..dim {
                    let v = rng.random_range(-2.0..2.0);
                    h[(i, j)] = v;
                    h[(j, i)] = v;
                }
            }
        }
        jet
    }

    fn random_point(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..dim).map(|_| rng.random_range(-0.99..0.99)).collect()
    }

    fn combine(a: f64, u: &SpatialJet, b: f64, w: &SpatialJet) -> SpatialJet {
        SpatialJet {
            value: u.value.iter().zip(&w.value).map(|(x, y)| a * x + b * y).collect(),
            grad: &u.grad * a + &w.grad * b,
            hess: u.hess.iter().zip(&w.hess).map(|(x, y)| x * a + y * b).collect(),
        }
    }

    // u = |x|² as a jet, with ψ = 0
    fn radial_square_jet(x: &[f64], k: usize) -> SpatialJet {
        let d = x.len();
        let mut jet = SpatialJet::zeros(k, d, JetOrder::Hessian);
        jet.value[0] = x.iter().map(|v| v * v).sum();
        for i in 0..d {
            jet.grad[(0, i)] = 2.0 * x[i];
        }
        jet.hess[0] = DMatrix::identity(d, d) * 2.0;
        jet
    }

    #[test]
    fn advection_examples() {
        let p = advection_problem(&[1.0, 0.0, 0.0]);
        let x = [0.2, -0.3, 0.1];
        let constant = SpatialJet { value: vec![3.0], grad: DMatrix::zeros(1, 3), hess: vec![] };
        assert_eq!(p.operator(&constant, &x).unwrap(), vec![0.0]);
        let linear = SpatialJet { value: vec![0.2], grad: DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]), hess: vec![] };
        assert_eq!(p.operator(&linear, &x).unwrap(), vec![-1.0]);
    }

    #[test]
    fn advection_analytic_is_shifted_bump() {
        let c = [0.5, -0.25, 1.0];
        let p = advection_problem(&c);
        let t = 0.3;
        let pts = [[0.0, 0.0, 0.0], [0.15, -0.075, 0.3], [0.5, 0.5, 0.5], [-0.2, 0.1, 0.9], [0.9, -0.9, 0.0]];
        for x in pts {
            let d2: f64 = (0..3).map(|i| (x[i] - c[i] * t).powi(2)).sum();
            let want = (-d2 / (2.0 * 0.0625)).exp();
            assert!((p.analytic_solution(&x, t).unwrap()[0] - want).abs() < 1e-15);
        }
        assert_eq!(p.analytic_solution(&[0.15, -0.075, 0.3], t).unwrap()[0], 1.0);
    }

    #[test]
    fn wave_examples() {
        let p = wave_problem();
        assert_eq!((p.dim(), p.components(), p.final_time()), (3, 2, 0.5));
        assert_eq!(p.analytic_solution(&[0.0; 3], 0.0).unwrap()[0], 0.0);
        for r in [0.01, 0.05, 0.1, 0.3] {
            let x = [r / 3f64.sqrt(); 3];
            let want = 2.0 * r * (-200.0 * r * r).exp();
            assert!((p.initial_condition(&x)[0] - want).abs() < 1e-15);
        }
        let x = [0.1, 0.2, -0.3];
        let mut constant = SpatialJet::zeros(2, 3, JetOrder::Hessian);
        constant.value = vec![4.0, 0.0];
        assert_eq!(p.operator(&constant, &x).unwrap(), vec![0.0, 0.0]);
        let sq = radial_square_jet(&x, 2);
        assert_eq!(p.operator(&sq, &x).unwrap(), vec![0.0, 6.0]);
    }

    #[test]
    fn wave_analytic_matches_formula_outside_cone_and_is_continuous() {
        let p = wave_problem();
        let t = 0.1;
        for r in [0.11, 0.15, 0.3, 0.8] {
            let x = [0.0, r, 0.0];
            let s: f64 = t - r;
            let want = 2.0 * s * s * (-200.0 * s * s).exp() / r;
            assert!((p.analytic_solution(&x, t).unwrap()[0] - want).abs() < 1e-15);
        }
        assert_eq!(p.analytic_solution(&[0.0, 0.05, 0.0], t).unwrap(), vec![0.0, 0.0]);
        let just_out = p.analytic_solution(&[0.0, t + 1e-7, 0.0], t).unwrap();
        assert!(just_out[0].abs() < 1e-12 && just_out[1].abs() < 1e-5);
    }

    #[test]
    fn wave_analytic_solves_the_pde_off_the_origin() {
        // central differences in t and x of the closed form
        let p = wave_problem();
        let u = |x: &[f64], t: f64| p.analytic_solution(x, t).unwrap();
        let h = 1e-4;
        let t = 0.1;
        for x in [[0.2, 0.1, 0.05], [0.0, 0.35, -0.1], [-0.15, -0.15, 0.15]] {
            let phi_tt = (u(&x, t + h)[0] - 2.0 * u(&x, t)[0] + u(&x, t - h)[0]) / (h * h);
            let mut lap = 0.0;
            for i in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                lap += (u(&xp, t)[0] - 2.0 * u(&x, t)[0] + u(&xm, t)[0]) / (h * h);
            }
            assert!((phi_tt - lap).abs() < 1e-3 * lap.abs().max(1.0), "{phi_tt} vs {lap}");
            let psi_fd = (u(&x, t + h)[0] - u(&x, t - h)[0]) / (2.0 * h);
            assert!((psi_fd - u(&x, t)[1]).abs() < 1e-5 * psi_fd.abs().max(1.0));
        }
    }

    #[test]
    fn vlasov_examples() {
        let p = vlasov_problem();
        assert_eq!((p.dim(), p.components()), (6, 1));
        assert_eq!(vlasov_field(&[0.0; 3]), [0.0; 3]);
        let e = vlasov_field(&[1.0, 0.0, 0.0]);
        assert!((e[0] + 2.0 * (-1.0f64).exp()).abs() < 1e-15 && e[1] == 0.0 && e[2] == 0.0);
        let mut jet = SpatialJet::zeros(1, 6, JetOrder::Gradient);
        jet.value[0] = 2.5;
        assert_eq!(p.operator(&jet, &[0.1, 0.2, 0.3, -0.4, 0.5, -0.6]).unwrap()[0], 0.0);
        // product of two 3D normal densities with σ = 0.3
        let peak = (2.0 * PI * 0.09f64).powi(-3);
        assert!((p.initial_condition(&[0.0; 6])[0] - peak).abs() < 1e-12 * peak);
    }

    #[test]
    fn fokker_planck_examples() {
        assert!(fokker_planck_problem(0).is_err());
        assert!(fokker_planck_problem(21).is_err());
        let p = fokker_planck_problem(8).unwrap();
        let x = [0.1, -0.2, 0.3, 0.0, 0.5, -0.5, 0.9, 0.2];
        let c = 1.7;
        let mut jet = SpatialJet::zeros(1, 8, JetOrder::Hessian);
        jet.value[0] = c;
        let div_h = -8.0 + 0.25 * -7.0;
        assert_eq!(div_h, -9.75);
        assert!((p.operator(&jet, &x).unwrap()[0] + c * div_h).abs() < 1e-14);
    }

    #[test]
    fn fokker_planck_drift_matches_divergence_by_differences() {
        // L[u] for u = x_j equals -h_j - x_j ∇·h; h_j recovered this way must
        // have the stated constant divergence.
        let d = 5;
        let p = fokker_planck_problem(d).unwrap();
        let h_at = |x: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|j| {
                    let mut jet = SpatialJet::zeros(1, d, JetOrder::Hessian);
                    jet.grad[(0, j)] = 1.0;
                    -p.operator(&jet, x).unwrap()[0]
                })
                .collect()
        };
        let x = [0.3, -0.1, 0.2, 0.7, -0.6];
        let eps = 1e-6;
        let mut div = 0.0;
        for j in 0..d {
            let mut xp = x;
            let mut xm = x;
            xp[j] += eps;
            xm[j] -= eps;
            div += (h_at(&xp)[j] - h_at(&xm)[j]) / (2.0 * eps);
        }
        assert!((div - (-(d as f64) + 0.25 * (1.0 - d as f64))).abs() < 1e-7);
    }

    #[test]
    fn fokker_planck_ic_integrates_to_one() {
        for d in [1, 3, 8] {
            let p = fokker_planck_problem(d).unwrap();
            let n = 200_000;
            let x = super::super::sample_cube(d, n, 17);
            let vol = 2f64.powi(d as i32);
            let vals: Vec<f64> = (0..n)
                .map(|i| vol * p.initial_condition(&x.row(i).iter().copied().collect::<Vec<_>>())[0])
                .collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!((mean - 1.0).abs() <= 3.0 * se, "d={d}: {mean} ± {se}");
        }
    }

    #[test]
    fn wave_packet_examples() {
        let p = WavePacket::new(0.0, 0.1, 0.15).unwrap();
        let x = [0.05, -0.3, 0.4];
        let g1 = 30.0 / (2.0 * PI * 0.01) * (-(0.0025 + 0.64 + 0.01) / 0.02f64).exp();
        let w2 = (0.05f64 + 1.0 / 6.0).powi(2) + (-0.3f64 + 1.0 / 6.0).powi(2) + (0.4f64 + 1.0 / 6.0).powi(2);
        let g2 = 24.0 / (2.0 * PI * 0.0225) * (-w2 / 0.045).exp();
        assert!((p.value(&x) - (g1 + g2)).abs() < 1e-12 * (g1 + g2));

        let q = WavePacket::new(2.0, 0.1, 0.15).unwrap();
        let c = [0.0, 0.5, 0.5];
        let phase = 2.0 * PI * 2.0 * 0.5 * FRAC_1_SQRT_2;
        let want1 = 30.0 / (2.0 * PI * 0.01) * phase.cos();
        assert!((q.first(&c) - want1).abs() < 1e-12 * want1.abs());
        let w: [f64; 3] = [1.0 / 6.0, 0.5 + 1.0 / 6.0, 0.5 + 1.0 / 6.0];
        let want2 = 24.0 / (2.0 * PI * 0.0225)
            * (-(w[0] * w[0] + w[1] * w[1] + w[2] * w[2]) / 0.045).exp()
            * (2.0 * PI * 2.0 * 0.25f64).cos();
        assert!((q.value(&c) - want1 - want2).abs() < 1e-12 * want1.abs());
    }

    #[test]
    fn wave_packet_first_term_reflection_symmetric_without_oscillation() {
        let p = WavePacket::new(0.0, 0.1, 0.15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(-0.3..0.3)).collect();
            let a = [v[0], 0.5 + v[1], 0.5 + v[2]];
            let b = [-v[0], 0.5 - v[1], 0.5 - v[2]];
            assert!((p.first(&a) - p.first(&b)).abs() <= 1e-12 * p.first(&a).abs().max(1e-300));
        }
        assert!(WavePacket::new(1.0, 0.0, 0.1).is_err());
    }

    #[test]
    fn fit_only_is_stationary() {
        let p = fit_only_problem(WavePacket::new(5.0, 0.1, 0.15).unwrap());
        let jet = SpatialJet::zeros(1, 3, JetOrder::Value);
        let x = [0.1, 0.2, 0.3];
        assert_eq!(p.operator(&jet, &x).unwrap(), vec![0.0]);
        assert_eq!(p.analytic_solution(&x, 0.05).unwrap(), p.initial_condition(&x));
    }

    #[test]
    fn wave_maps_trivial_cases() {
        let p = wave_maps_problem(WaveMapsIc::default());
        assert_eq!((p.components(), p.final_time()), (2, 0.5));
        let mut jet = SpatialJet::zeros(2, 3, JetOrder::Hessian);
        jet.value = vec![1.3, 0.0];
        let out = p.operator(&jet, &[0.2, -0.4, 0.6]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
        assert_eq!(p.initial_condition(&[0.0, 0.5, 0.5])[1], 0.0);
    }

    #[test]
    fn wave_maps_flat_limit_equals_wave() {
        let flat = wave_maps_problem_with(Metric::flat(), WaveMapsIc::default());
        let wave = wave_problem();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let jet = random_jet(2, 3, &mut rng);
            let x = random_point(3, &mut rng);
            let a = flat.operator(&jet, &x).unwrap();
            let b = wave.operator(&jet, &x).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() <= 1e-10 * v.abs().max(1.0));
            }
        }
    }

    #[test]
    fn wave_maps_reduction_matches_covariant_contraction() {
        // φ(x, t) = sin(t) x₁: the full equation evaluated with the true φ_tt
        // must equal g^{tt}(φ_tt - ∂_tψ) where ∂_tψ comes from the reduction.
        let m = schwarzschild_metric();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = random_point(3, &mut rng);
            let t: f64 = rng.random_range(0.0..1.0);
            let mut g = Matrix4::zeros();
            g[(0, 0)] = m.g_tt(&x).unwrap();
            let gs = m.g_spatial(&x).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    g[(i + 1, j + 1)] = gs[(i, j)];
                }
            }
            let ginv = g.try_inverse().unwrap();
            let gamma = christoffel(&m, &x).unwrap();
            let mut d2 = Matrix4::zeros();
            d2[(0, 0)] = -t.sin() * x[0];
            d2[(0, 1)] = t.cos();
            d2[(1, 0)] = t.cos();
            let d1 = [t.cos() * x[0], t.sin(), 0.0, 0.0];
            let mut direct = 0.0;
            for mu in 0..4 {
                for nu in 0..4 {
                    let mut conn = 0.0;
                    for s in 0..4 {
                        conn += gamma[s][mu][nu] * d1[s];
                    }
                    direct += ginv[(mu, nu)] * (d2[(mu, nu)] - conn);
                }
            }
            let mut jet = SpatialJet::zeros(2, 3, JetOrder::Hessian);
            jet.value = vec![t.sin() * x[0], t.cos() * x[0]];
            jet.grad[(0, 0)] = t.sin();
            let out = wave_maps_operator(&m, &jet, &x).unwrap();
            assert_eq!(out[0], jet.value[1]);
            let reduced = ginv[(0, 0)] * (d2[(0, 0)] - out[1]);
            assert!((direct - reduced).abs() < 1e-8, "{direct} vs {reduced}");
        }
    }

    #[test]
    fn wave_maps_propagates_domain_error() {
        let p = wave_maps_problem(WaveMapsIc::default());
        let jet = SpatialJet::zeros(2, 3, JetOrder::Hessian);
        assert!(matches!(p.operator(&jet, &[-1.2, 0.0, 0.0]), Err(Error::Domain(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn operators_are_linear_in_the_jet(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let problems = [
                advection_problem(&[0.3, -1.0, 0.5]),
                wave_problem(),
                vlasov_problem(),
                fokker_planck_problem(4).unwrap(),
                wave_maps_problem(WaveMapsIc::default()),
            ];
            for p in &problems {
                let x = random_point(p.dim(), &mut rng);
                let u = random_jet(p.components(), p.dim(), &mut rng);
                let w = random_jet(p.components(), p.dim(), &mut rng);
                let lhs = p.operator(&combine(a, &u, b, &w), &x).unwrap();
                let lu = p.operator(&u, &x).unwrap();
                let lw = p.operator(&w, &x).unwrap();
                for c in 0..p.components() {
                    let rhs = a * lu[c] + b * lw[c];
                    let scale = (a * lu[c]).abs() + (b * lw[c]).abs() + 1.0;
                    prop_assert!((lhs[c] - rhs).abs() <= 1e-12 * scale, "{}: {} vs {}", p.name(), lhs[c], rhs);
                }
            }
        }
    }
}
