//! Static Schwarzschild background in shifted Cartesian coordinates.
//!
//! Index 0 is time in every 4-index object; spatial indices are 1..=3.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// `Γ[σ][μ][ν]`, upper index first.
pub type Christoffel = [[[f64; 4]; 4]; 4];

/// Static metric with no time-space cross terms:
/// `ds² = g_tt dt² + g_ij dx^i dx^j`, with
/// `g_tt = -(1 - r_s/r)` and `g_ij = δ_ij + r_s y_i y_j / (r² (r - r_s))`
/// where `y = x - c` and `r = |y|`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metric {
    pub r_s: f64,
    pub center: [f64; 3],
}

/// `r_s = 1`, centered at `(-2, 0, 0)`; the horizon touches the cube only at `(-1, 0, 0)`.
pub fn schwarzschild_metric() -> Metric {
    Metric { r_s: 1.0, center: [-2.0, 0.0, 0.0] }
}

impl Metric {
    pub fn flat() -> Self {
        Metric { r_s: 0.0, center: [0.0; 3] }
    }

    fn offset(&self, x: &[f64]) -> Result<(Vector3<f64>, f64)> {
        if x.len() != 3 {
            return Err(Error::DimensionMismatch { what: "metric point", expected: 3, got: x.len() });
        }
        let y = Vector3::new(x[0] - self.center[0], x[1] - self.center[1], x[2] - self.center[2]);
        let r = y.norm();
        if self.r_s > 0.0 && !(r > self.r_s) {
            return Err(Error::Domain(format!(
                "point {x:?} is at r = {r} <= r_s = {} (on or inside the event horizon)",
                self.r_s
            )));
        }
        Ok((y, r))
    }

    // a(r) = r_s / (r² (r - r_s)) and its radial derivative.
    fn a_coeff(&self, r: f64) -> (f64, f64) {
        if self.r_s == 0.0 {
            return (0.0, 0.0);
        }
        let rs = self.r_s;
        let den = r * r * r - rs * r * r;
        let a = rs / den;
        let da = -rs * (3.0 * r * r - 2.0 * rs * r) / (den * den);
        (a, da)
    }

    pub fn g_tt(&self, x: &[f64]) -> Result<f64> {
        let (_, r) = self.offset(x)?;
        if self.r_s == 0.0 {
            return Ok(-1.0);
        }
        Ok(-(1.0 - self.r_s / r))
    }

    /// `∂_k g_tt = -r_s y_k / r³`.
    pub fn dg_tt(&self, x: &[f64]) -> Result<[f64; 3]> {
        let (y, r) = self.offset(x)?;
        if self.r_s == 0.0 {
            return Ok([0.0; 3]);
        }
        let s = -self.r_s / (r * r * r);
        Ok([s * y[0], s * y[1], s * y[2]])
    }

    pub fn g_spatial(&self, x: &[f64]) -> Result<Matrix3<f64>> {
        let (y, r) = self.offset(x)?;
        let (a, _) = self.a_coeff(r);
        let mut g = Matrix3::identity();
        for i in 0..3 {
            for j in i..3 {
                let v = a * y[i] * y[j];
                g[(i, j)] += v;
                if j != i {
                    g[(j, i)] += v;
                }
            }
        }
        Ok(g)
    }

    /// `[k]` holds `∂_k g_ij`.
    pub fn dg_spatial(&self, x: &[f64]) -> Result<[Matrix3<f64>; 3]> {
        let (y, r) = self.offset(x)?;
        let (a, da) = self.a_coeff(r);
        let mut out = [Matrix3::zeros(); 3];
        for (k, dk) in out.iter_mut().enumerate() {
            let radial = da * y[k] / r;
            for i in 0..3 {
                for j in i..3 {
                    let mut v = radial * y[i] * y[j];
                    if i == k {
                        v += a * y[j];
                    }
                    if j == k {
                        v += a * y[i];
                    }
                    dk[(i, j)] = v;
                    dk[(j, i)] = v;
                }
            }
        }
        Ok(out)
    }

    /// Inverse spatial metric in closed form: `δ_ij - r_s y_i y_j / r³`.
    pub fn g_spatial_inv(&self, x: &[f64]) -> Result<Matrix3<f64>> {
        let (y, r) = self.offset(x)?;
        let mut h = Matrix3::identity();
        if self.r_s == 0.0 {
            return Ok(h);
        }
        let s = self.r_s / (r * r * r);
        for i in 0..3 {
            for j in i..3 {
                let v = s * y[i] * y[j];
                h[(i, j)] -= v;
                if j != i {
                    h[(j, i)] -= v;
                }
            }
        }
        Ok(h)
    }
}

/// Christoffel symbols of the second kind. Time derivatives vanish (static
/// metric) and the time-space block of `g` is zero, which leaves
/// `Γ^t_{tk}`, `Γ^k_{tt}` and `Γ^k_{ij}` as the only nonzero families.
pub fn christoffel(metric: &Metric, x: &[f64]) -> Result<Christoffel> {
    let gtt = metric.g_tt(x)?;
    let dgtt = metric.dg_tt(x)?;
    let hinv = metric.g_spatial_inv(x)?;
    let dg = metric.dg_spatial(x)?;
    let mut gamma = [[[0.0; 4]; 4]; 4];

    for k in 0..3 {
        let v = 0.5 * dgtt[k] / gtt;
        gamma[0][0][k + 1] = v;
        gamma[0][k + 1][0] = v;
    }
    for k in 0..3 {
        let mut v = 0.0;
        for l in 0..3 {
            v += hinv[(k, l)] * dgtt[l];
        }
        gamma[k + 1][0][0] = -0.5 * v;
    }
    for k in 0..3 {
        for i in 0..3 {
            for j in i..3 {
                let mut v = 0.0;
                for l in 0..3 {
                    v += hinv[(k, l)] * (dg[i][(l, j)] + dg[j][(l, i)] - dg[l][(i, j)]);
                }
                gamma[k + 1][i + 1][j + 1] = 0.5 * v;
                gamma[k + 1][j + 1][i + 1] = 0.5 * v;
            }
        }
    }
    Ok(gamma)
}
