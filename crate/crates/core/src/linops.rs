//! Matrix-free symmetric linear algebra.
//!
//! Operators only expose a matrix-vector product. On top of that: preconditioned
//! conjugate gradients, the randomized Nyström approximation and the
//! preconditioner built from it, Tikhonov shifts, and two dense helpers (ridge
//! least squares and full spectra of small operators).

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};

/// Largest operator that [`dense_spectrum`] assembles by default.
pub const DEFAULT_DENSE_CAP: usize = 4000;

type Mvm<'a> = Box<dyn Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync + 'a>;

/// Symmetric linear map known only through its action.
pub struct SymmetricOperator<'a> {
    dim: usize,
    psd: bool,
    mvm: Mvm<'a>,
    mvms: AtomicUsize,
}

impl<'a> SymmetricOperator<'a> {
    pub fn new<F>(dim: usize, psd: bool, mvm: F) -> Self
    where
        F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync + 'a,
    {
        SymmetricOperator { dim, psd, mvm: Box::new(mvm), mvms: AtomicUsize::new(0) }
    }

    /// Wraps a dense matrix, which is symmetrized.
    pub fn from_dense(a: DMatrix<f64>, psd: bool) -> SymmetricOperator<'static> {
        assert_eq!(a.nrows(), a.ncols(), "operator matrix must be square");
        let a = (&a + a.transpose()) * 0.5;
        SymmetricOperator::new(a.nrows(), psd, move |v| Ok(&a * v))
    }

    pub fn identity(dim: usize) -> SymmetricOperator<'static> {
        SymmetricOperator::new(dim, true, |v| Ok(v.clone()))
    }

    pub fn zero(dim: usize) -> SymmetricOperator<'static> {
        SymmetricOperator::new(dim, true, move |v| Ok(DVector::zeros(v.len())))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_psd(&self) -> bool {
        self.psd
    }

    /// Number of products computed so far.
    pub fn mvm_count(&self) -> usize {
        self.mvms.load(Ordering::Relaxed)
    }

    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch { what: "operator input", expected: self.dim, got: v.len() });
        }
        self.mvms.fetch_add(1, Ordering::Relaxed);
        (self.mvm)(v)
    }

    /// Product that does not count toward telemetry (probes, assertions).
    pub(crate) fn apply_uncounted(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        (self.mvm)(v)
    }

    /// Largest `|<u, Av> - <Au, v>|` over random probe pairs, relative to `|u||v|`.
    pub fn symmetry_defect(&self, probes: usize, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..probes {
            let u = gaussian_vector(self.dim, &mut rng);
            let v = gaussian_vector(self.dim, &mut rng);
            let lhs = u.dot(&self.apply_uncounted(&v)?);
            let rhs = self.apply_uncounted(&u)?.dot(&v);
            worst = worst.max((lhs - rhs).abs() / (u.norm() * v.norm()));
        }
        Ok(worst)
    }
}

impl fmt::Debug for SymmetricOperator<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SymmetricOperator")
            .field("dim", &self.dim)
            .field("psd", &self.psd)
            .field("mvms", &self.mvm_count())
            .finish()
    }
}

/// `v ↦ Av + μv`.
pub fn shifted<'a>(a: &'a SymmetricOperator<'_>, mu: f64) -> SymmetricOperator<'a> {
    SymmetricOperator::new(a.dim(), a.is_psd() && mu >= 0.0, move |v| {
        let mut out = a.apply(v)?;
        out.axpy(mu, v, 1.0);
        Ok(out)
    })
}

pub(crate) fn gaussian_vector(dim: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| StandardNormal.sample(rng))
}

pub(crate) fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Outcome of an iterative solve.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub iterations: usize,
    /// Relative residual `|b - Ax| / |b|` of the returned iterate.
    pub final_residual: f64,
    pub converged: bool,
    pub mvms: usize,
}

impl fmt::Display for SolveStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} iterations, relative residual {:.3e}, {} products, converged = {}",
            self.iterations, self.final_residual, self.mvms, self.converged
        )
    }
}

pub trait Preconditioner {
    /// Applies the inverse preconditioner `P^{-1} r`.
    fn apply_inverse(&self, r: &DVector<f64>) -> DVector<f64>;
}

/// Preconditioned conjugate gradients.
///
/// Stops when `|r_k| / |b| <= tol`; the recursive residual is confirmed against
/// the true residual before reporting convergence. On hitting `maxiter` the
/// iterate with the smallest residual seen is returned with `converged = false`.
pub fn cg_solve(
    a: &SymmetricOperator<'_>,
    b: &DVector<f64>,
    precond: Option<&dyn Preconditioner>,
    tol: f64,
    maxiter: usize,
    x0: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, SolveStats)> {
    if b.len() != a.dim() {
        return Err(Error::DimensionMismatch { what: "right-hand side", expected: a.dim(), got: b.len() });
    }
    if !(tol > 0.0) {
        return Err(Error::Config(format!("CG tolerance must be positive, got {tol}")));
    }
    let start = a.mvm_count();
    let bnorm = b.norm();
    let mut x = x0.cloned().unwrap_or_else(|| DVector::zeros(b.len()));
    if bnorm == 0.0 {
        let x = DVector::zeros(b.len());
        return Ok((x, SolveStats { converged: true, ..Default::default() }));
    }
    let mut r = match x0 {
        Some(x0) => b - a.apply(x0)?,
        None => b.clone(),
    };
    let mut rel = r.norm() / bnorm;
    let mut best = (rel, x.clone());
    let stats = |iterations, final_residual, converged, a: &SymmetricOperator<'_>| SolveStats {
        iterations,
        final_residual,
        converged,
        mvms: a.mvm_count() - start,
    };
    if rel <= tol {
        return Ok((x, stats(0, rel, true, a)));
    }

    let precondition = |r: &DVector<f64>| match precond {
        Some(p) => p.apply_inverse(r),
        None => r.clone(),
    };
    let mut z = precondition(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let mut iterations = 0;
    for k in 1..=maxiter {
        iterations = k;
        let ap = a.apply(&p)?;
        let pap = p.dot(&ap);
        if !pap.is_finite() {
            return Err(Error::NonFinite { stage: "conjugate gradients (p^T A p)", index: k });
        }
        if pap <= 0.0 {
            // breakdown: the operator is not positive definite along p
            break;
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        rel = r.norm() / bnorm;
        if rel < best.0 {
            best = (rel, x.clone());
        }
        if rel <= tol {
            let true_r = b - a.apply(&x)?;
            let true_rel = true_r.norm() / bnorm;
            if true_rel <= tol {
                return Ok((x, stats(k, true_rel, true, a)));
            }
            best = (true_rel, x.clone());
            r = true_r;
            z = precondition(&r);
            p = z.clone();
            rz = r.dot(&z);
            continue;
        }
        z = precondition(&r);
        let rz_next = r.dot(&z);
        p *= rz_next / rz;
        p += &z;
        rz = rz_next;
    }
    let (rel, x) = best;
    Ok((x, stats(iterations, rel, false, a)))
}

/// Low-rank eigendecomposition `U diag(eigs) U^T` of a randomized Nyström approximation.
#[derive(Clone, Debug)]
pub struct NystromApprox {
    /// `p x ℓ`, orthonormal columns.
    pub u: DMatrix<f64>,
    /// Descending, non-negative.
    pub eigs: DVector<f64>,
}

impl NystromApprox {
    pub fn rank(&self) -> usize {
        self.eigs.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut scaled = self.u.clone();
        for (mut col, &e) in scaled.column_iter_mut().zip(self.eigs.iter()) {
            col *= e;
        }
        scaled * self.u.transpose()
    }
}

/// Randomized Nyström approximation `(AΩ)(Ω^T A Ω)^{-1}(AΩ)^T` from a Gaussian
/// test matrix `Ω` (`p x ℓ`, orthonormalized).
///
/// The core matrix is factored after a small shift `ν` is added to `AΩ`;
/// `ν` is subtracted from the recovered eigenvalues (floored at zero). If the
/// shifted core is still not numerically positive definite the shift grows,
/// starting from a multiple of its trace.
pub fn nystrom_approx(a: &SymmetricOperator<'_>, rank: usize, seed: u64) -> Result<NystromApprox> {
    let p = a.dim();
    if rank == 0 || rank > p {
        return Err(Error::Config(format!("Nyström rank must be in 1..={p}, got {rank}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = gaussian_matrix(p, rank, &mut rng);
    let omega = omega.qr().q();

    let mut y = DMatrix::zeros(p, rank);
    for j in 0..rank {
        let col = a.apply(&omega.column(j).into_owned())?;
        y.set_column(j, &col);
    }

    let mut shift = (p as f64).sqrt() * f64::EPSILON * y.norm();
    let core = omega.transpose() * &y;
    let core = (&core + core.transpose()) * 0.5;
    let trace = core.trace().abs();
    let mut attempts = 0;
    let chol = loop {
        let mut shifted = core.clone();
        for i in 0..rank {
            shifted[(i, i)] += shift;
        }
        if let Some(c) = shifted.cholesky() {
            break c;
        }
        attempts += 1;
        if attempts > 12 {
            return Err(Error::Singular("Nyström core matrix is not positive definite".into()));
        }
        shift = (10.0 * shift).max(f64::EPSILON * trace.max(f64::MIN_POSITIVE));
    };
    let y_shift = &y + &omega * shift;
    // B = Y_ν L^{-T}  <=>  B^T = L^{-1} Y_ν^T
    let bt = chol
        .l()
        .solve_lower_triangular(&y_shift.transpose())
        .ok_or_else(|| Error::Singular("Nyström Cholesky factor".into()))?;
    let svd = bt.transpose().svd(true, false);
    let u_full = svd.u.expect("left singular vectors were requested");

    let mut order: Vec<usize> = (0..rank).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let mut u = DMatrix::zeros(p, rank);
    let mut eigs = DVector::zeros(rank);
    for (dst, &src) in order.iter().enumerate() {
        u.set_column(dst, &u_full.column(src));
        let s = svd.singular_values[src];
        eigs[dst] = (s * s - shift).max(0.0);
    }
    Ok(NystromApprox { u, eigs })
}

/// `P = (λ_ℓ + ν)^{-1} U (Λ + νI) U^T + (I - U U^T)`, applied through its inverse.
#[derive(Clone, Debug)]
pub struct NystromPreconditioner {
    pub u: DMatrix<f64>,
    pub eigs: DVector<f64>,
    pub nu: f64,
    pub lam_ell: f64,
}

impl NystromPreconditioner {
    pub fn new(approx: NystromApprox, nu: f64) -> Self {
        let lam_ell = approx.eigs[approx.rank() - 1];
        NystromPreconditioner { u: approx.u, eigs: approx.eigs, nu, lam_ell }
    }

    pub fn build(a: &SymmetricOperator<'_>, rank: usize, nu: f64, seed: u64) -> Result<Self> {
        Ok(Self::new(nystrom_approx(a, rank, seed)?, nu))
    }

    /// Dense `P` (for checks on small problems).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let p = self.u.nrows();
        let mut scaled = self.u.clone();
        for (mut col, &e) in scaled.column_iter_mut().zip(self.eigs.iter()) {
            col *= (e + self.nu) / (self.lam_ell + self.nu) - 1.0;
        }
        DMatrix::identity(p, p) + scaled * self.u.transpose()
    }
}

impl Preconditioner for NystromPreconditioner {
    fn apply_inverse(&self, r: &DVector<f64>) -> DVector<f64> {
        let mut coeff = self.u.tr_mul(r);
        for (c, &e) in coeff.iter_mut().zip(self.eigs.iter()) {
            *c *= (self.lam_ell + self.nu) / (e + self.nu) - 1.0;
        }
        let mut out = r.clone();
        out.gemv(1.0, &self.u, &coeff, 1.0);
        out
    }
}

/// `argmin_W |ΦW - y|² + λ|W|²` by Householder QR of the stacked system
/// `[Φ; √λ I]`.
pub fn ridge_lstsq(phi: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    let (m, q) = phi.shape();
    if m == 0 {
        return Err(Error::Config("least squares needs at least one row".into()));
    }
    if y.nrows() != m {
        return Err(Error::DimensionMismatch { what: "least-squares targets", expected: m, got: y.nrows() });
    }
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("ridge parameter must be non-negative, got {lambda}")));
    }
    let k = y.ncols();
    let mut stacked = DMatrix::zeros(m + q, q);
    stacked.rows_mut(0, m).copy_from(phi);
    let sl = lambda.sqrt();
    for i in 0..q {
        stacked[(m + i, i)] = sl;
    }
    let mut rhs = DMatrix::zeros(m + q, k);
    rhs.rows_mut(0, m).copy_from(y);

    let qr = stacked.qr();
    qr.q_tr_mul(&mut rhs);
    let r = qr.r();
    let diag_max = r.diagonal().amax();
    let floor = (m + q) as f64 * f64::EPSILON * diag_max;
    if diag_max == 0.0 || r.diagonal().iter().any(|d| d.abs() <= floor) {
        return Err(Error::Singular(format!(
            "normal equations are singular ({m} rows, {q} unknowns, lambda = {lambda}); use a positive lambda"
        )));
    }
    let top = rhs.rows(0, q).into_owned();
    r.solve_upper_triangular(&top)
        .ok_or_else(|| Error::Singular("triangular solve failed; use a positive lambda".into()))
}

/// Assembles `A` from products with unit vectors and returns all eigenvalues, descending.
pub fn dense_spectrum(a: &SymmetricOperator<'_>, cap: usize) -> Result<Vec<f64>> {
    Ok(dense_eigen(a, cap)?.0)
}

/// Eigenvalues (descending) and matching eigenvectors of an assembled operator.
pub fn dense_eigen(a: &SymmetricOperator<'_>, cap: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let dense = assemble(a, cap)?;
    let eig = dense.symmetric_eigen();
    let mut order: Vec<usize> = (0..a.dim()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(a.dim(), a.dim(), |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// Dense symmetric matrix of an operator, column by column.
pub fn assemble(a: &SymmetricOperator<'_>, cap: usize) -> Result<DMatrix<f64>> {
    let p = a.dim();
    if p > cap {
        return Err(Error::DenseCap { dim: p, cap });
    }
    let mut dense = DMatrix::zeros(p, p);
    let mut e = DVector::zeros(p);
    for j in 0..p {
        e[j] = 1.0;
        dense.set_column(j, &a.apply(&e)?);
        e[j] = 0.0;
    }
    Ok((&dense + dense.transpose()) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_spd(p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = gaussian_matrix(p, p, &mut rng);
        &g * g.transpose() + DMatrix::identity(p, p) * (p as f64 * 0.1)
    }

    fn low_rank_psd(p: usize, rank: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = gaussian_matrix(p, rank, &mut rng);
        &g * g.transpose()
    }

    /// PSD matrix with eigenvalues `decay^i` and a random eigenbasis.
    fn decaying_psd(p: usize, decay: f64, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = gaussian_matrix(p, p, &mut rng);
        let q = g.qr().q();
        let eigs: Vec<f64> = (0..p).map(|i| decay.powi(i as i32)).collect();
        let d = DMatrix::from_diagonal(&DVector::from_vec(eigs.clone()));
        (&q * d * q.transpose(), eigs)
    }

    #[test]
    fn cg_identity_one_iteration() {
        let a = SymmetricOperator::identity(7);
        let b = DVector::from_fn(7, |i, _| i as f64 - 3.0);
        let (x, stats) = cg_solve(&a, &b, None, 1e-12, 10, None).unwrap();
        assert_eq!(stats.iterations, 1);
        assert!(stats.converged);
        assert_relative_eq!(x, b, epsilon = 1e-14);
    }

    #[test]
    fn cg_diagonal_componentwise() {
        let a = SymmetricOperator::from_dense(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0])), true);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let (x, stats) = cg_solve(&a, &b, None, 1e-12, 10, None).unwrap();
        assert!(stats.converged);
        assert_relative_eq!(x, DVector::from_element(3, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn cg_random_spd_against_dense_solve() {
        let m = random_spd(50, 3);
        let b = DVector::from_fn(50, |i, _| (i as f64).sin());
        let direct = m.clone().cholesky().unwrap().solve(&b);
        let a = SymmetricOperator::from_dense(m.clone(), true);
        let (x, stats) = cg_solve(&a, &b, None, 1e-10, 500, None).unwrap();
        assert!(stats.converged);
        assert!((&m * &x - &b).norm() / b.norm() <= 1e-10);
        assert!((&x - &direct).norm() / direct.norm() < 1e-8);
        assert_eq!(stats.mvms, a.mvm_count());
    }

    #[test]
    fn cg_zero_rhs_and_nonconvergence() {
        let a = SymmetricOperator::from_dense(random_spd(20, 1), true);
        let (x, stats) = cg_solve(&a, &DVector::zeros(20), None, 1e-8, 5, None).unwrap();
        assert!(stats.converged && x.norm() == 0.0);

        let (m, _) = decaying_psd(40, 0.6, 2);
        let a = SymmetricOperator::from_dense(m + DMatrix::identity(40, 40) * 1e-9, true);
        let b = DVector::from_element(40, 1.0);
        let (_, stats) = cg_solve(&a, &b, None, 1e-12, 3, None).unwrap();
        assert!(!stats.converged);
        assert_eq!(stats.iterations, 3);
        assert!(stats.final_residual <= 1.0);
    }

    #[test]
    fn nystrom_exact_at_true_rank() {
        let m = low_rank_psd(60, 8, 5);
        let a = SymmetricOperator::from_dense(m.clone(), true);
        let approx = nystrom_approx(&a, 8, 11).unwrap();
        let err = (approx.to_dense() - &m).norm() / m.norm();
        assert!(err <= 1e-8, "relative Frobenius error {err:e}");
        let utu = approx.u.tr_mul(&approx.u);
        assert!((utu - DMatrix::identity(8, 8)).amax() < 1e-10);
        assert!(approx.eigs.iter().zip(approx.eigs.iter().skip(1)).all(|(a, b)| a >= b));
    }

    #[test]
    fn nystrom_scaled_identity_rank_one() {
        let a = SymmetricOperator::from_dense(DMatrix::identity(30, 30) * 2.5, true);
        let approx = nystrom_approx(&a, 1, 0).unwrap();
        assert_relative_eq!(approx.eigs[0], 2.5, max_relative = 1e-10);
    }

    #[test]
    fn nystrom_top_eigenvalues_of_decaying_spectrum() {
        let (m, eigs) = decaying_psd(80, 0.7, 9);
        let a = SymmetricOperator::from_dense(m, true);
        let approx = nystrom_approx(&a, 20, 4).unwrap();
        for i in 0..5 {
            let rel = (approx.eigs[i] - eigs[i]).abs() / eigs[i];
            assert!(rel < 0.10, "eigenvalue {i}: {} vs {}", approx.eigs[i], eigs[i]);
        }
    }

    #[test]
    fn preconditioner_complement_and_scaling() {
        let (m, _) = decaying_psd(50, 0.8, 2);
        let a = SymmetricOperator::from_dense(m, true);
        let pre = NystromPreconditioner::build(&a, 10, 1e-3, 8).unwrap();
        // component orthogonal to range(U)
        let r = DVector::from_fn(50, |i, _| ((i * 7) as f64).cos());
        let r_perp = &r - &pre.u * pre.u.tr_mul(&r);
        assert!((pre.apply_inverse(&r_perp) - &r_perp).norm() <= 1e-12 * r_perp.norm());
        // first eigenvector
        let u1 = pre.u.column(0).into_owned();
        let expected = &u1 * ((pre.lam_ell + pre.nu) / (pre.eigs[0] + pre.nu));
        assert!((pre.apply_inverse(&u1) - expected).norm() < 1e-12);
    }

    #[test]
    fn preconditioner_inverts_dense_assembly() {
        let (m, _) = decaying_psd(50, 0.8, 6);
        let a = SymmetricOperator::from_dense(m, true);
        let pre = NystromPreconditioner::build(&a, 12, 1e-4, 1).unwrap();
        let dense = pre.to_dense();
        let r = DVector::from_fn(50, |i, _| 1.0 + (i as f64).sqrt());
        let back = pre.apply_inverse(&(&dense * &r));
        assert!((back - &r).norm() / r.norm() <= 1e-10);
        // SPD
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = gaussian_vector(50, &mut rng);
            assert!(v.dot(&pre.apply_inverse(&v)) > 0.0);
        }
    }

    #[test]
    fn shifted_operator() {
        let m = random_spd(6, 4);
        let a = SymmetricOperator::from_dense(m.clone(), true);
        let v = DVector::from_fn(6, |i, _| i as f64);
        let same = shifted(&a, 0.0);
        assert_eq!(same.apply(&v).unwrap(), a.apply(&v).unwrap());

        let z = SymmetricOperator::zero(6);
        assert_eq!(shifted(&z, 2.0).apply(&v).unwrap(), &v * 2.0);

        let base = dense_spectrum(&a, 100).unwrap();
        let moved = dense_spectrum(&shifted(&a, 0.75), 100).unwrap();
        for (b, s) in base.iter().zip(&moved) {
            assert_relative_eq!(s - b, 0.75, epsilon = 1e-10);
        }
    }

    #[test]
    fn ridge_cases() {
        let eye = DMatrix::<f64>::identity(4, 4);
        let y = DMatrix::from_fn(4, 2, |i, j| (i + 3 * j) as f64);
        assert_relative_eq!(ridge_lstsq(&eye, &y, 0.0).unwrap(), y, epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let phi = gaussian_matrix(20, 5, &mut rng);
        let w_true = DMatrix::from_fn(5, 1, |i, _| i as f64 - 2.0);
        let w = ridge_lstsq(&phi, &(&phi * &w_true), 0.0).unwrap();
        assert!((w - &w_true).amax() < 1e-10);

        let y = DMatrix::from_fn(20, 1, |i, _| (i as f64 * 0.3).sin());
        let lambda = 0.37;
        let normal = phi.transpose() * &phi + DMatrix::identity(5, 5) * lambda;
        let oracle = normal.try_inverse().unwrap() * phi.transpose() * &y;
        let w = ridge_lstsq(&phi, &y, lambda).unwrap();
        assert!((&w - &oracle).norm() / oracle.norm() <= 1e-10);
    }

    #[test]
    fn ridge_singular_without_lambda() {
        let phi = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = DMatrix::from_element(2, 1, 1.0);
        let err = ridge_lstsq(&phi, &y, 0.0).unwrap_err();
        assert!(err.to_string().contains("positive lambda"));
        assert!(ridge_lstsq(&phi, &y, 1e-6).is_ok());
    }

    #[test]
    fn dense_spectrum_basics() {
        let id = SymmetricOperator::identity(5);
        assert_eq!(dense_spectrum(&id, 10).unwrap(), vec![1.0; 5]);
        let d = SymmetricOperator::from_dense(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0, 2.0])), true);
        let s = dense_spectrum(&d, 10).unwrap();
        assert_relative_eq!(s[0], 3.0, epsilon = 1e-14);
        assert_relative_eq!(s[1], 2.0, epsilon = 1e-14);
        assert_relative_eq!(s[2], 1.0, epsilon = 1e-14);
        assert!(matches!(dense_spectrum(&id, 4), Err(Error::DenseCap { .. })));
    }

    #[test]
    fn preconditioned_cg_beats_plain_cg() {
        let (m, _) = decaying_psd(120, 0.85, 12);
        let base = SymmetricOperator::from_dense(m, true);
        let a = shifted(&base, 1e-6);
        let b = DVector::from_fn(120, |i, _| ((i as f64) * 0.37).cos());
        let (_, plain) = cg_solve(&a, &b, None, 1e-8, 5000, None).unwrap();
        let pre = NystromPreconditioner::build(&base, 100, 1e-6, 3).unwrap();
        let (_, fast) = cg_solve(&a, &b, Some(&pre), 1e-8, 5000, None).unwrap();
        assert!(fast.converged);
        assert!(fast.iterations < plain.iterations, "{} vs {}", fast.iterations, plain.iterations);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn cg_final_residual_not_above_initial(seed in 0u64..1000, maxiter in 1usize..30) {
                let (m, _) = decaying_psd(30, 0.5, seed);
                let a = SymmetricOperator::from_dense(m + DMatrix::identity(30, 30) * 1e-6, true);
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
                let b = gaussian_vector(30, &mut rng);
                let (x, stats) = cg_solve(&a, &b, None, 1e-10, maxiter, None).unwrap();
                prop_assert!(stats.final_residual <= 1.0 + 1e-12);
                if stats.converged {
                    prop_assert!(stats.final_residual <= 1e-10);
                }
                prop_assert!(x.iter().all(|v| v.is_finite()));
            }

            #[test]
            fn nystrom_exact_below_sketch_rank(seed in 0u64..1000, rank in 1usize..6) {
                let m = low_rank_psd(25, rank, seed);
                let a = SymmetricOperator::from_dense(m.clone(), true);
                let approx = nystrom_approx(&a, rank + 2, seed ^ 0xabc).unwrap();
                prop_assert!((approx.to_dense() - &m).norm() / m.norm() <= 1e-8);
            }
        }
    }
}
