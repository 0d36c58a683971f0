//! Dense linear-algebra helpers shared across the toolkit.
//!
//! Everything here works on `nalgebra` dynamic matrices; the problem sizes
//! (latent dimension up to a few dozen) never justify anything fancier.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Neumaier-compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = CompensatedSum::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

pub fn require_square(what: &str, a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::input(format!(
            "{what} must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

/// All eigenvalues of a real square matrix (real Schur form).
pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    require_square("matrix", a)?;
    if a.nrows() == 0 {
        return Ok(Vec::new());
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("eigenvalues of a matrix with non-finite entries"));
    }
    let schur = a
        .clone()
        .try_schur(f64::EPSILON, 10_000)
        .ok_or_else(|| Error::numerical("real Schur decomposition did not converge"))?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|c| Complex64::new(c.re, c.im))
        .collect())
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(a: &DMatrix<f64>) -> Result<f64> {
    Ok(eigenvalues(a)?
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max))
}

/// Gradient of the spectral radius with respect to the entries of `a`.
///
/// Uses the simple-eigenvalue perturbation formula
/// `d|λ| = Re(conj(λ) wᴴ dA v / (wᴴ v)) / |λ|` with right/left eigenvectors
/// obtained by inverse iteration. When several eigenvalues (up to conjugation)
/// share the maximal modulus the gradients are averaged, which is an element of
/// the Clarke subdifferential.
pub fn spectral_radius_gradient(a: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    let eigs = eigenvalues(a)?;
    let n = a.nrows();
    let rho = eigs.iter().map(|l| l.norm()).fold(0.0, f64::max);
    let mut grad = DMatrix::zeros(n, n);
    if rho == 0.0 {
        return Ok((rho, grad));
    }
    let tie_tol = 1e-9 * rho.max(1.0);
    let mut dominant: Vec<Complex64> = Vec::new();
    for l in eigs.iter().filter(|l| (l.norm() - rho).abs() <= tie_tol && l.im >= 0.0) {
        if !dominant.iter().any(|d| (d - l).norm() <= tie_tol) {
            dominant.push(*l);
        }
    }
    if dominant.is_empty() {
        // Only the lower member of a conjugate pair was tagged; take its mirror.
        let l = eigs
            .iter()
            .copied()
            .max_by(|x, y| x.norm().total_cmp(&y.norm()))
            .expect("non-empty spectrum");
        dominant.push(l.conj());
    }

    let ac = a.map(|v| Complex64::new(v, 0.0));
    for lambda in &dominant {
        let v = inverse_iteration(&ac, *lambda)?;
        let w = inverse_iteration(&ac.adjoint(), lambda.conj())?;
        let mut denom = Complex64::new(0.0, 0.0);
        for i in 0..n {
            denom += w[i].conj() * v[i];
        }
        // Defective eigenvalue: wᴴv vanishes. Fall back to the outer-product direction.
        if denom.norm() < 1e-12 {
            denom = Complex64::new(1.0, 0.0);
        }
        let scale = lambda.conj() / (denom * lambda.norm());
        for i in 0..n {
            for j in 0..n {
                grad[(i, j)] += (scale * w[i].conj() * v[j]).re;
            }
        }
    }
    grad /= dominant.len() as f64;
    Ok((rho, grad))
}

fn inverse_iteration(a: &DMatrix<Complex64>, lambda: Complex64) -> Result<DVector<Complex64>> {
    let n = a.nrows();
    let scale = a.iter().map(|v| v.norm()).fold(1.0, f64::max);
    let shift = lambda + Complex64::new(1e-10 * scale, 1e-10 * scale);
    let mut shifted = a.clone();
    for i in 0..n {
        shifted[(i, i)] -= shift;
    }
    let lu = shifted.lu();
    let mut x = DVector::from_fn(n, |i, _| Complex64::new(1.0 + 0.1 * i as f64, 0.05 * i as f64));
    for _ in 0..4 {
        let y = lu
            .solve(&x)
            .ok_or_else(|| Error::numerical("inverse iteration hit an exactly singular shift"))?;
        let norm = y.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::numerical("inverse iteration produced a degenerate vector"));
        }
        x = y / Complex64::new(norm, 0.0);
    }
    Ok(x)
}

/// Eigenvalues of the symmetric part of `s`, ascending.
pub fn symmetric_eigenvalues(s: &DMatrix<f64>) -> Result<Vec<f64>> {
    require_square("symmetric matrix", s)?;
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("eigenvalues of a matrix with non-finite entries"));
    }
    let sym = (s + s.transpose()) * 0.5;
    let mut values: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    values.sort_by(f64::total_cmp);
    Ok(values)
}

pub fn max_symmetric_eigenvalue(s: &DMatrix<f64>) -> Result<f64> {
    Ok(*symmetric_eigenvalues(s)?
        .last()
        .ok_or_else(|| Error::input("empty matrix"))?)
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("singular values of a matrix with non-finite entries"));
    }
    let mut sv: Vec<f64> = m.clone().singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Largest singular value (0 for an empty matrix).
pub fn operator_norm(m: &DMatrix<f64>) -> Result<f64> {
    Ok(singular_values(m)?.first().copied().unwrap_or(0.0))
}

/// `[B, AB, A²B, …, A^{N-1}B]`.
pub fn controllability_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    require_square("A", a)?;
    let n = a.nrows();
    if b.nrows() != n {
        return Err(Error::input(format!(
            "B has {} rows but A is {n}x{n}",
            b.nrows()
        )));
    }
    let m = b.ncols();
    let mut c = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for j in 0..n {
        c.view_mut((0, j * m), (n, m)).copy_from(&block);
        block = a * &block;
    }
    Ok(c)
}

/// Smallest and largest singular value of the controllability matrix, taking the
/// smallest among the first `N` (the rank-relevant ones).
pub fn controllability_extremes(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(f64, f64)> {
    let c = controllability_matrix(a, b)?;
    let sv = singular_values(&c)?;
    let n = a.nrows();
    let smax = sv.first().copied().unwrap_or(0.0);
    let smin = if sv.len() >= n && n > 0 { sv[n - 1] } else { 0.0 };
    Ok((smin, smax))
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `Σ (Aᵀ)ᵏ Q Aᵏ` by squared Smith doubling.
fn smith_sum(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut x = symmetrize(q);
    let mut ak = a.clone();
    for _ in 0..64 {
        let inc = ak.transpose() * &x * &ak;
        x = symmetrize(&(&x + &inc));
        ak = &ak * &ak;
        if !inc.iter().all(|v| v.is_finite()) || !ak.iter().all(|v| v.is_finite()) {
            return Err(Error::numerical("Lyapunov: iteration overflowed"));
        }
        if inc.norm() <= 1e-17 * x.norm() {
            break;
        }
    }
    Ok(x)
}

fn lyapunov_residual(a: &DMatrix<f64>, x: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&(a.transpose() * x * a - x + q))
}

/// Solves `AᵀXA − X + Q = 0` for a Schur-stable `A` by squared Smith
/// iteration, `X = Σ (Aᵀ)ᵏ Q Aᵏ`, followed by residual refinement.
pub fn solve_discrete_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    require_square("A", a)?;
    require_square("Q", q)?;
    let n = a.nrows();
    if q.nrows() != n {
        return Err(Error::input("Lyapunov: A and Q dimensions differ"));
    }
    let radius = spectral_radius(a)?;
    if radius >= 1.0 {
        return Err(Error::numerical(format!(
            "Lyapunov: A must be Schur stable (spectral radius {radius})"
        )));
    }
    let mut x = smith_sum(a, q)?;
    let mut resid = lyapunov_residual(a, &x, q);
    for _ in 0..8 {
        let correction = smith_sum(a, &resid)?;
        let candidate = symmetrize(&(&x + correction));
        let r = lyapunov_residual(a, &candidate, q);
        if !(r.norm() < resid.norm()) {
            break;
        }
        x = candidate;
        resid = r;
    }
    let scale = (a.transpose() * &x * a).norm() + x.norm() + q.norm();
    if !(resid.norm() <= 1e-9 * scale) {
        return Err(Error::numerical(format!(
            "Lyapunov: residual {:e} too large relative to {scale:e}",
            resid.norm()
        )));
    }
    Ok(x)
}

/// Upper-triangular `U` with `UᵀU = M`.
pub fn cholesky_upper(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = Cholesky::new(m.clone())
        .ok_or_else(|| Error::numerical("matrix is not positive definite"))?;
    Ok(chol.l().transpose())
}

/// Solves the symmetric positive (semi)definite system `G X = R` and reports
/// `Numerical` when `G` is singular to working precision.
pub fn solve_spd(g: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let ev = symmetric_eigenvalues(g)?;
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    if lo <= 1e-12 * hi.max(f64::MIN_POSITIVE) {
        return Err(Error::numerical(format!(
            "Gram matrix is singular (λmin={lo:e}, λmax={hi:e}); add ridge regularization"
        )));
    }
    let chol = Cholesky::new(g.clone())
        .ok_or_else(|| Error::numerical("Cholesky factorization of Gram matrix failed"))?;
    Ok(chol.solve(rhs))
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_cancellation() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(v), 2.0);
    }

    #[test]
    fn spectral_radius_diag_and_rotation() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, -0.9]));
        assert!((spectral_radius(&d).unwrap() - 0.9).abs() < 1e-12);
        let t: f64 = 0.7;
        let r = DMatrix::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()]) * 0.7;
        assert!((spectral_radius(&r).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn spectral_radius_gradient_matches_finite_differences() {
        let a = DMatrix::from_row_slice(
            3,
            3,
            &[0.3, -0.8, 0.1, 0.9, 0.2, 0.0, 0.05, 0.4, -0.5],
        );
        let (_, g) = spectral_radius_gradient(&a).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut ap = a.clone();
                ap[(i, j)] += h;
                let mut am = a.clone();
                am[(i, j)] -= h;
                let fd = (spectral_radius(&ap).unwrap() - spectral_radius(&am).unwrap()) / (2.0 * h);
                assert!((fd - g[(i, j)]).abs() < 1e-6, "({i},{j}) fd={fd} g={}", g[(i, j)]);
            }
        }
    }

    #[test]
    fn lyapunov_solution_satisfies_equation() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, -0.1, 0.3]);
        let q = DMatrix::identity(2, 2);
        let x = solve_discrete_lyapunov(&a, &q).unwrap();
        let res = a.transpose() * &x * &a - &x + &q;
        assert!(res.norm() < 1e-12);
    }

    #[test]
    fn cholesky_upper_reconstructs() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let u = cholesky_upper(&m).unwrap();
        assert!((u.transpose() * &u - &m).norm() < 1e-14);
        assert_eq!(u[(1, 0)], 0.0);
    }

    #[test]
    fn controllability_matrix_blocks() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let c = controllability_matrix(&a, &b).unwrap();
        assert_eq!(c, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 1.0]));
    }
}
