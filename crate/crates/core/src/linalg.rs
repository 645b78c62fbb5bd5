//! Small dense linear-algebra helpers shared by the engines and the simulator.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, TtshsError};

/// Eigenvalue real parts must sit below `-HURWITZ_TOL` for a matrix to count as Hurwitz.
pub const HURWITZ_TOL: f64 = 1e-9;

/// Largest real part over the eigenvalues of `a`.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_hurwitz(a: &DMatrix<f64>) -> bool {
    spectral_abscissa(a) < -HURWITZ_TOL
}

pub fn ensure_hurwitz(a: &DMatrix<f64>) -> Result<()> {
    let abscissa = spectral_abscissa(a);
    if abscissa < -HURWITZ_TOL {
        Ok(())
    } else {
        Err(TtshsError::NotHurwitz(abscissa))
    }
}

/// `(m + mᵀ) / 2`.
pub fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Maximum absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

pub fn max_abs_vec(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Row-sum infinity norm.
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// The n×n matrix `D x 𝟙ₙ`: every column equals `D x`.
pub fn outer_with_ones(d: &DMatrix<f64>, x: &DVector<f64>) -> DMatrix<f64> {
    let dx = d * x;
    let n = x.len();
    DMatrix::from_fn(n, n, |r, _| dx[r])
}

/// Solves `A X + X Aᵀ = Q` by Kronecker vectorization.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let op = id.kronecker(a) + a.kronecker(&id);
    let rhs = DVector::from_column_slice(q.as_slice());
    let sol = op.lu().solve(&rhs).ok_or(TtshsError::SingularLyapunov)?;
    Ok(DMatrix::from_column_slice(n, n, sol.as_slice()))
}

/// Solves `L(X) = Q` for an arbitrary linear map `L` on n×n matrices, assembling
/// its n²×n² representation column by column.
pub fn solve_matrix_operator<F>(n: usize, op: F, q: &DMatrix<f64>) -> Result<DMatrix<f64>>
where
    F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    let nn = n * n;
    let mut big = DMatrix::<f64>::zeros(nn, nn);
    for col in 0..nn {
        let mut basis = DMatrix::<f64>::zeros(n, n);
        basis[col] = 1.0;
        let image = op(&basis);
        big.column_mut(col).copy_from_slice(image.as_slice());
    }
    let rhs = DVector::from_column_slice(q.as_slice());
    let sol = big.lu().solve(&rhs).ok_or(TtshsError::SingularLyapunov)?;
    Ok(DMatrix::from_column_slice(n, n, sol.as_slice()))
}

/// Nearest positive semidefinite matrix (Frobenius) to the symmetric part of `m`,
/// by clipping negative eigenvalues at zero. Returns the projection and the
/// Frobenius distance moved.
pub fn project_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let s = sym(m);
    let eig = s.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return (s, 0.0);
    }
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let proj = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let dist = (&proj - &s).norm();
    (proj, dist)
}

/// Symmetric square root factor `L` with `L Lᵀ = m` for PSD `m`.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Point `index` (1-based) of the Halton sequence in `base`.
pub fn halton(mut index: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}

pub(crate) const PRIMES: [usize; 20] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71,
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lyapunov_scalar() {
        let a = DMatrix::from_element(1, 1, -1.0);
        let q = DMatrix::from_element(1, 1, -1.0);
        let x = solve_lyapunov(&a, &q).unwrap();
        assert!((x[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn lyapunov_matches_generic_operator() {
        let a = DMatrix::from_row_slice(3, 3, &[-2.0, 0.5, 0.1, 0.3, -1.0, 0.2, 0.0, 0.4, -3.0]);
        let q = DMatrix::from_row_slice(3, 3, &[-1.0, 0.2, 0.0, 0.2, -2.0, 0.1, 0.0, 0.1, -0.5]);
        let x1 = solve_lyapunov(&a, &q).unwrap();
        let x2 = solve_matrix_operator(3, |x| &a * x + x * a.transpose(), &q).unwrap();
        assert!(max_abs(&(&x1 - &x2)) < 1e-13);
        let resid = &a * &x1 + &x1 * a.transpose() - &q;
        assert!(max_abs(&resid) < 1e-13);
    }

    #[test]
    fn hurwitz_detection() {
        assert!(is_hurwitz(&DMatrix::from_element(1, 1, -1.0)));
        assert!(!is_hurwitz(&DMatrix::from_element(1, 1, 1.0)));
        assert!(!is_hurwitz(&DMatrix::from_element(1, 1, 0.0)));
        // rotation with decay
        let a = DMatrix::from_row_slice(2, 2, &[-0.1, 5.0, -5.0, -0.1]);
        assert!(is_hurwitz(&a));
    }

    #[test]
    fn psd_projection_clips() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let (p, d) = project_psd(&m);
        assert!((p[(1, 1)]).abs() < 1e-15);
        assert!((d - 1.0).abs() < 1e-12);
        let l = psd_sqrt(&p);
        assert!(max_abs(&(&l * l.transpose() - &p)) < 1e-14);
    }

    #[test]
    fn ones_outer_columns() {
        let d = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        let x = DVector::from_vec(vec![1.0, 1.0]);
        let m = outer_with_ones(&d, &x);
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[3.0, 3.0, 1.0, 1.0]));
    }

    #[test]
    fn halton_base2() {
        assert_eq!(halton(1, 2), 0.5);
        assert_eq!(halton(2, 2), 0.25);
        assert_eq!(halton(3, 2), 0.75);
    }
}
