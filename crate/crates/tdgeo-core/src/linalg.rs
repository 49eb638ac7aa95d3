//! Dense linear-algebra helpers shared across the crate.
//!
//! Everything here targets small matrices (state spaces of a handful of
//! states, parameter vectors of a few dozen entries), so the implementations
//! favor clarity and determinism over scalability.

use nalgebra::{Complex, DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("no complex eigenvalue pair found")]
    NoComplexPair,
    #[error("inverse iteration failed to converge (residual {residual:.3e})")]
    EigenvectorFailed { residual: f64 },
}

/// Matrix exponential by scaling-and-squaring with a degree-13 Pade
/// approximant (Higham 2005). Accurate to roundoff for the well-scaled
/// matrices produced by this crate.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), a.ncols(), "expm needs a square matrix");
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);

    // Pade(13) numerator coefficients.
    const B: [f64; 14] = [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ];
    const THETA_13: f64 = 5.371920351148152;

    // 1-norm controls the scaling step count.
    let norm = (0..n)
        .map(|j| a.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0_f64, f64::max);
    let s = if norm > THETA_13 {
        (norm / THETA_13).log2().ceil() as i32
    } else {
        0
    };
    let a = a * 2f64.powi(-s);

    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;

    let u_inner = &a6 * (B[13] * &a6 + B[11] * &a4 + B[9] * &a2)
        + B[7] * &a6
        + B[5] * &a4
        + B[3] * &a2
        + B[1] * &ident;
    let u = &a * u_inner;
    let v = &a6 * (B[12] * &a6 + B[10] * &a4 + B[8] * &a2)
        + B[6] * &a6
        + B[4] * &a4
        + B[2] * &a2
        + B[0] * &ident;

    let num = &v + &u;
    let den = &v - &u;
    let mut r = den
        .lu()
        .solve(&num)
        .expect("Pade denominator is singular; input matrix is badly scaled");
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues_sorted(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}

/// Largest eigenvalue of `M^-1 N` for symmetric positive definite `M` and
/// symmetric positive semidefinite `N`, computed stably as the top eigenvalue
/// of the congruent symmetric matrix `L^-1 N L^-T` where `M = L L^T`.
pub fn generalized_max_eigenvalue(
    m: &DMatrix<f64>,
    n_mat: &DMatrix<f64>,
) -> Result<f64, LinalgError> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or(LinalgError::NotPositiveDefinite)?;
    let l = chol.l();
    // X = L^-1 N L^-T via two triangular solves.
    let y = l
        .solve_lower_triangular(n_mat)
        .ok_or(LinalgError::NotPositiveDefinite)?;
    let x = l
        .solve_lower_triangular(&y.transpose())
        .ok_or(LinalgError::NotPositiveDefinite)?;
    let sym = 0.5 * (&x + x.transpose());
    let ev = symmetric_eigenvalues_sorted(&sym);
    Ok(*ev.last().expect("nonempty spectrum"))
}

/// The complex eigenpair of a real matrix selected by largest imaginary part
/// magnitude (ties broken by largest real part). Returns the eigenvalue on
/// the upper-half-plane branch (positive imaginary part) together with its
/// eigenvector, normalized to unit complex norm with a deterministic phase:
/// the entry of largest modulus is made real and positive.
///
/// Returns `NoComplexPair` if the spectrum is real up to `imag_tol`.
pub fn dominant_complex_pair(
    a: &DMatrix<f64>,
    imag_tol: f64,
) -> Result<(Complex<f64>, DVector<Complex<f64>>), LinalgError> {
    if a.nrows() != a.ncols() {
        return Err(LinalgError::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    let eigs = a.complex_eigenvalues();
    let lambda = eigs
        .iter()
        .filter(|l| l.im > imag_tol)
        .copied()
        .max_by(|x, y| {
            (x.im.abs(), x.re)
                .partial_cmp(&(y.im.abs(), y.re))
                .unwrap()
        })
        .ok_or(LinalgError::NoComplexPair)?;

    let v = inverse_iteration(a, lambda)?;
    Ok((lambda, v))
}

/// Inverse iteration for the eigenvector of `a` at a known eigenvalue.
/// The shift is jittered off the exact eigenvalue so the solve stays
/// nonsingular; a handful of iterations reaches roundoff for the
/// well-separated spectra handled here.
fn inverse_iteration(
    a: &DMatrix<f64>,
    lambda: Complex<f64>,
) -> Result<DVector<Complex<f64>>, LinalgError> {
    let n = a.nrows();
    let ac = a.map(|x| Complex::new(x, 0.0));
    let scale = a.norm().max(1.0);
    let shift = lambda + Complex::new(0.0, 1e-9 * scale);
    let shifted = &ac - DMatrix::from_diagonal_element(n, n, shift);
    let lu = shifted.lu();

    // Deterministic start with components in every coordinate direction.
    let mut v = DVector::from_fn(n, |i, _| Complex::new(1.0, (i as f64 + 1.0).recip()));
    let nrm = v.norm();
    v.unscale_mut(nrm);
    let mut residual = f64::INFINITY;
    for _ in 0..50 {
        let mut w = lu.solve(&v).ok_or(LinalgError::EigenvectorFailed {
            residual: f64::INFINITY,
        })?;
        let nrm = w.norm();
        w.unscale_mut(nrm);
        v = w;
        residual = (&ac * &v - &v * lambda).norm();
        if residual < 1e-12 * scale {
            break;
        }
    }
    if residual > 1e-8 * scale {
        return Err(LinalgError::EigenvectorFailed { residual });
    }

    // Fix the phase: make the largest-modulus entry real positive.
    let (j, _) = v
        .iter()
        .enumerate()
        .max_by(|(_, x), (_, y)| x.norm().partial_cmp(&y.norm()).unwrap())
        .unwrap();
    let phase = v[j].conj().unscale(v[j].norm());
    v *= phase;
    let nrm = v.norm();
    v.unscale_mut(nrm);
    Ok(v)
}

/// Orthonormal basis (as columns) of the null space of `m`, i.e. right
/// singular vectors with singular value below `tol` times the largest one.
pub fn orthonormal_nullspace(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = m.ncols();
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let smax = svd.singular_values.iter().fold(0.0_f64, |a, &b| a.max(b));
    let cutoff = tol * smax.max(1.0);
    let mut cols: Vec<DVector<f64>> = Vec::new();
    // v_t has min(nrows, ncols) rows; singular directions beyond them have
    // singular value exactly zero but are not returned, so complete the basis
    // by projecting coordinate vectors when needed.
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s <= cutoff {
            cols.push(v_t.row(i).transpose());
        }
    }
    let rank_reported = svd.singular_values.len();
    if rank_reported < n {
        // Complete with Gram-Schmidt against known rows of v_t.
        let mut basis: Vec<DVector<f64>> = (0..rank_reported)
            .map(|i| v_t.row(i).transpose())
            .collect();
        for k in 0..n {
            let mut e = DVector::zeros(n);
            e[k] = 1.0;
            for b in &basis {
                let c = b.dot(&e);
                e -= b * c;
            }
            let nrm = e.norm();
            if nrm > 1e-8 {
                let e = e / nrm;
                basis.push(e.clone());
                cols.push(e);
            }
            if basis.len() == n {
                break;
            }
        }
    }
    if cols.is_empty() {
        return DMatrix::zeros(n, 0);
    }
    DMatrix::from_columns(&cols)
}

/// Modified Gram-Schmidt orthonormalization of the columns of `m`.
/// Columns that become numerically dependent are dropped.
pub fn orthonormalize_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut cols: Vec<DVector<f64>> = Vec::new();
    for j in 0..m.ncols() {
        let mut v = m.column(j).clone_owned();
        for q in &cols {
            let c = q.dot(&v);
            v -= q * c;
        }
        let nrm = v.norm();
        if nrm > 1e-12 {
            cols.push(v / nrm);
        }
    }
    if cols.is_empty() {
        return DMatrix::zeros(m.nrows(), 0);
    }
    DMatrix::from_columns(&cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn expm_of_zero_is_identity() {
        let z = DMatrix::<f64>::zeros(4, 4);
        assert_eq!(expm(&z), DMatrix::identity(4, 4));
    }

    #[test]
    fn expm_matches_diagonal_closed_form() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 0.5, 3.0]));
        let e = expm(&d);
        for i in 0..3 {
            assert_relative_eq!(e[(i, i)], d[(i, i)].exp(), max_relative = 1e-14);
        }
    }

    #[test]
    fn expm_matches_rotation_closed_form() {
        let w = 0.7;
        let g = DMatrix::from_row_slice(2, 2, &[0.0, -w, w, 0.0]);
        let e = expm(&g);
        assert_relative_eq!(e[(0, 0)], w.cos(), epsilon = 1e-14);
        assert_relative_eq!(e[(1, 0)], w.sin(), epsilon = 1e-14);
        assert_relative_eq!(e[(0, 1)], -w.sin(), epsilon = 1e-14);
    }

    #[test]
    fn expm_handles_large_norm_via_scaling() {
        // exp(alpha*I + rotation) = e^alpha * rotation matrix, with a norm
        // far above the Pade threshold.
        let alpha = 30.0;
        let w = 40.0;
        let g = DMatrix::from_row_slice(2, 2, &[alpha, -w, w, alpha]);
        let e = expm(&g);
        assert_relative_eq!(e[(0, 0)], alpha.exp() * w.cos(), max_relative = 1e-11);
        assert_relative_eq!(e[(1, 0)], alpha.exp() * w.sin(), max_relative = 1e-11);
    }

    #[test]
    fn expm_agrees_with_taylor_series_on_random_input() {
        let a = DMatrix::from_row_slice(
            3,
            3,
            &[0.1, -0.3, 0.2, 0.05, 0.0, -0.1, -0.2, 0.15, 0.07],
        );
        let mut series = DMatrix::<f64>::identity(3, 3);
        let mut term = DMatrix::<f64>::identity(3, 3);
        for k in 1..30 {
            term = &term * &a / k as f64;
            series += &term;
        }
        assert_relative_eq!(expm(&a), series, epsilon = 1e-13);
    }

    #[test]
    fn complex_pair_of_plane_rotation() {
        let g = DMatrix::from_row_slice(2, 2, &[0.3, -0.9, 0.9, 0.3]);
        let (lambda, v) = dominant_complex_pair(&g, 1e-12).unwrap();
        assert_relative_eq!(lambda.re, 0.3, epsilon = 1e-10);
        assert_relative_eq!(lambda.im, 0.9, epsilon = 1e-10);
        let av = g.map(|x| Complex::new(x, 0.0)) * &v;
        let lv = v.map(|x| x * lambda);
        assert!((av - lv).norm() < 1e-9);
        // Deterministic phase: largest-modulus entry real positive.
        let (j, _) = v
            .iter()
            .enumerate()
            .max_by(|(_, x), (_, y)| x.norm().partial_cmp(&y.norm()).unwrap())
            .unwrap();
        assert!(v[j].im.abs() < 1e-12 && v[j].re > 0.0);
    }

    #[test]
    fn real_spectrum_reports_no_pair() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 0.5]);
        assert!(matches!(
            dominant_complex_pair(&m, 1e-12),
            Err(LinalgError::NoComplexPair)
        ));
    }

    #[test]
    fn nullspace_of_wide_matrix() {
        // Rows span a 2-dimensional subspace of R^4.
        let m = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        let ns = orthonormal_nullspace(&m, 1e-12);
        assert_eq!(ns.ncols(), 2);
        assert!((&m * &ns).norm() < 1e-12);
        let gram = ns.transpose() * &ns;
        assert_relative_eq!(gram, DMatrix::identity(2, 2), epsilon = 1e-12);
    }

    #[test]
    fn generalized_eigenvalue_reduces_to_plain_for_identity() {
        let n = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 5.0]);
        let m = DMatrix::identity(2, 2);
        let top = generalized_max_eigenvalue(&m, &n).unwrap();
        assert_relative_eq!(top, 5.0, epsilon = 1e-12);
    }
}
