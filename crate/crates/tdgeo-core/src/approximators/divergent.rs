//! The rank-2 spiral family whose expected TD flow provably diverges.
//!
//! Given a drive matrix A with a complex eigenvalue pair a +/- bi, the
//! two-dimensional real eigenplane E = span(Re v, Im v) is A-invariant and
//! A rotates it. A skew generator Q supported on E is chosen so that the
//! curve V(theta) = exp((Q + eps I) theta) V0 spirals outward while its
//! tangent keeps a strictly positive inner product with -A V: the scalar
//! parameter then grows forever and the represented values blow up at rate
//! eps. Extra parameters can ride along in directions orthogonal to A^T E,
//! where they cannot feed back into the spiral coordinate.

use super::{ApproxError, Approximator};
use crate::linalg::{dominant_complex_pair, expm, orthonormal_nullspace, LinalgError};
use crate::mrp::TdGeometry;
use nalgebra::{DMatrix, DVector};

const IMAG_TOL: f64 = 1e-9;
const OVERFLOW_GUARD: f64 = 700.0;

pub struct DivergentApproximator {
    q: DMatrix<f64>,
    epsilon: f64,
    v0: DVector<f64>,
    u: DMatrix<f64>,
    a: f64,
    b: f64,
    c: f64,
    extension: DMatrix<f64>,
}

/// Build the spiral family on the eigenplane of the drive matrix's dominant
/// complex pair (largest imaginary part, ties broken by real part).
///
/// `epsilon_fraction` scales the outward rate: eps = fraction (a^2 + b^2) / C
/// with C the largest eigenvalue of the plane's Gram matrix. Any fraction
/// at most 1/2 keeps the spiral coordinate's drift provably positive, since
/// eigenvalues of a drive matrix have modulus below 2.
///
/// `extension_rank` extra parameters (at most n - 2) act linearly through an
/// orthonormal basis of directions that A maps nowhere near the eigenplane.
pub fn construct_divergent(
    geometry: &TdGeometry,
    epsilon_fraction: f64,
    extension_rank: usize,
) -> Result<DivergentApproximator, ApproxError> {
    let n = geometry.n();
    if !(epsilon_fraction > 0.0 && epsilon_fraction < 1.0) {
        return Err(ApproxError::ShapeMismatch(format!(
            "epsilon fraction {epsilon_fraction} is outside (0, 1)"
        )));
    }
    if extension_rank + 2 > n {
        return Err(ApproxError::ShapeMismatch(format!(
            "extension rank {extension_rank} exceeds the {} spare dimensions",
            n.saturating_sub(2)
        )));
    }

    let (lambda, v) = match dominant_complex_pair(&geometry.a, IMAG_TOL) {
        Ok(pair) => pair,
        Err(LinalgError::NoComplexPair) => return Err(ApproxError::NoComplexEigenvalue),
        Err(e) => return Err(ApproxError::SolveFailure(e.to_string())),
    };
    let (a, b) = (lambda.re, lambda.im);

    let mut u = DMatrix::zeros(n, 2);
    for i in 0..n {
        u[(i, 0)] = v[i].re;
        u[(i, 1)] = v[i].im;
    }

    let gram = u.transpose() * &u;
    let c = crate::linalg::symmetric_eigenvalues_sorted(&gram)[1];
    let gram_inv = gram
        .try_inverse()
        .ok_or_else(|| ApproxError::SolveFailure("eigenplane Gram matrix is singular".into()))?;

    // In plane coordinates V = U x the drive acts as the scaled rotation
    // G = [[a, b], [-b, a]]. The generator below gives the exact identity
    // V^T Q^T A V = -(a^2 + b^2) |x|^2, which is what forces the spiral
    // coordinate forward.
    let m_hat = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]) * ((a * a + b * b) / b);
    let q = &u * &gram_inv * m_hat * &gram_inv * u.transpose();

    let epsilon = epsilon_fraction * (a * a + b * b) / c;
    let v0 = u.column(0).into_owned().normalize();

    let extension = if extension_rank == 0 {
        DMatrix::zeros(n, 0)
    } else {
        let constraint = u.transpose() * &geometry.a;
        let basis = orthonormal_nullspace(&constraint, 1e-12);
        if basis.ncols() < extension_rank {
            return Err(ApproxError::ShapeMismatch(format!(
                "only {} directions avoid the image of the eigenplane",
                basis.ncols()
            )));
        }
        basis.columns(0, extension_rank).into_owned()
    };

    Ok(DivergentApproximator {
        q,
        epsilon,
        v0,
        u,
        a,
        b,
        c,
        extension,
    })
}

/// Spiral value at scalar coordinate `theta0` with extension content
/// `theta_bar`, refusing coordinates past the exponential overflow guard.
pub fn divergent_value(
    approx: &DivergentApproximator,
    theta0: f64,
    theta_bar: &DVector<f64>,
) -> Result<DVector<f64>, ApproxError> {
    if approx.epsilon * theta0 > OVERFLOW_GUARD {
        return Err(ApproxError::DivergedBeyondRange(approx.epsilon * theta0));
    }
    if theta_bar.len() != approx.extension.ncols() {
        return Err(ApproxError::ShapeMismatch(format!(
            "extension content has {} entries for {} directions",
            theta_bar.len(),
            approx.extension.ncols()
        )));
    }
    Ok(approx.spiral_point(theta0) + &approx.extension * theta_bar)
}

impl DivergentApproximator {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        q: DMatrix<f64>,
        epsilon: f64,
        v0: DVector<f64>,
        u: DMatrix<f64>,
        a: f64,
        b: f64,
        c: f64,
        extension: DMatrix<f64>,
    ) -> Self {
        DivergentApproximator {
            q,
            epsilon,
            v0,
            u,
            a,
            b,
            c,
            extension,
        }
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn v0(&self) -> &DVector<f64> {
        &self.v0
    }

    /// Columns are the real and imaginary parts of the chosen eigenvector.
    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn rotation_re(&self) -> f64 {
        self.a
    }

    pub fn rotation_im(&self) -> f64 {
        self.b
    }

    /// Largest eigenvalue of the eigenplane Gram matrix U^T U.
    pub fn span_constant(&self) -> f64 {
        self.c
    }

    pub fn extension(&self) -> &DMatrix<f64> {
        &self.extension
    }

    pub fn extension_rank(&self) -> usize {
        self.extension.ncols()
    }

    /// Parameter vector sitting at the start of the spiral.
    pub fn initial_theta(&self) -> DVector<f64> {
        DVector::zeros(self.param_dim())
    }

    /// exp((Q + eps I) theta0) V0, computed as a bounded rotation scaled by
    /// a scalar exponential so nothing overflows before the guard.
    fn spiral_point(&self, theta0: f64) -> DVector<f64> {
        let rotated = expm(&(&self.q * theta0)) * &self.v0;
        rotated * (self.epsilon * theta0).exp()
    }
}

impl Approximator for DivergentApproximator {
    fn param_dim(&self) -> usize {
        1 + self.extension.ncols()
    }

    fn state_dim(&self) -> usize {
        self.v0.len()
    }

    /// Panics past the overflow guard; use `divergent_value` to get the
    /// refusal as an error instead.
    fn value(&self, theta: &DVector<f64>) -> DVector<f64> {
        let theta_bar = theta.rows(1, self.extension.ncols()).into_owned();
        divergent_value(self, theta[0], &theta_bar).unwrap_or_else(|e| panic!("{e}"))
    }

    fn jacobian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let n = self.state_dim();
        let spiral = self.spiral_point(theta[0]);
        let tangent = (&self.q * &spiral) + &spiral * self.epsilon;
        let mut j = DMatrix::zeros(n, self.param_dim());
        j.set_column(0, &tangent);
        if self.extension.ncols() > 0 {
            j.columns_mut(1, self.extension.ncols())
                .copy_from(&self.extension);
        }
        j
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mrp::random_mrp;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fig_one_geometry() -> TdGeometry {
        crate::mrp::cycle_mrp(3, 0.0, 0.9)
            .unwrap()
            .geometry()
            .unwrap()
    }

    #[test]
    fn cycle_chain_eigenplane_is_balanced() {
        let geo = fig_one_geometry();
        let d = construct_divergent(&geo, 0.5, 0).unwrap();
        let gram = d.u().transpose() * d.u();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 0.5 } else { 0.0 };
                assert_relative_eq!(gram[(i, j)], want, epsilon = 1e-10);
            }
        }
        assert_relative_eq!(d.span_constant(), 0.5, epsilon = 1e-10);
        assert_relative_eq!(d.rotation_re(), 0.775 / 3.0, epsilon = 1e-10);
        assert_relative_eq!(d.rotation_im(), 0.9 * 3f64.sqrt() / 4.0 / 3.0, epsilon = 1e-10);
        // With C = 1/2 and fraction 1/2 the rate equals a^2 + b^2.
        assert_relative_eq!(d.epsilon(), 0.08361111111111108, epsilon = 1e-12);
    }

    #[test]
    fn generator_is_skew_and_supported_on_the_plane() {
        let geo = fig_one_geometry();
        let d = construct_divergent(&geo, 0.5, 1).unwrap();
        let skew_defect = (d.q() + d.q().transpose()).abs().max();
        assert!(skew_defect < 1e-12);

        // Q annihilates directions orthogonal to the plane.
        let basis = crate::linalg::orthonormal_nullspace(&d.u().transpose().clone_owned(), 1e-12);
        for j in 0..basis.ncols() {
            let image = d.q() * basis.column(j);
            assert!(image.norm() < 1e-12);
        }
    }

    #[test]
    fn quadratic_form_identity_holds_on_the_plane() {
        let geo = fig_one_geometry();
        let d = construct_divergent(&geo, 0.5, 0).unwrap();
        let rate = d.rotation_re().powi(2) + d.rotation_im().powi(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let x = DVector::from_fn(2, |_, _| 4.0 * rng.random::<f64>() - 2.0);
            let v = d.u() * &x;
            let form = (d.q() * &v).dot(&(&geo.a * &v));
            assert_relative_eq!(form, -rate * x.norm_squared(), max_relative = 1e-10, epsilon = 1e-12);
        }
    }

    #[test]
    fn represented_norm_grows_at_exactly_the_spiral_rate() {
        let geo = fig_one_geometry();
        let d = construct_divergent(&geo, 0.5, 0).unwrap();
        let empty = DVector::zeros(0);
        for theta0 in [0.0, 0.5, 1.0, 5.0, 25.0] {
            let v = divergent_value(&d, theta0, &empty).unwrap();
            assert_relative_eq!(
                v.norm(),
                (d.epsilon() * theta0).exp(),
                max_relative = 1e-12
            );
        }
        let start = divergent_value(&d, 0.0, &empty).unwrap();
        assert_relative_eq!((start - d.v0()).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn spiral_coordinate_drift_stays_positive() {
        for (geo, frac) in [
            (fig_one_geometry(), 0.5),
            (fig_one_geometry(), 0.25),
            (random_mrp(5, 0.9, 3).geometry().unwrap(), 0.5),
        ] {
            let rank = geo.n() - 2;
            let d = construct_divergent(&geo, frac, rank).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            for _ in 0..200 {
                let mut theta = DVector::from_fn(d.param_dim(), |_, _| {
                    6.0 * rng.random::<f64>() - 3.0
                });
                theta[0] = 30.0 * rng.random::<f64>();
                let v = d.value(&theta);
                let drift = -(d.jacobian(&theta).column(0).dot(&(&geo.a * &v)));
                assert!(
                    drift > 0.0,
                    "drift {drift} at theta0 {} (fraction {frac})",
                    theta[0]
                );
            }
        }
    }

    #[test]
    fn extension_cannot_reach_the_spiral_coordinate() {
        let geo = random_mrp(6, 0.9, 14).geometry().unwrap();
        let d = construct_divergent(&geo, 0.5, 4).unwrap();
        let cross = d.u().transpose() * &geo.a * d.extension();
        assert!(cross.abs().max() < 1e-10);

        // Extension columns are orthonormal.
        let gram = d.extension().transpose() * d.extension();
        assert!((gram - DMatrix::identity(4, 4)).abs().max() < 1e-12);
    }

    #[test]
    fn values_stay_inside_the_plane_plus_extension() {
        let geo = random_mrp(5, 0.9, 3).geometry().unwrap();
        let d = construct_divergent(&geo, 0.5, 3).unwrap();
        let mut span = DMatrix::zeros(5, 5);
        span.columns_mut(0, 2).copy_from(d.u());
        span.columns_mut(2, 3).copy_from(d.extension());
        let basis = crate::linalg::orthonormalize_columns(&span);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let theta = DVector::from_fn(4, |i, _| {
                if i == 0 {
                    10.0 * rng.random::<f64>()
                } else {
                    2.0 * rng.random::<f64>() - 1.0
                }
            });
            let v = d.value(&theta);
            let residual = &v - &basis * (basis.transpose() * &v);
            assert!(residual.norm() < 1e-10 * v.norm().max(1.0));
        }
    }

    #[test]
    fn jacobian_matches_finite_differences_and_has_full_rank() {
        let geo = random_mrp(5, 0.9, 3).geometry().unwrap();
        let d = construct_divergent(&geo, 0.5, 3).unwrap();
        let theta = DVector::from_vec(vec![2.5, 0.3, -0.4, 1.2]);
        let analytic = d.jacobian(&theta);
        let fd = crate::approximators::finite_difference_jacobian(
            |t| d.value(t),
            &theta,
            1e-6,
        );
        let rel = (&analytic - &fd).abs().max() / analytic.abs().max();
        assert!(rel < 1e-5, "relative error {rel:e}");

        let svals = analytic.singular_values();
        let significant = svals.iter().filter(|s| **s > 1e-9).count();
        assert_eq!(significant, 4, "spiral tangent plus three extensions");
    }

    #[test]
    fn overflow_guard_refuses_far_points() {
        let geo = fig_one_geometry();
        let d = construct_divergent(&geo, 0.5, 0).unwrap();
        let theta0 = 701.0 / d.epsilon();
        let err = divergent_value(&d, theta0, &DVector::zeros(0)).unwrap_err();
        assert!(matches!(err, ApproxError::DivergedBeyondRange(_)));

        // Far negative coordinates just decay and stay representable.
        assert!(divergent_value(&d, -theta0, &DVector::zeros(0)).is_ok());
    }

    #[test]
    fn chains_without_rotation_are_rejected() {
        let geo = random_mrp(2, 0.9, 0).geometry().unwrap();
        assert!(matches!(
            construct_divergent(&geo, 0.5, 0),
            Err(ApproxError::NoComplexEigenvalue)
        ));
    }

    #[test]
    fn shape_validation() {
        let geo = fig_one_geometry();
        assert!(construct_divergent(&geo, 0.5, 2).is_err());
        assert!(construct_divergent(&geo, 0.0, 0).is_err());
        assert!(construct_divergent(&geo, 1.5, 0).is_err());
    }

    #[test]
    fn serialized_construction_rebuilds_the_same_map() {
        let geo = random_mrp(4, 0.9, 14).geometry().unwrap();
        let d = construct_divergent(&geo, 0.5, 2).unwrap();
        let spec = crate::approximators::ApproximatorSpec::of_divergent(&d);
        let json = serde_json::to_string(&spec).unwrap();
        let rebuilt = serde_json::from_str::<crate::approximators::ApproximatorSpec>(&json)
            .unwrap()
            .build()
            .unwrap();
        let theta = DVector::from_vec(vec![3.0, 0.5, -0.25]);
        assert_eq!(d.value(&theta), rebuilt.value(&theta));
        assert_eq!(rebuilt.param_dim(), 3);
    }
}
