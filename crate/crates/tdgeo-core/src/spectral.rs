//! Spectral quantities governing whether expected TD dynamics behave like a
//! gradient flow: the reversibility coefficient of a drive matrix, its
//! k-step analogue, the second transition eigenvalue, closed-form bounds on
//! both, and tangent-kernel condition numbers.

use crate::ext::ExtReal;
use crate::linalg;
use crate::mrp::{MatrixSplit, TdGeometry};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Antisymmetric parts with Frobenius norm below this are treated as zero
/// and the coefficient reported as infinite.
pub const REVERSIBLE_TOL: f64 = 1e-12;

/// Tangent kernels whose smallest eigenvalue falls below this fraction of
/// the largest are reported as rank-deficient (infinite condition number).
pub const RANK_DEFICIENT_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("normal-equation matrix is numerically singular; geometry is corrupted")]
    SolveFailure,
}

/// Reversibility coefficient of a drive matrix split (S, R, A):
/// the minimum over nonzero V of (|SV|^2 + |AV|^2) / |RV|^2, computed as
/// the reciprocal top eigenvalue of (S^T S + A^T A)^-1 R^T R. Infinite
/// exactly when the chain is reversible (R vanishes).
pub fn reversibility_coefficient(split: &MatrixSplit) -> Result<ExtReal, SpectralError> {
    if split.skew.norm() < REVERSIBLE_TOL {
        return Ok(ExtReal::Infinite);
    }
    let m = split.sym.transpose() * &split.sym + split.full.transpose() * &split.full;
    let rtr = split.skew.transpose() * &split.skew;
    let lambda_max =
        linalg::generalized_max_eigenvalue(&m, &rtr).map_err(|_| SpectralError::SolveFailure)?;
    if lambda_max <= 0.0 {
        return Ok(ExtReal::Infinite);
    }
    Ok(ExtReal::Finite(1.0 / lambda_max))
}

/// Reversibility coefficient of the k-step drive matrix
/// D_mu(I - (gamma P)^k). Grows with k as the antisymmetric part decays.
pub fn effective_reversibility(geometry: &TdGeometry, k: u32) -> Result<ExtReal, SpectralError> {
    reversibility_coefficient(&geometry.k_step(k))
}

/// Modulus of the second-largest transition eigenvalue; strictly below 1
/// for irreducible aperiodic chains. Zero for a single-state chain.
pub fn lambda2(p: &DMatrix<f64>) -> f64 {
    let n = p.nrows();
    if n < 2 {
        return 0.0;
    }
    let mut mods: Vec<f64> = p
        .clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .collect();
    mods.sort_by(|a, b| b.partial_cmp(a).unwrap());
    mods[1]
}

/// Closed-form lower bound mu_min(1 - gamma^k)/mu_max * (gamma lambda2)^-k
/// on sqrt of the k-step reversibility coefficient. Infinite when
/// gamma * lambda2 = 0 (the k-step drive is already symmetric).
///
/// The bound is exact bookkeeping of its formula; whether it actually lies
/// below sqrt(rho_k) depends on the transition matrix being close to normal.
/// See `verify::kstep_bounds` for the check that exercises this.
pub fn k_step_lower_bound(mu_min: f64, mu_max: f64, gamma: f64, k: u32, lambda2: f64) -> ExtReal {
    let gl = gamma * lambda2;
    if gl <= 0.0 {
        return ExtReal::Infinite;
    }
    ExtReal::Finite(mu_min * (1.0 - gamma.powi(k as i32)) / mu_max * gl.powi(-(k as i32)))
}

/// Certified lower bound mu_min(1 - gamma^k) on the smallest eigenvalue of
/// the symmetric part of the k-step drive matrix (a Gershgorin disc bound;
/// row and column sums of the off-diagonal mass are both gamma^k mu_i).
pub fn gershgorin_smin_bound(mu_min: f64, gamma: f64, k: u32) -> f64 {
    mu_min * (1.0 - gamma.powi(k as i32))
}

/// Condition number of the tangent kernel J J^T: ratio of extreme
/// eigenvalues, infinite when the kernel is rank-deficient
/// (lambda_min < 1e-12 lambda_max), which includes every Jacobian with
/// fewer parameters than states.
pub fn tangent_kernel_condition(j: &DMatrix<f64>) -> ExtReal {
    let n = j.nrows();
    let svals = j.clone().singular_values();
    let sigma_max = svals.iter().cloned().fold(0.0_f64, f64::max);
    if sigma_max == 0.0 {
        return ExtReal::Infinite;
    }
    let lambda_max = sigma_max * sigma_max;
    // J J^T has n eigenvalues; an n x d Jacobian with d < n pads the
    // spectrum with zeros.
    let lambda_min = if svals.len() < n {
        0.0
    } else {
        let sigma_min = svals.iter().cloned().fold(f64::INFINITY, f64::min);
        sigma_min * sigma_min
    };
    if lambda_min < RANK_DEFICIENT_TOL * lambda_max {
        return ExtReal::Infinite;
    }
    ExtReal::Finite(lambda_max / lambda_min)
}

/// Spectral summary of a geometry at a requested step count k.
/// Serializes with infinities encoded as the string "inf".
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ReversibilityReport {
    pub rho: ExtReal,
    pub k: u32,
    pub rho_k: ExtReal,
    pub lambda2: f64,
    pub lower_bound_k: ExtReal,
    pub is_reversible: bool,
}

pub fn reversibility_report(
    geometry: &TdGeometry,
    k: u32,
) -> Result<ReversibilityReport, SpectralError> {
    let rho = reversibility_coefficient(&MatrixSplit {
        full: geometry.a.clone(),
        sym: geometry.a_sym.clone(),
        skew: geometry.a_skew.clone(),
    })?;
    let rho_k = effective_reversibility(geometry, k)?;
    let l2 = lambda2(&geometry.p);
    let mu_min = geometry.mu.min();
    let mu_max = geometry.mu.max();
    let lower_bound_k = k_step_lower_bound(mu_min, mu_max, geometry.gamma, k, l2);
    Ok(ReversibilityReport {
        rho,
        k,
        rho_k,
        lambda2: l2,
        lower_bound_k,
        is_reversible: rho.is_infinite(),
    })
}

/// How the measured tangent-kernel conditioning compares against the
/// geometry's reversibility coefficient along a sample of Jacobians.
#[derive(Clone, Debug, Serialize)]
pub struct ConditioningReport {
    pub rho: ExtReal,
    pub max_kappa: ExtReal,
    /// True when max_kappa < rho strictly (the convergence premise).
    pub holds: bool,
    /// rho - max_kappa when both are finite.
    pub margin: Option<f64>,
    /// Index of the sample attaining max_kappa.
    pub worst_sample: usize,
}

/// Evaluate kappa(J J^T) at every supplied Jacobian and compare the worst
/// case against the geometry's reversibility coefficient.
pub fn conditioning_report(
    geometry: &TdGeometry,
    jacobians: &[DMatrix<f64>],
) -> Result<ConditioningReport, SpectralError> {
    assert!(!jacobians.is_empty(), "need at least one Jacobian sample");
    let rho = reversibility_coefficient(&MatrixSplit {
        full: geometry.a.clone(),
        sym: geometry.a_sym.clone(),
        skew: geometry.a_skew.clone(),
    })?;
    let mut max_kappa = ExtReal::Finite(0.0);
    let mut worst = 0;
    for (i, j) in jacobians.iter().enumerate() {
        let kappa = tangent_kernel_condition(j);
        if kappa > max_kappa {
            max_kappa = kappa;
            worst = i;
        }
    }
    let holds = max_kappa < rho;
    let margin = match (rho, max_kappa) {
        (ExtReal::Finite(r), ExtReal::Finite(k)) => Some(r - k),
        _ => None,
    };
    Ok(ConditioningReport {
        rho,
        max_kappa,
        holds,
        margin,
        worst_sample: worst,
    })
}
