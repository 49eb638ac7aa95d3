//! Expected continuous-time dynamics of temporal-difference (TD) value
//! estimation on finite Markov reward processes.
//!
//! The crate builds chains and their TD geometry (stationary weights, drive
//! matrix, value target), measures how far the dynamics are from a gradient
//! flow (reversibility spectra, tangent-kernel conditioning), integrates the
//! expected TD ODE for several approximator families, synthesizes divergent
//! counterexamples, and turns the boundedness and convergence claims these
//! quantities control into executable numerical checks.

pub mod approximators;
pub mod dynamics;
pub mod ext;
pub mod linalg;
pub mod mrp;
pub mod spectral;
pub mod verify;

pub use approximators::{
    calibrated_perturbed_tabular, check_homogeneity, construct_divergent, divergent_value,
    finite_difference_jacobian, homogeneous_network, linear, linear_fixed_point, mu_projection,
    residual_network, tabular, Activation, ApproxError, Approximator, ApproximatorSpec,
    DivergentApproximator, HomogeneityReport, HomogeneousNetwork, Linear, PerturbedTabular,
    ResidualHomogeneousNetwork, Tabular,
};
pub use dynamics::{
    diagnostics_at, integrate, k_step_vector_field, liminf_estimate, td_vector_field,
    trajectory_csv_string, vector_field_csv_string, vector_field_grid, write_trajectory_csv,
    write_vector_field_csv, DiagnosticsFlags, DiagnosticsRow, DynError, FieldSample, GridSpec,
    IntegratorConfig, Method, TdField, Trajectory, TrajectoryStatus,
};
pub use ext::ExtReal;
pub use mrp::{
    cycle_mrp, k_step_matrix, mu_norm, random_mrp, td_matrix, validate, MarkovRewardProcess,
    MatrixSplit, MrpError, Reward, TdGeometry, ValidityCertificate,
};
pub use spectral::{
    effective_reversibility, gershgorin_smin_bound, k_step_lower_bound, lambda2,
    reversibility_coefficient, reversibility_report, tangent_kernel_condition,
    ReversibilityReport, SpectralError,
};
pub use verify::{
    run_full_suite, write_reports, ClaimConfig, ClaimId, VerificationReport, VerifyError,
};
