//! Integration of the expected TD ordinary differential equations.
//!
//! The flow theta' = -J(theta)^T A (V(theta) - V*) is integrated with a
//! fixed-step RK4 or an adaptive Dormand-Prince RK45, recording the state
//! together with the diagnostic scalars the claim checks consume: stationary
//! norms, the Lyapunov quadratic, the parameter radius and its derivative,
//! and the tangent-kernel condition number.

use crate::approximators::Approximator;
use crate::ext::ExtReal;
use crate::mrp::TdGeometry;
use crate::spectral::tangent_kernel_condition;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynError {
    #[error("adaptive step size underflowed below {min_step:e} at t = {t}")]
    StepFailure { t: f64, min_step: f64 },
    #[error("state became non-finite at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("tail window holds {found} samples, need at least {need}")]
    TooFewSamples { found: usize, need: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const MIN_STEP: f64 = 1e-14;
const CONVERGENCE_TOL: f64 = 1e-12;
const CONVERGED_SAMPLES: usize = 3;
const MAX_ACCEPTED_STEPS: usize = 20_000_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    Rk4Fixed { dt: f64 },
    Rk45Adaptive { rtol: f64, atol: f64 },
}

/// Which diagnostic scalars to evaluate at recorded samples. Disabled
/// entries are stored as NaN (the stationary norm is always computed since
/// the divergence check needs it).
#[derive(Clone, Copy, Debug)]
pub struct DiagnosticsFlags {
    pub mu_error: bool,
    pub lyapunov: bool,
    pub theta_norm: bool,
    pub kappa: bool,
}

impl Default for DiagnosticsFlags {
    fn default() -> Self {
        DiagnosticsFlags {
            mu_error: true,
            lyapunov: true,
            theta_norm: true,
            kappa: true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct IntegratorConfig {
    pub method: Method,
    pub t_max: f64,
    /// Record every this-many accepted steps (the initial and final states
    /// are always recorded).
    pub record_every: usize,
    pub divergence_threshold: f64,
    pub diagnostics: DiagnosticsFlags,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            method: Method::Rk45Adaptive {
                rtol: 1e-8,
                atol: 1e-10,
            },
            t_max: 50.0,
            record_every: 1,
            divergence_threshold: 1e6,
            diagnostics: DiagnosticsFlags::default(),
        }
    }
}

impl IntegratorConfig {
    fn validate(&self) {
        match self.method {
            Method::Rk4Fixed { dt } => assert!(dt > 0.0, "dt must be positive"),
            Method::Rk45Adaptive { rtol, atol } => {
                assert!(rtol > 0.0 && atol > 0.0, "tolerances must be positive")
            }
        }
        assert!(self.t_max > 0.0, "horizon must be positive");
        assert!(self.record_every >= 1, "record stride must be at least 1");
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryStatus {
    Converged,
    HorizonReached,
    Diverged,
}

impl fmt::Display for TrajectoryStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TrajectoryStatus::Converged => "converged",
            TrajectoryStatus::HorizonReached => "horizon",
            TrajectoryStatus::Diverged => "diverged",
        };
        f.write_str(s)
    }
}

/// Diagnostic scalars at one recorded sample.
#[derive(Clone, Debug)]
pub struct DiagnosticsRow {
    /// ||V(theta)||_mu
    pub norm_mu: f64,
    /// ||V(theta) - V*||_mu
    pub norm_mu_err: f64,
    /// (V - V*)^T S_A (V - V*), the Lyapunov quadratic of the drive.
    pub lyapunov: f64,
    pub theta_norm_sq: f64,
    pub kappa: ExtReal,
    /// d||theta||^2/dt = 2 theta . field(theta).
    pub radial_derivative: f64,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub thetas: Vec<DVector<f64>>,
    pub values: Vec<DVector<f64>>,
    pub diagnostics: Vec<DiagnosticsRow>,
    pub terminal_status: TrajectoryStatus,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn terminal_theta(&self) -> &DVector<f64> {
        self.thetas.last().expect("trajectory records at least t = 0")
    }

    pub fn terminal_value(&self) -> &DVector<f64> {
        self.values.last().expect("trajectory records at least t = 0")
    }
}

/// The expected TD drift for a fixed approximator and chain geometry,
/// theta' = -J(theta)^T A_k (V(theta) - V*). Built by `td_vector_field`
/// (k = 1) or `k_step_vector_field`.
pub struct TdField<'a> {
    approx: &'a dyn Approximator,
    geometry: &'a TdGeometry,
    drive: DMatrix<f64>,
    k: u32,
}

pub fn td_vector_field<'a>(
    approx: &'a dyn Approximator,
    geometry: &'a TdGeometry,
) -> TdField<'a> {
    TdField {
        approx,
        geometry,
        drive: geometry.a.clone(),
        k: 1,
    }
}

pub fn k_step_vector_field<'a>(
    approx: &'a dyn Approximator,
    geometry: &'a TdGeometry,
    k: u32,
) -> TdField<'a> {
    assert!(k >= 1, "k-step lookahead needs k >= 1");
    let drive = if k == 1 {
        geometry.a.clone()
    } else {
        geometry.k_step(k).full
    };
    TdField {
        approx,
        geometry,
        drive,
        k,
    }
}

impl TdField<'_> {
    pub fn eval(&self, theta: &DVector<f64>) -> DVector<f64> {
        let v = self.approx.value(theta);
        let j = self.approx.jacobian(theta);
        -(j.transpose() * (&self.drive * (v - &self.geometry.v_star)))
    }

    pub fn geometry(&self) -> &TdGeometry {
        self.geometry
    }

    pub fn approximator(&self) -> &dyn Approximator {
        self.approx
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    fn diagnostics(&self, theta: &DVector<f64>, flags: DiagnosticsFlags) -> (DVector<f64>, DiagnosticsRow) {
        let v = self.approx.value(theta);
        let geo = self.geometry;
        let err = &v - &geo.v_star;
        let field = {
            let j = self.approx.jacobian(theta);
            -(j.transpose() * (&self.drive * &err))
        };
        let row = DiagnosticsRow {
            norm_mu: geo.mu_norm(&v),
            norm_mu_err: if flags.mu_error {
                geo.mu_norm(&err)
            } else {
                f64::NAN
            },
            lyapunov: if flags.lyapunov {
                err.dot(&(&geo.a_sym * &err))
            } else {
                f64::NAN
            },
            theta_norm_sq: if flags.theta_norm {
                theta.norm_squared()
            } else {
                f64::NAN
            },
            kappa: if flags.kappa {
                tangent_kernel_condition(&self.approx.jacobian(theta))
            } else {
                ExtReal::Finite(f64::NAN)
            },
            radial_derivative: 2.0 * theta.dot(&field),
        };
        (v, row)
    }
}

/// Diagnostic scalars for the one-step dynamics at a single parameter point.
pub fn diagnostics_at(
    approx: &dyn Approximator,
    geometry: &TdGeometry,
    theta: &DVector<f64>,
) -> DiagnosticsRow {
    td_vector_field(approx, geometry)
        .diagnostics(theta, DiagnosticsFlags::default())
        .1
}

struct Recorder<'a, 'b> {
    field: &'a TdField<'b>,
    config: &'a IntegratorConfig,
    traj: Trajectory,
    calm_streak: usize,
    seen_motion: bool,
}

enum RecordOutcome {
    Continue,
    Halt(TrajectoryStatus),
}

impl Recorder<'_, '_> {
    fn record(&mut self, t: f64, theta: &DVector<f64>) -> RecordOutcome {
        let (v, row) = self.field.diagnostics(theta, self.config.diagnostics);
        let diverged = row.norm_mu > self.config.divergence_threshold;
        let field_norm = self.field.eval(theta).norm();
        self.traj.times.push(t);
        self.traj.thetas.push(theta.clone());
        self.traj.values.push(v);
        self.traj.diagnostics.push(row);
        if diverged {
            return RecordOutcome::Halt(TrajectoryStatus::Diverged);
        }
        if field_norm < CONVERGENCE_TOL {
            // Converged means the flow came to rest: a run that starts at
            // a rest point and never moves reaches the horizon instead.
            if self.seen_motion {
                self.calm_streak += 1;
                if self.calm_streak >= CONVERGED_SAMPLES {
                    return RecordOutcome::Halt(TrajectoryStatus::Converged);
                }
            }
        } else {
            self.seen_motion = true;
            self.calm_streak = 0;
        }
        RecordOutcome::Continue
    }
}

/// Integrate the field from `theta0` under `config`. The divergence
/// threshold is checked at every accepted step (the offending sample is
/// recorded before halting, so a Diverged status always has a recorded
/// witness); other samples land on the configured stride.
pub fn integrate(
    field: &TdField,
    theta0: &DVector<f64>,
    config: &IntegratorConfig,
) -> Result<Trajectory, DynError> {
    config.validate();
    if theta0.iter().any(|x| !x.is_finite()) {
        return Err(DynError::NonFiniteState { t: 0.0 });
    }

    let mut rec = Recorder {
        field,
        config,
        traj: Trajectory {
            times: Vec::new(),
            thetas: Vec::new(),
            values: Vec::new(),
            diagnostics: Vec::new(),
            terminal_status: TrajectoryStatus::HorizonReached,
        },
        calm_streak: 0,
        seen_motion: false,
    };

    if let RecordOutcome::Halt(status) = rec.record(0.0, theta0) {
        rec.traj.terminal_status = status;
        return Ok(rec.traj);
    }

    let status = match config.method {
        Method::Rk4Fixed { dt } => run_rk4(field, theta0, config, dt, &mut rec)?,
        Method::Rk45Adaptive { rtol, atol } => {
            run_rk45(field, theta0, config, rtol, atol, &mut rec)?
        }
    };
    rec.traj.terminal_status = status;
    Ok(rec.traj)
}

fn check_finite(theta: &DVector<f64>, t: f64) -> Result<(), DynError> {
    if theta.iter().any(|x| !x.is_finite()) {
        return Err(DynError::NonFiniteState { t });
    }
    Ok(())
}

fn rk4_step(field: &TdField, theta: &DVector<f64>, h: f64) -> DVector<f64> {
    let k1 = field.eval(theta);
    let k2 = field.eval(&(theta + &k1 * (h / 2.0)));
    let k3 = field.eval(&(theta + &k2 * (h / 2.0)));
    let k4 = field.eval(&(theta + &k3 * h));
    theta + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

fn run_rk4(
    field: &TdField,
    theta0: &DVector<f64>,
    config: &IntegratorConfig,
    dt: f64,
    rec: &mut Recorder,
) -> Result<TrajectoryStatus, DynError> {
    let mut theta = theta0.clone();
    let mut t = 0.0;
    let mut accepted: usize = 0;
    while t < config.t_max - 1e-12 * config.t_max {
        let h = dt.min(config.t_max - t);
        theta = rk4_step(field, &theta, h);
        t += h;
        accepted += 1;
        check_finite(&theta, t)?;
        let due = accepted % config.record_every == 0 || t >= config.t_max - 1e-12 * config.t_max;
        if due || must_check_divergence(field, &theta, config) {
            if let RecordOutcome::Halt(status) = rec.record(t, &theta) {
                return Ok(status);
            }
        }
        if accepted > MAX_ACCEPTED_STEPS {
            return Err(DynError::StepFailure { t, min_step: dt });
        }
    }
    Ok(TrajectoryStatus::HorizonReached)
}

fn must_check_divergence(field: &TdField, theta: &DVector<f64>, config: &IntegratorConfig) -> bool {
    let v = field.approx.value(theta);
    field.geometry.mu_norm(&v) > config.divergence_threshold
}

// Dormand-Prince 5(4) tableau. The time nodes are omitted: every field
// here is autonomous.
const DP_A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

#[allow(clippy::too_many_arguments)]
fn run_rk45(
    field: &TdField,
    theta0: &DVector<f64>,
    config: &IntegratorConfig,
    rtol: f64,
    atol: f64,
    rec: &mut Recorder,
) -> Result<TrajectoryStatus, DynError> {
    let dim = theta0.len();
    let mut theta = theta0.clone();
    let mut t = 0.0;
    let mut h = (config.t_max * 1e-4).clamp(1e-8, 0.1);
    let mut accepted: usize = 0;

    while t < config.t_max - 1e-12 * config.t_max {
        h = h.min(config.t_max - t);
        if h < MIN_STEP {
            return Err(DynError::StepFailure { t, min_step: MIN_STEP });
        }

        let mut stages: Vec<DVector<f64>> = Vec::with_capacity(7);
        stages.push(field.eval(&theta));
        for s in 1..7 {
            let mut arg = theta.clone();
            for (j, stage) in stages.iter().enumerate() {
                let a = DP_A[s - 1][j];
                if a != 0.0 {
                    arg += stage * (a * h);
                }
            }
            stages.push(field.eval(&arg));
        }

        let mut y5 = theta.clone();
        let mut y4 = theta.clone();
        for (j, stage) in stages.iter().enumerate() {
            if DP_B5[j] != 0.0 {
                y5 += stage * (DP_B5[j] * h);
            }
            if DP_B4[j] != 0.0 {
                y4 += stage * (DP_B4[j] * h);
            }
        }

        if y5.iter().any(|x| !x.is_finite()) {
            // Shrink and retry; persistent blow-up ends in StepFailure.
            h *= 0.2;
            continue;
        }

        let mut err_sq = 0.0;
        for i in 0..dim {
            let sc = atol + rtol * theta[i].abs().max(y5[i].abs());
            let e = (y5[i] - y4[i]) / sc;
            err_sq += e * e;
        }
        let err = (err_sq / dim as f64).sqrt();

        if err <= 1.0 {
            t += h;
            theta = y5;
            accepted += 1;
            check_finite(&theta, t)?;
            let due = accepted % config.record_every == 0
                || t >= config.t_max - 1e-12 * config.t_max
                || must_check_divergence(field, &theta, config);
            if due {
                if let RecordOutcome::Halt(status) = rec.record(t, &theta) {
                    return Ok(status);
                }
            }
            if accepted > MAX_ACCEPTED_STEPS {
                return Err(DynError::StepFailure { t, min_step: h });
            }
        }

        let factor = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        h *= factor;
    }
    Ok(TrajectoryStatus::HorizonReached)
}

/// Minimum of a diagnostic over the final `tail_fraction` of the time
/// window: the numerical surrogate for a liminf.
pub fn liminf_estimate<F>(
    traj: &Trajectory,
    quantity: F,
    tail_fraction: f64,
) -> Result<f64, DynError>
where
    F: Fn(&DiagnosticsRow) -> f64,
{
    assert!(
        tail_fraction > 0.0 && tail_fraction <= 1.0,
        "tail fraction must lie in (0, 1]"
    );
    let t_end = *traj.times.last().expect("nonempty trajectory");
    let t_start = traj.times[0];
    let cutoff = t_end - tail_fraction * (t_end - t_start);
    let tail: Vec<f64> = traj
        .times
        .iter()
        .zip(&traj.diagnostics)
        .filter(|(t, _)| **t >= cutoff)
        .map(|(_, row)| quantity(row))
        .collect();
    if tail.len() < 10 {
        return Err(DynError::TooFewSamples {
            found: tail.len(),
            need: 10,
        });
    }
    Ok(tail.into_iter().fold(f64::INFINITY, f64::min))
}

#[derive(Clone, Copy, Debug)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub nx: usize,
    pub ny: usize,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct FieldSample {
    pub x: f64,
    pub y: f64,
    pub fx: f64,
    pub fy: f64,
}

/// The ambient value-space field -A(V - V*) evaluated on a planar slice
/// V = x b1 + y b2 and projected back onto the plane.
pub fn vector_field_grid(
    geometry: &TdGeometry,
    plane_basis: (&DVector<f64>, &DVector<f64>),
    spec: &GridSpec,
) -> Vec<FieldSample> {
    let (b1, b2) = plane_basis;
    assert_eq!(b1.len(), geometry.n(), "basis dimension mismatch");
    assert_eq!(b2.len(), geometry.n(), "basis dimension mismatch");
    assert!(
        (b1.norm() - 1.0).abs() < 1e-10
            && (b2.norm() - 1.0).abs() < 1e-10
            && b1.dot(b2).abs() < 1e-10,
        "plane basis must be orthonormal"
    );
    assert!(spec.nx >= 2 && spec.ny >= 2, "grid needs at least 2x2 points");

    let mut out = Vec::with_capacity(spec.nx * spec.ny);
    for iy in 0..spec.ny {
        for ix in 0..spec.nx {
            let x = spec.x_range.0
                + (spec.x_range.1 - spec.x_range.0) * ix as f64 / (spec.nx - 1) as f64;
            let y = spec.y_range.0
                + (spec.y_range.1 - spec.y_range.0) * iy as f64 / (spec.ny - 1) as f64;
            let v = b1 * x + b2 * y;
            let f = -(&geometry.a * (v - &geometry.v_star));
            out.push(FieldSample {
                x,
                y,
                fx: b1.dot(&f),
                fy: b2.dot(&f),
            });
        }
    }
    out
}

fn push_f64(s: &mut String, x: f64) {
    use std::fmt::Write as _;
    write!(s, "{x}").unwrap();
}

/// CSV with the fixed header
/// `t,theta_0..theta_{d-1},v_0..v_{n-1},norm_mu,norm_mu_err,lyapunov,theta_norm_sq,kappa,status`.
/// Intermediate rows carry status `ok`; the final row carries the terminal
/// status. A rank-deficient kernel prints kappa as `inf`.
pub fn trajectory_csv_string(traj: &Trajectory) -> String {
    let d = traj.thetas.first().map_or(0, |th| th.len());
    let n = traj.values.first().map_or(0, |v| v.len());
    let mut s = String::new();
    s.push('t');
    for i in 0..d {
        s.push_str(&format!(",theta_{i}"));
    }
    for i in 0..n {
        s.push_str(&format!(",v_{i}"));
    }
    s.push_str(",norm_mu,norm_mu_err,lyapunov,theta_norm_sq,kappa,status\n");

    for idx in 0..traj.len() {
        push_f64(&mut s, traj.times[idx]);
        for i in 0..d {
            s.push(',');
            push_f64(&mut s, traj.thetas[idx][i]);
        }
        for i in 0..n {
            s.push(',');
            push_f64(&mut s, traj.values[idx][i]);
        }
        let row = &traj.diagnostics[idx];
        for val in [row.norm_mu, row.norm_mu_err, row.lyapunov, row.theta_norm_sq] {
            s.push(',');
            push_f64(&mut s, val);
        }
        s.push(',');
        match row.kappa {
            ExtReal::Finite(k) => push_f64(&mut s, k),
            ExtReal::Infinite => s.push_str("inf"),
        }
        s.push(',');
        if idx + 1 == traj.len() {
            s.push_str(&traj.terminal_status.to_string());
        } else {
            s.push_str("ok");
        }
        s.push('\n');
    }
    s
}

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<(), DynError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(trajectory_csv_string(traj).as_bytes())?;
    Ok(())
}

/// CSV with header `x,y,fx,fy`, one row per grid point.
pub fn vector_field_csv_string(grid: &[FieldSample]) -> String {
    let mut s = String::from("x,y,fx,fy\n");
    for p in grid {
        for (i, val) in [p.x, p.y, p.fx, p.fy].into_iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            push_f64(&mut s, val);
        }
        s.push('\n');
    }
    s
}

pub fn write_vector_field_csv(path: &Path, grid: &[FieldSample]) -> Result<(), DynError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(vector_field_csv_string(grid).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximators::{
        calibrated_perturbed_tabular, construct_divergent, homogeneous_network, linear,
        linear_fixed_point, tabular, Activation,
    };
    use crate::linalg::{expm, orthonormalize_columns, symmetric_eigenvalues_sorted};
    use crate::mrp::{cycle_mrp, random_mrp, MarkovRewardProcess, Reward};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rewarded_cycle(gamma: f64) -> MarkovRewardProcess {
        let p = cycle_mrp(3, 0.0, gamma).unwrap().p().clone();
        MarkovRewardProcess::new(
            p,
            Reward::Vector(DVector::from_vec(vec![1.0, -0.5, 0.25])),
            gamma,
        )
        .unwrap()
    }

    #[test]
    fn field_vanishes_at_the_value_target() {
        let geo = rewarded_cycle(0.9).geometry().unwrap();
        let approx = tabular(3);
        let field = td_vector_field(&approx, &geo);
        let f = field.eval(&geo.v_star.clone());
        assert!(f.norm() < 1e-12);
    }

    #[test]
    fn tabular_field_is_the_negative_drive_times_error() {
        let geo = rewarded_cycle(0.9).geometry().unwrap();
        let approx = tabular(3);
        let field = td_vector_field(&approx, &geo);
        let theta = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let expected = -(&geo.a * (&theta - &geo.v_star));
        assert!((field.eval(&theta) - expected).norm() < 1e-14);
    }

    #[test]
    fn linear_field_matches_the_fixed_point_form() {
        let geo = random_mrp(4, 0.9, 21).geometry().unwrap();
        let phi = DMatrix::from_fn(4, 2, |i, j| ((i * 2 + j + 1) as f64).sqrt());
        let approx = linear(phi.clone()).unwrap();
        let (theta_star, _) = linear_fixed_point(&phi, &geo).unwrap();
        let field = td_vector_field(&approx, &geo);
        let m = phi.transpose() * &geo.a * &phi;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let theta = DVector::from_fn(2, |_, _| 4.0 * rng.random::<f64>() - 2.0);
            let expected = -(&m * (&theta - &theta_star));
            assert!(
                (field.eval(&theta) - expected).norm() < 1e-10,
                "field must be linear in theta - theta*"
            );
        }
    }

    #[test]
    fn one_step_lookahead_is_the_plain_field() {
        let geo = rewarded_cycle(0.9).geometry().unwrap();
        let approx = tabular(3);
        let a = td_vector_field(&approx, &geo);
        let b = k_step_vector_field(&approx, &geo, 1);
        let theta = DVector::from_vec(vec![0.5, -0.3, 0.8]);
        assert_eq!(a.eval(&theta), b.eval(&theta));
    }

    #[test]
    fn long_lookahead_approaches_the_gradient_flow() {
        let geo = rewarded_cycle(0.9).geometry().unwrap();
        let gamma: f64 = 0.9;
        for k in [10u32, 20, 40] {
            let drive = geo.k_step(k).full;
            let gap = (&drive - geo.d_mu()).abs().max();
            assert!(
                gap <= gamma.powi(k as i32),
                "k = {k}: gap {gap:e} above gamma^k {:e}",
                gamma.powi(k as i32)
            );
        }
        let approx = tabular(3);
        let field = k_step_vector_field(&approx, &geo, 40);
        let theta = DVector::from_vec(vec![1.0, 0.0, -1.0]);
        let grad_limit = -(geo.d_mu() * (&theta - &geo.v_star));
        assert!((field.eval(&theta) - grad_limit).norm() < 10.0 * gamma.powi(40));
    }

    #[test]
    fn zero_field_stays_constant_to_the_horizon() {
        let geo = rewarded_cycle(0.9).geometry().unwrap();
        let approx = tabular(3);
        let field = td_vector_field(&approx, &geo);
        let config = IntegratorConfig {
            t_max: 1.0,
            ..Default::default()
        };
        let traj = integrate(&field, &geo.v_star.clone(), &config).unwrap();
        assert_eq!(traj.terminal_status, TrajectoryStatus::HorizonReached);
        for theta in &traj.thetas {
            assert!((theta - &geo.v_star).norm() < 1e-12);
        }
    }

    #[test]
    fn tabular_error_decays_at_the_symmetric_rate() {
        let geo = random_mrp(5, 0.9, 4).geometry().unwrap();
        let approx = tabular(5);
        let field = td_vector_field(&approx, &geo);
        let theta0 = &geo.v_star + DVector::from_vec(vec![1.0, -1.0, 0.5, 0.25, -0.75]);
        let config = IntegratorConfig {
            t_max: 20.0,
            ..Default::default()
        };
        let traj = integrate(&field, &theta0, &config).unwrap();
        let lambda_min = symmetric_eigenvalues_sorted(&geo.a_sym)[0];
        assert!(lambda_min > 0.0);
        let init = (&theta0 - &geo.v_star).norm();
        for (t, theta) in traj.times.iter().zip(&traj.thetas) {
            let err = (theta - &geo.v_star).norm();
            assert!(
                err <= (-lambda_min * t).exp() * init * (1.0 + 1e-6),
                "error {err} above rate bound at t = {t}"
            );
        }
    }

    #[test]
    fn rk4_terminal_error_shrinks_at_fourth_order() {
        let geo = random_mrp(4, 0.9, 2).geometry().unwrap();
        let approx = tabular(4);
        let field = td_vector_field(&approx, &geo);
        let theta0 = &geo.v_star + DVector::from_vec(vec![1.0, -0.5, 0.75, -0.25]);
        let t_max = 2.0;
        let closed_form = |t: f64| -> DVector<f64> {
            expm(&(-&geo.a * t)) * (&theta0 - &geo.v_star) + &geo.v_star
        };
        let mut errors = Vec::new();
        let mut dt = 0.25;
        for _ in 0..4 {
            let config = IntegratorConfig {
                method: Method::Rk4Fixed { dt },
                t_max,
                record_every: usize::MAX,
                ..Default::default()
            };
            let traj = integrate(&field, &theta0, &config).unwrap();
            assert_relative_eq!(*traj.times.last().unwrap(), t_max, epsilon = 1e-9);
            errors.push((traj.terminal_theta() - closed_form(t_max)).norm());
            dt /= 2.0;
        }
        for pair in errors.windows(2) {
            let ratio = pair[0] / pair[1];
            assert!(ratio >= 6.4, "halving dt only improved error by {ratio}");
        }
    }

    #[test]
    fn linear_run_converges_to_the_fixed_point() {
        let geo = random_mrp(4, 0.9, 7).geometry().unwrap();
        let phi = DMatrix::from_fn(4, 2, |i, j| if j == 0 { 1.0 } else { i as f64 - 1.5 });
        let approx = linear(phi.clone()).unwrap();
        let (theta_star, _) = linear_fixed_point(&phi, &geo).unwrap();
        let m_sym = phi.transpose() * &geo.a_sym * &phi;
        let lambda_min = symmetric_eigenvalues_sorted(&m_sym)[0];
        assert!(lambda_min > 0.0);
        let field = td_vector_field(&approx, &geo);
        // Tolerances must sit below the rest detector, or the adaptive
        // controller floors the state error above it.
        let config = IntegratorConfig {
            method: Method::Rk45Adaptive {
                rtol: 1e-10,
                atol: 1e-14,
            },
            t_max: 50.0 / lambda_min,
            ..Default::default()
        };
        let traj = integrate(&field, &DVector::from_vec(vec![5.0, -5.0]), &config).unwrap();
        assert_eq!(traj.terminal_status, TrajectoryStatus::Converged);
        assert!((traj.terminal_theta() - &theta_star).norm() < 1e-6);
    }

    #[test]
    fn divergent_family_trips_the_threshold_with_growing_radius() {
        let geo = cycle_mrp(3, 0.0, 0.9).unwrap().geometry().unwrap();
        let approx = construct_divergent(&geo, 0.5, 0).unwrap();
        let field = td_vector_field(&approx, &geo);
        let config = IntegratorConfig {
            t_max: 1e7,
            record_every: 16,
            ..Default::default()
        };
        let traj = integrate(&field, &approx.initial_theta(), &config).unwrap();
        assert_eq!(traj.terminal_status, TrajectoryStatus::Diverged);
        let last = traj.diagnostics.last().unwrap();
        assert!(last.norm_mu > 1e6);
        for pair in traj.diagnostics.windows(2) {
            assert!(
                pair[1].theta_norm_sq >= pair[0].theta_norm_sq,
                "parameter radius must grow monotonically"
            );
        }
    }

    #[test]
    fn perturbed_tabular_lyapunov_decreases_under_the_condition() {
        let geo = rewarded_cycle(0.9).geometry().unwrap();
        let approx = calibrated_perturbed_tabular(&geo, 7.0, 3).unwrap();
        let field = td_vector_field(&approx, &geo);
        let config = IntegratorConfig {
            t_max: 30.0,
            ..Default::default()
        };
        let theta0 = DVector::from_vec(vec![2.0, -1.0, 1.5]);
        let traj = integrate(&field, &theta0, &config).unwrap();
        for pair in traj.diagnostics.windows(2) {
            assert!(
                pair[1].lyapunov <= pair[0].lyapunov + 1e-10,
                "Lyapunov rose from {} to {}",
                pair[0].lyapunov,
                pair[1].lyapunov
            );
        }
    }

    #[test]
    fn symmetric_lookahead_gives_monotone_mu_error() {
        // A two-state chain with symmetric P has a symmetric k-step drive.
        let p = DMatrix::from_row_slice(2, 2, &[0.3, 0.7, 0.7, 0.3]);
        let mrp = MarkovRewardProcess::new(
            p,
            Reward::Vector(DVector::from_vec(vec![1.0, -1.0])),
            0.9,
        )
        .unwrap();
        let geo = mrp.geometry().unwrap();
        let split = geo.k_step(2);
        assert!(split.skew.norm() < 1e-12);
        let approx = tabular(2);
        let field = k_step_vector_field(&approx, &geo, 2);
        let config = IntegratorConfig {
            t_max: 10.0,
            ..Default::default()
        };
        let traj = integrate(&field, &DVector::from_vec(vec![4.0, -3.0]), &config).unwrap();
        for pair in traj.diagnostics.windows(2) {
            assert!(pair[1].norm_mu_err <= pair[0].norm_mu_err + 1e-12);
        }
    }

    #[test]
    fn recorded_radial_derivative_is_twice_theta_dot_field() {
        let geo = rewarded_cycle(0.9).geometry().unwrap();
        let phi = DMatrix::identity(3, 3);
        let net = homogeneous_network(&[3, 4, 1], phi, Activation::Square, 6).unwrap();
        let field = td_vector_field(&net, &geo);
        let config = IntegratorConfig {
            t_max: 0.5,
            ..Default::default()
        };
        let theta0 = net.initial_theta() * 0.5;
        let traj = integrate(&field, &theta0, &config).unwrap();
        assert!(traj.len() > 5);
        for (theta, row) in traj.thetas.iter().zip(&traj.diagnostics) {
            let expected = 2.0 * theta.dot(&field.eval(theta));
            assert!(
                (row.radial_derivative - expected).abs()
                    <= 1e-12 * expected.abs().max(1.0)
            );
        }
    }

    #[test]
    fn homogeneous_radial_derivative_matches_the_degree_identity() {
        let geo = rewarded_cycle(0.9).geometry().unwrap();
        let phi = DMatrix::identity(3, 3);
        let net = homogeneous_network(&[3, 4, 1], phi, Activation::Square, 6).unwrap();
        let d = net.degree();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..20 {
            let theta = DVector::from_fn(net.param_dim(), |_, _| rng.random::<f64>() - 0.5);
            let row = diagnostics_at(&net, &geo, &theta);
            let v = net.value(&theta);
            let identity = -2.0 * d * v.dot(&(&geo.a * (&v - &geo.v_star)));
            let scale = identity.abs().max(1.0);
            assert!(
                (row.radial_derivative - identity).abs() / scale < 1e-8,
                "degree identity residual too large"
            );
        }
    }

    #[test]
    fn diagnostics_vanish_at_the_target() {
        let geo = rewarded_cycle(0.9).geometry().unwrap();
        let approx = tabular(3);
        let row = diagnostics_at(&approx, &geo, &geo.v_star.clone());
        assert!(row.norm_mu_err < 1e-12);
        assert!(row.lyapunov.abs() < 1e-12);
        assert_eq!(row.kappa, ExtReal::Finite(1.0));
    }

    #[test]
    fn tabular_lyapunov_is_the_drive_quadratic() {
        let geo = random_mrp(4, 0.9, 9).geometry().unwrap();
        let approx = tabular(4);
        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        let row = diagnostics_at(&approx, &geo, &(&geo.v_star + &e1));
        assert_relative_eq!(row.lyapunov, geo.a_sym[(0, 0)], max_relative = 1e-12);
    }

    #[test]
    fn liminf_estimate_window_rules() {
        let mk = |vals: Vec<f64>| {
            let n = vals.len();
            Trajectory {
                times: (0..n).map(|i| i as f64).collect(),
                thetas: vec![DVector::zeros(1); n],
                values: vec![DVector::zeros(1); n],
                diagnostics: vals
                    .into_iter()
                    .map(|v| DiagnosticsRow {
                        norm_mu: v,
                        norm_mu_err: 0.0,
                        lyapunov: 0.0,
                        theta_norm_sq: 0.0,
                        kappa: ExtReal::Finite(1.0),
                        radial_derivative: 0.0,
                    })
                    .collect(),
                terminal_status: TrajectoryStatus::HorizonReached,
            }
        };
        let constant = mk(vec![3.0; 40]);
        assert_eq!(
            liminf_estimate(&constant, |r| r.norm_mu, 0.5).unwrap(),
            3.0
        );

        let decaying = mk((0..40).map(|i| 40.0 - i as f64).collect());
        assert_eq!(liminf_estimate(&decaying, |r| r.norm_mu, 0.5).unwrap(), 1.0);

        let oscillating = mk((0..60)
            .map(|i| 2.0 + (i as f64 * 0.7).sin())
            .collect());
        let est = liminf_estimate(&oscillating, |r| r.norm_mu, 0.5).unwrap();
        let true_min = (30..60)
            .map(|i| 2.0 + (i as f64 * 0.7).sin())
            .fold(f64::INFINITY, f64::min);
        assert_eq!(est, true_min);

        let short = mk(vec![1.0; 8]);
        assert!(matches!(
            liminf_estimate(&short, |r| r.norm_mu, 0.5),
            Err(DynError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn grid_field_vanishes_at_the_target_and_matches_gradients_when_symmetric() {
        let p = DMatrix::from_row_slice(2, 2, &[0.4, 0.6, 0.6, 0.4]);
        let mrp = MarkovRewardProcess::new(
            p,
            Reward::Vector(DVector::from_vec(vec![0.5, -0.5])),
            0.9,
        )
        .unwrap();
        let geo = mrp.geometry().unwrap();
        assert!(geo.a_skew.norm() < 1e-12);

        let b1 = DVector::from_vec(vec![1.0, 0.0]);
        let b2 = DVector::from_vec(vec![0.0, 1.0]);
        let spec = GridSpec {
            x_range: (-1.0, 1.0),
            y_range: (-1.0, 1.0),
            nx: 5,
            ny: 5,
        };
        let grid = vector_field_grid(&geo, (&b1, &b2), &spec);
        assert_eq!(grid.len(), 25);

        // With symmetric A the field is the negative gradient of the
        // quadratic q = 0.5 (V - V*)^T A (V - V*); central differences of a
        // quadratic are exact.
        let q = |x: f64, y: f64| {
            let v = &b1 * x + &b2 * y;
            let e = &v - &geo.v_star;
            0.5 * e.dot(&(&geo.a * &e))
        };
        let h = 1e-5;
        for p in &grid {
            let gx = (q(p.x + h, p.y) - q(p.x - h, p.y)) / (2.0 * h);
            let gy = (q(p.x, p.y + h) - q(p.x, p.y - h)) / (2.0 * h);
            assert_relative_eq!(p.fx, -gx, epsilon = 1e-8, max_relative = 1e-8);
            assert_relative_eq!(p.fy, -gy, epsilon = 1e-8, max_relative = 1e-8);
        }

        // The target itself must be a rest point of the ambient field.
        let vstar_in_plane = (geo.v_star.dot(&b1), geo.v_star.dot(&b2));
        let v = &b1 * vstar_in_plane.0 + &b2 * vstar_in_plane.1;
        assert!((v - &geo.v_star).norm() < 1e-12, "full basis spans V*");
        let f = -(&geo.a * (&b1 * vstar_in_plane.0 + &b2 * vstar_in_plane.1 - &geo.v_star));
        assert!(f.norm() < 1e-12);
    }

    #[test]
    fn irreversible_plane_has_nonzero_circulation() {
        let geo = cycle_mrp(3, 0.0, 0.9).unwrap().geometry().unwrap();
        let approx = construct_divergent(&geo, 0.5, 0).unwrap();
        let basis = orthonormalize_columns(approx.u());
        let b1 = basis.column(0).into_owned();
        let b2 = basis.column(1).into_owned();

        let m = 512;
        let mut circulation = 0.0;
        for i in 0..m {
            let phi = 2.0 * std::f64::consts::PI * i as f64 / m as f64;
            let v = &b1 * phi.cos() + &b2 * phi.sin();
            let f = -(&geo.a * (&v - &geo.v_star));
            let tangent = -phi.sin() * &b1 + phi.cos() * &b2;
            circulation += f.dot(&tangent) * (2.0 * std::f64::consts::PI / m as f64);
        }
        assert!(
            circulation.abs() > 1e-3,
            "loop integral {circulation} should witness the curl"
        );
    }

    #[test]
    fn trajectory_csv_has_the_documented_shape() {
        let geo = rewarded_cycle(0.9).geometry().unwrap();
        let approx = tabular(3);
        let field = td_vector_field(&approx, &geo);
        let config = IntegratorConfig {
            t_max: 1.0,
            ..Default::default()
        };
        let traj = integrate(&field, &DVector::from_vec(vec![1.0, 0.0, -1.0]), &config).unwrap();
        let csv = trajectory_csv_string(&traj);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,theta_0,theta_1,theta_2,v_0,v_1,v_2,norm_mu,norm_mu_err,lyapunov,theta_norm_sq,kappa,status"
        );
        let first = lines.next().unwrap();
        assert!(first.starts_with("0,1,0,-1,"));
        assert!(first.ends_with(",ok"));
        assert!(csv.trim_end().lines().last().unwrap().ends_with(",horizon"));
        assert_eq!(csv.lines().count(), traj.len() + 1);
    }

    #[test]
    fn vector_field_csv_round_trip_shape() {
        let grid = vec![
            FieldSample {
                x: 0.0,
                y: 1.0,
                fx: -0.5,
                fy: 0.25,
            },
            FieldSample {
                x: 1.0,
                y: 0.0,
                fx: 0.125,
                fy: -2.0,
            },
        ];
        let csv = vector_field_csv_string(&grid);
        assert_eq!(csv, "x,y,fx,fy\n0,1,-0.5,0.25\n1,0,0.125,-2\n");
    }

    #[test]
    fn csv_files_are_byte_identical_across_reruns() {
        let geo = rewarded_cycle(0.9).geometry().unwrap();
        let approx = tabular(3);
        let field = td_vector_field(&approx, &geo);
        let config = IntegratorConfig::default();
        let run = || {
            let traj =
                integrate(&field, &DVector::from_vec(vec![1.0, 2.0, 3.0]), &config).unwrap();
            trajectory_csv_string(&traj)
        };
        assert_eq!(run(), run());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        let traj = integrate(&field, &DVector::from_vec(vec![1.0, 2.0, 3.0]), &config).unwrap();
        write_trajectory_csv(&path, &traj).unwrap();
        let bytes = std::fs::read_to_string(&path).unwrap();
        assert_eq!(bytes, trajectory_csv_string(&traj));
    }
}
