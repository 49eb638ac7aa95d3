//! Finite Markov reward processes and the matrices that drive expected TD
//! dynamics.
//!
//! A chain is validated combinatorially (strong connectivity, cycle-length
//! gcd) before any numerics run. From a valid chain we derive the stationary
//! weights, expected rewards, the value target, and the drive matrix
//! A = D_mu(I - gamma P) together with its symmetric/antisymmetric split and
//! the k-step variants A_k = D_mu(I - (gamma P)^k).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use std::path::Path;
use thiserror::Error;

/// Row sums may deviate from 1 by at most this much; inputs inside the
/// tolerance are renormalized row-wise.
pub const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MrpError {
    #[error("transition matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("row {row} is not a probability distribution: {reason}")]
    NotStochastic { row: usize, reason: String },
    #[error("chain is reducible ({scc_count} strongly connected components)")]
    Reducible { scc_count: usize },
    #[error("chain is periodic with period {period}")]
    Periodic { period: u64 },
    #[error("discount must lie in [0, 1), got {gamma}")]
    InvalidDiscount { gamma: f64 },
    #[error("reward shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid probability parameter: {0}")]
    InvalidProbability(String),
    #[error("stationary solve is rank-deficient beyond the expected null space")]
    SingularSolve,
    #[error("symmetric part of the drive matrix is not positive definite (lambda_min = {lambda_min:e})")]
    PositivityViolation { lambda_min: f64 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reward specification: either expected rewards per state or a per-transition
/// reward matrix r(s, s').
#[derive(Clone, Debug, PartialEq)]
pub enum Reward {
    Vector(DVector<f64>),
    Matrix(DMatrix<f64>),
}

/// Evidence that a transition matrix defines an irreducible, aperiodic chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValidityCertificate {
    /// Number of strongly connected components of the positive-entry digraph
    /// (1 for a valid chain).
    pub scc_count: usize,
    /// Gcd of directed cycle lengths (1 for a valid chain).
    pub period: u64,
}

/// A finite-state chain with rewards and a discount, validated at
/// construction. Immutable afterwards.
#[derive(Clone, Debug)]
pub struct MarkovRewardProcess {
    n: usize,
    p: DMatrix<f64>,
    reward: Reward,
    gamma: f64,
}

/// Check that `p` is row-stochastic and defines an irreducible, aperiodic
/// chain. Returns combinatorial evidence on success and the violated
/// property otherwise.
pub fn validate(p: &DMatrix<f64>) -> Result<ValidityCertificate, MrpError> {
    if p.nrows() != p.ncols() {
        return Err(MrpError::NotSquare {
            rows: p.nrows(),
            cols: p.ncols(),
        });
    }
    let n = p.nrows();
    if n == 0 {
        return Err(MrpError::NotSquare { rows: 0, cols: 0 });
    }
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..n {
            let x = p[(i, j)];
            if !x.is_finite() {
                return Err(MrpError::NotStochastic {
                    row: i,
                    reason: format!("entry ({i}, {j}) = {x} is not finite"),
                });
            }
            if x < 0.0 {
                return Err(MrpError::NotStochastic {
                    row: i,
                    reason: format!("entry ({i}, {j}) = {x} is negative"),
                });
            }
            sum += x;
        }
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(MrpError::NotStochastic {
                row: i,
                reason: format!("row sum {sum} differs from 1 by more than {STOCHASTIC_TOL:e}"),
            });
        }
    }

    let adj: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| p[(i, j)] > 0.0).collect())
        .collect();

    let scc_count = count_sccs(&adj);
    if scc_count != 1 {
        return Err(MrpError::Reducible { scc_count });
    }

    let period = chain_period(&adj);
    if period != 1 {
        return Err(MrpError::Periodic { period });
    }

    Ok(ValidityCertificate { scc_count, period })
}

/// Count strongly connected components by pairwise mutual reachability.
/// Quadratic-ish, which is fine at the matrix sizes this crate targets.
fn count_sccs(adj: &[Vec<usize>]) -> usize {
    let n = adj.len();
    let mut reach = vec![vec![false; n]; n];
    for (s, row) in reach.iter_mut().enumerate() {
        let mut stack = vec![s];
        row[s] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !row[v] {
                    row[v] = true;
                    stack.push(v);
                }
            }
        }
    }
    let mut component = vec![usize::MAX; n];
    let mut count = 0;
    for i in 0..n {
        if component[i] != usize::MAX {
            continue;
        }
        for j in i..n {
            if reach[i][j] && reach[j][i] {
                component[j] = count;
            }
        }
        count += 1;
    }
    count
}

/// Period of a strongly connected digraph: gcd over all edges (u, v) of
/// level(u) + 1 - level(v), where levels come from a BFS rooted at state 0.
fn chain_period(adj: &[Vec<usize>]) -> u64 {
    let n = adj.len();
    let mut level = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::from([0usize]);
    level[0] = 0;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if level[v] == usize::MAX {
                level[v] = level[u] + 1;
                queue.push_back(v);
            }
        }
    }
    let mut g: u64 = 0;
    for (u, next) in adj.iter().enumerate() {
        for &v in next {
            let disc = (level[u] + 1 - level[v]) as u64;
            g = gcd(g, disc);
        }
    }
    g
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

impl MarkovRewardProcess {
    /// Validate and construct. Rows within the stochasticity tolerance are
    /// renormalized so downstream linear algebra sees exact distributions.
    pub fn new(p: DMatrix<f64>, reward: Reward, gamma: f64) -> Result<Self, MrpError> {
        validate(&p)?;
        if !(0.0..1.0).contains(&gamma) {
            return Err(MrpError::InvalidDiscount { gamma });
        }
        let n = p.nrows();
        match &reward {
            Reward::Vector(r) => {
                if r.len() != n {
                    return Err(MrpError::ShapeMismatch(format!(
                        "reward vector has length {}, expected {n}",
                        r.len()
                    )));
                }
                if r.iter().any(|x| !x.is_finite()) {
                    return Err(MrpError::ShapeMismatch(
                        "reward vector has non-finite entries".into(),
                    ));
                }
            }
            Reward::Matrix(r) => {
                if r.nrows() != n || r.ncols() != n {
                    return Err(MrpError::ShapeMismatch(format!(
                        "reward matrix is {}x{}, expected {n}x{n}",
                        r.nrows(),
                        r.ncols()
                    )));
                }
                if r.iter().any(|x| !x.is_finite()) {
                    return Err(MrpError::ShapeMismatch(
                        "reward matrix has non-finite entries".into(),
                    ));
                }
            }
        }
        // Renormalize rows that are off by more than summation noise. The
        // noise floor keeps the operation idempotent: a row produced by one
        // division re-sums to within it, so parsing a written file does not
        // drift any bits.
        let mut p = p;
        let noise = 4.0 * f64::EPSILON * n as f64;
        for i in 0..n {
            let sum: f64 = p.row(i).iter().sum();
            if (sum - 1.0).abs() > noise {
                for j in 0..n {
                    p[(i, j)] /= sum;
                }
            }
        }
        Ok(Self {
            n,
            p,
            reward,
            gamma,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn reward(&self) -> &Reward {
        &self.reward
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Derive the full TD geometry of this chain.
    pub fn geometry(&self) -> Result<TdGeometry, MrpError> {
        td_matrix(self)
    }
}

/// Stationary distribution by direct solve: the last equation of
/// (P^T - I) mu = 0 is replaced by the normalization sum(mu) = 1.
pub fn stationary_distribution(mrp: &MarkovRewardProcess) -> Result<DVector<f64>, MrpError> {
    let n = mrp.n;
    let mut m = mrp.p.transpose() - DMatrix::<f64>::identity(n, n);
    for j in 0..n {
        m[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    let mu = m.lu().solve(&b).ok_or(MrpError::SingularSolve)?;
    if mu.iter().any(|&x| x <= 0.0 || !x.is_finite()) {
        return Err(MrpError::SingularSolve);
    }
    Ok(mu)
}

/// Expected one-step reward per state: pass-through for vector rewards,
/// P-weighted row average for matrix rewards.
pub fn expected_reward(mrp: &MarkovRewardProcess) -> DVector<f64> {
    match &mrp.reward {
        Reward::Vector(r) => r.clone(),
        Reward::Matrix(r) => {
            let n = mrp.n;
            DVector::from_fn(n, |s, _| (0..n).map(|t| mrp.p[(s, t)] * r[(s, t)]).sum())
        }
    }
}

/// Value target: the solution of (I - gamma P) v = R.
pub fn true_value(mrp: &MarkovRewardProcess) -> Result<DVector<f64>, MrpError> {
    let n = mrp.n;
    let r = expected_reward(mrp);
    let m = DMatrix::<f64>::identity(n, n) - &mrp.p * mrp.gamma;
    m.lu().solve(&r).ok_or(MrpError::SingularSolve)
}

/// A drive matrix with its exact symmetric/antisymmetric split.
/// `full == sym + skew` holds bitwise, `sym` is exactly symmetric and
/// `skew` exactly antisymmetric, all by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixSplit {
    pub full: DMatrix<f64>,
    pub sym: DMatrix<f64>,
    pub skew: DMatrix<f64>,
}

impl MatrixSplit {
    /// Split an arbitrary square matrix into exactly symmetric and exactly
    /// antisymmetric parts whose sum reproduces `full` bitwise.
    pub fn of(raw: &DMatrix<f64>) -> Self {
        split_parts(raw)
    }
}

fn split_parts(raw: &DMatrix<f64>) -> MatrixSplit {
    let n = raw.nrows();
    let mut sym = DMatrix::zeros(n, n);
    let mut skew = DMatrix::zeros(n, n);
    for i in 0..n {
        sym[(i, i)] = raw[(i, i)];
        for j in (i + 1)..n {
            let s = 0.5 * (raw[(i, j)] + raw[(j, i)]);
            let r = 0.5 * (raw[(i, j)] - raw[(j, i)]);
            sym[(i, j)] = s;
            sym[(j, i)] = s;
            skew[(i, j)] = r;
            skew[(j, i)] = -r;
        }
    }
    // Re-summing makes full == sym + skew exact; it moves entries at most
    // one rounding step from the raw product, far below every tolerance
    // used downstream.
    let full = &sym + &skew;
    MatrixSplit { full, sym, skew }
}

/// D_mu(I - (gamma P)^k) with its split. The k = 1 call and `td_matrix`
/// share this code path, so their outputs are identical bit for bit.
fn discounted_drive(mu: &DVector<f64>, p: &DMatrix<f64>, gamma: f64, k: u32) -> MatrixSplit {
    let n = p.nrows();
    let gp = p * gamma;
    let mut gpk = gp.clone();
    for _ in 1..k {
        gpk = &gpk * &gp;
    }
    let mut raw = DMatrix::<f64>::identity(n, n) - gpk;
    for i in 0..n {
        for j in 0..n {
            raw[(i, j)] *= mu[i];
        }
    }
    split_parts(&raw)
}

/// Derived quantities of a chain: stationary weights, value target, the
/// drive matrix with its split, and the reward-scale radius that bounds the
/// recurrent set of homogeneous dynamics.
#[derive(Clone, Debug)]
pub struct TdGeometry {
    pub mu: DVector<f64>,
    pub reward: DVector<f64>,
    pub v_star: DVector<f64>,
    pub a: DMatrix<f64>,
    pub a_sym: DMatrix<f64>,
    pub a_skew: DMatrix<f64>,
    /// ||(I - gamma P) v*||_mu / (1 - gamma).
    pub radius: f64,
    pub gamma: f64,
    pub p: DMatrix<f64>,
}

/// Assemble the TD geometry of a valid chain. Fails with
/// `PositivityViolation` if the symmetric part of the drive matrix is not
/// positive definite, which signals an invalid chain slipping through
/// validation rather than an expected runtime condition.
pub fn td_matrix(mrp: &MarkovRewardProcess) -> Result<TdGeometry, MrpError> {
    let mu = stationary_distribution(mrp)?;
    let reward = expected_reward(mrp);
    let v_star = true_value(mrp)?;
    let split = discounted_drive(&mu, &mrp.p, mrp.gamma, 1);

    let eigs = crate::linalg::symmetric_eigenvalues_sorted(&split.sym);
    let lambda_min = eigs[0];
    if lambda_min <= 0.0 {
        return Err(MrpError::PositivityViolation { lambda_min });
    }

    let bellman_applied = &v_star - &mrp.p * &v_star * mrp.gamma;
    let radius = mu_norm(&mu, &bellman_applied) / (1.0 - mrp.gamma);

    Ok(TdGeometry {
        mu,
        reward,
        v_star,
        a: split.full,
        a_sym: split.sym,
        a_skew: split.skew,
        radius,
        gamma: mrp.gamma,
        p: mrp.p.clone(),
    })
}

/// Stationary-weighted norm sqrt(sum_s mu_s v_s^2).
pub fn mu_norm(mu: &DVector<f64>, v: &DVector<f64>) -> f64 {
    mu.iter()
        .zip(v.iter())
        .map(|(m, x)| m * x * x)
        .sum::<f64>()
        .sqrt()
}

impl TdGeometry {
    pub fn n(&self) -> usize {
        self.mu.len()
    }

    pub fn mu_norm(&self, v: &DVector<f64>) -> f64 {
        mu_norm(&self.mu, v)
    }

    pub fn d_mu(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.mu)
    }

    /// k-step drive matrix D_mu(I - (gamma P)^k) with split. `k_step(1)`
    /// reproduces the stored drive matrix exactly.
    pub fn k_step(&self, k: u32) -> MatrixSplit {
        assert!(k >= 1, "k-step drive needs k >= 1");
        discounted_drive(&self.mu, &self.p, self.gamma, k)
    }
}

/// Alias for [`TdGeometry::k_step`] matching the operation vocabulary used
/// by the CLI and the verification harness.
pub fn k_step_matrix(geometry: &TdGeometry, k: u32) -> MatrixSplit {
    geometry.k_step(k)
}

/// Ring chain with a 0.5 self-loop, cycle mass 0.5 - delta, and a reverse
/// connection of mass delta; zero reward. `delta = 0` is the pure cycle,
/// `delta = 0.25` balances both directions and makes D_mu P symmetric.
pub fn cycle_mrp(n: usize, delta: f64, gamma: f64) -> Result<MarkovRewardProcess, MrpError> {
    if n < 3 {
        return Err(MrpError::InvalidProbability(format!(
            "cycle chain needs n >= 3, got {n}"
        )));
    }
    if !(0.0..=0.5).contains(&delta) {
        return Err(MrpError::InvalidProbability(format!(
            "delta must lie in [0, 0.5], got {delta}"
        )));
    }
    let mut p = DMatrix::zeros(n, n);
    for i in 0..n {
        p[(i, i)] = 0.5;
        p[(i, (i + n - 1) % n)] += 0.5 - delta;
        p[(i, (i + 1) % n)] += delta;
    }
    MarkovRewardProcess::new(p, Reward::Vector(DVector::zeros(n)), gamma)
}

/// Seeded random chain: rows from a floored exponential simplex sample
/// (strictly positive, so always irreducible and aperiodic), rewards uniform
/// on [-1, 1]. Deterministic in the seed.
pub fn random_mrp(n: usize, gamma: f64, seed: u64) -> MarkovRewardProcess {
    assert!(n >= 2, "random chain needs n >= 2");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut row: Vec<f64> = (0..n)
            .map(|_| 0.05 - rng.random::<f64>().max(1e-12).ln())
            .collect();
        let sum: f64 = row.iter().sum();
        for x in &mut row {
            *x /= sum;
        }
        for (j, x) in row.iter().enumerate() {
            p[(i, j)] = *x;
        }
    }
    let uniform = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    let reward = DVector::from_fn(n, |_, _| uniform.sample(&mut rng));
    MarkovRewardProcess::new(p, Reward::Vector(reward), gamma)
        .expect("strictly positive rows always validate")
}

const MRP_JSON_KEYS: [&str; 4] = ["n", "P", "reward", "gamma"];

fn fmt_f64(x: f64) -> String {
    // 17 significant digits: enough for exact f64 round-trips.
    format!("{:.16e}", x)
}

/// Serialize with 17-significant-digit floats so files round-trip
/// bit for bit.
pub fn to_json_string(mrp: &MarkovRewardProcess) -> String {
    let mut out = String::new();
    out.push_str("{\n");
    out.push_str(&format!("  \"n\": {},\n", mrp.n));
    out.push_str("  \"P\": [\n");
    for i in 0..mrp.n {
        let row: Vec<String> = (0..mrp.n).map(|j| fmt_f64(mrp.p[(i, j)])).collect();
        out.push_str(&format!("    [{}]", row.join(", ")));
        out.push_str(if i + 1 < mrp.n { ",\n" } else { "\n" });
    }
    out.push_str("  ],\n");
    match &mrp.reward {
        Reward::Vector(r) => {
            let xs: Vec<String> = r.iter().map(|&x| fmt_f64(x)).collect();
            out.push_str(&format!(
                "  \"reward\": {{\"vector\": [{}]}},\n",
                xs.join(", ")
            ));
        }
        Reward::Matrix(r) => {
            out.push_str("  \"reward\": {\"matrix\": [\n");
            for i in 0..mrp.n {
                let row: Vec<String> = (0..mrp.n).map(|j| fmt_f64(r[(i, j)])).collect();
                out.push_str(&format!("    [{}]", row.join(", ")));
                out.push_str(if i + 1 < mrp.n { ",\n" } else { "\n" });
            }
            out.push_str("  ]},\n");
        }
    }
    out.push_str(&format!("  \"gamma\": {}\n", fmt_f64(mrp.gamma)));
    out.push_str("}\n");
    out
}

fn json_number(v: &serde_json::Value, what: &str) -> Result<f64, MrpError> {
    let x = v
        .as_f64()
        .ok_or_else(|| MrpError::Parse(format!("{what} is not a number")))?;
    if !x.is_finite() {
        return Err(MrpError::Parse(format!("{what} is not finite")));
    }
    Ok(x)
}

fn json_vector(v: &serde_json::Value, what: &str) -> Result<DVector<f64>, MrpError> {
    let arr = v
        .as_array()
        .ok_or_else(|| MrpError::Parse(format!("{what} is not an array")))?;
    let mut out = DVector::zeros(arr.len());
    for (i, x) in arr.iter().enumerate() {
        out[i] = json_number(x, &format!("{what}[{i}]"))?;
    }
    Ok(out)
}

fn json_matrix(v: &serde_json::Value, n: usize, what: &str) -> Result<DMatrix<f64>, MrpError> {
    let rows = v
        .as_array()
        .ok_or_else(|| MrpError::Parse(format!("{what} is not an array")))?;
    if rows.len() != n {
        return Err(MrpError::Parse(format!(
            "{what} has {} rows, expected {n}",
            rows.len()
        )));
    }
    let mut out = DMatrix::zeros(n, n);
    for (i, row) in rows.iter().enumerate() {
        let r = json_vector(row, &format!("{what}[{i}]"))?;
        if r.len() != n {
            return Err(MrpError::Parse(format!(
                "{what}[{i}] has {} entries, expected {n}",
                r.len()
            )));
        }
        for j in 0..n {
            out[(i, j)] = r[j];
        }
    }
    Ok(out)
}

/// Parse the `.mrp.json` schema
/// `{"n": int, "P": [[..]], "reward": {"vector"|"matrix": ..}, "gamma": g}`.
/// Non-finite numbers are rejected.
pub fn from_json_str(s: &str) -> Result<MarkovRewardProcess, MrpError> {
    let v: serde_json::Value =
        serde_json::from_str(s).map_err(|e| MrpError::Parse(e.to_string()))?;
    let obj = v
        .as_object()
        .ok_or_else(|| MrpError::Parse("top level is not an object".into()))?;
    for key in MRP_JSON_KEYS {
        if !obj.contains_key(key) {
            return Err(MrpError::Parse(format!("missing field \"{key}\"")));
        }
    }
    let n = obj["n"]
        .as_u64()
        .ok_or_else(|| MrpError::Parse("\"n\" is not a positive integer".into()))?
        as usize;
    if n == 0 {
        return Err(MrpError::Parse("\"n\" must be positive".into()));
    }
    let p = json_matrix(&obj["P"], n, "P")?;
    let reward_obj = obj["reward"]
        .as_object()
        .ok_or_else(|| MrpError::Parse("\"reward\" is not an object".into()))?;
    let reward = match (reward_obj.get("vector"), reward_obj.get("matrix")) {
        (Some(r), None) => {
            let r = json_vector(r, "reward.vector")?;
            if r.len() != n {
                return Err(MrpError::Parse(format!(
                    "reward.vector has length {}, expected {n}",
                    r.len()
                )));
            }
            Reward::Vector(r)
        }
        (None, Some(r)) => Reward::Matrix(json_matrix(r, n, "reward.matrix")?),
        _ => {
            return Err(MrpError::Parse(
                "\"reward\" must contain exactly one of \"vector\" or \"matrix\"".into(),
            ))
        }
    };
    let gamma = json_number(&obj["gamma"], "gamma")?;
    MarkovRewardProcess::new(p, reward, gamma)
}

pub fn read_mrp_file(path: &Path) -> Result<MarkovRewardProcess, MrpError> {
    let text = std::fs::read_to_string(path)?;
    from_json_str(&text)
}

pub fn write_mrp_file(path: &Path, mrp: &MarkovRewardProcess) -> Result<(), MrpError> {
    std::fs::write(path, to_json_string(mrp))?;
    Ok(())
}
