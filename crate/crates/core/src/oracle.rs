//! Exact ground truth for small discrete instances: the
//! density-constrained occupancy-measure linear program, a dense
//! two-phase simplex solver with Bland's anti-cycling rule, policy
//! extraction from occupancies, and the primal/dual cross-check that the
//! multiplier-adjusted problem and the constrained problem agree.

use crate::dual::{Bound, DensityConstraint, MultiplierField};
use crate::linalg::{solve_dense, DenseMatrix};
use crate::mdp::{exact_density, expected_return, random_mdp, DiscreteMdp, TabularPolicy};
use crate::solvers::value_iteration;
use crate::{DcrlError, Result};
use rand::Rng;

/// The occupancy LP over variables rho_bar(s, a) >= 0:
///
///   maximize   sum_{s,a} r(s,a) rho_bar(s,a)
///   subject to sum_a rho_bar(s,a)
///                - gamma * sum_{s',a'} P~(s',a',s) rho_bar(s',a') = phi(s)
///              rho_min(s) <= sum_a rho_bar(s,a) <= rho_max(s)
///
/// where P~ is the transition kernel with outflow from terminal states
/// removed, so a terminal's density equals its discounted arrival mass.
#[derive(Debug, Clone)]
pub struct OccupancyLp {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    /// Expected one-step rewards r(s,a), row-major.
    pub obj: Vec<f64>,
    /// Flow-conservation coefficients, row-major n_states x (n_states *
    /// n_actions): entry (s', (s,a)) = [s==s'] - gamma * P~(s,a,s').
    pub flow: Vec<f64>,
    pub phi: Vec<f64>,
    /// Per-state lower density bounds; zero entries add no row.
    pub lower: Vec<f64>,
    /// Per-state upper bounds; infinite entries add no row.
    pub upper: Vec<f64>,
}

impl OccupancyLp {
    pub fn n_vars(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn n_equalities(&self) -> usize {
        self.n_states
    }

    /// Flow coefficient of variable column `col` in the equality of
    /// state `s`.
    #[inline]
    pub fn flow_coeff(&self, s: usize, col: usize) -> f64 {
        self.flow[s * self.n_states * self.n_actions + col]
    }

    /// States carrying an explicit upper box row.
    pub fn upper_rows(&self) -> Vec<usize> {
        (0..self.n_states).filter(|&s| self.upper[s].is_finite()).collect()
    }

    /// States carrying an explicit lower box row.
    pub fn lower_rows(&self) -> Vec<usize> {
        (0..self.n_states).filter(|&s| self.lower[s] > 0.0).collect()
    }
}

/// Assemble the LP for an MDP and a density corridor. Bounds must be
/// addressable by state id (uniform or per-state).
pub fn build_occupancy_lp(mdp: &DiscreteMdp, constraint: &DensityConstraint) -> Result<OccupancyLp> {
    let n = mdp.n_states;
    let na = mdp.n_actions;
    let mut lower = Vec::with_capacity(n);
    let mut upper = Vec::with_capacity(n);
    for s in 0..n {
        lower.push(constraint.lower.at_id(s)?);
        upper.push(constraint.upper.at_id(s)?);
    }
    let mut obj = vec![0.0; n * na];
    for s in 0..n {
        for a in 0..na {
            obj[s * na + a] = mdp.expected_reward(s, a);
        }
    }
    let mut flow = vec![0.0; n * n * na];
    for s in 0..n {
        for a in 0..na {
            let col = s * na + a;
            flow[s * n * na + col] += 1.0;
            if mdp.is_terminal(s) {
                continue; // killed outflow
            }
            let row = mdp.transition_row(s, a);
            for (sp, &p) in row.iter().enumerate() {
                if p != 0.0 {
                    flow[sp * n * na + col] -= mdp.gamma * p;
                }
            }
        }
    }
    Ok(OccupancyLp {
        n_states: n,
        n_actions: na,
        gamma: mdp.gamma,
        obj,
        flow,
        phi: mdp.initial_dist.clone(),
        lower,
        upper,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

/// Solved LP: the optimal occupancy, its objective, and the prices of the
/// box rows mapped back to multiplier sign conventions.
#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    pub rho_bar: Vec<f64>,
    pub objective: f64,
    /// Upper-bound multipliers sigma_plus(s) >= 0 (zero where no row).
    pub sigma_plus: Vec<f64>,
    /// Lower-bound multipliers sigma_minus(s) >= 0.
    pub sigma_minus: Vec<f64>,
    /// Adjusted-problem optimal values V(s) from the flow-row prices.
    pub values: Vec<f64>,
    /// Max flow-conservation residual of rho_bar.
    pub flow_residual: f64,
}

impl LpSolution {
    fn empty(status: LpStatus, n_states: usize, n_actions: usize) -> Self {
        LpSolution {
            status,
            rho_bar: vec![0.0; n_states * n_actions],
            objective: f64::NAN,
            sigma_plus: vec![0.0; n_states],
            sigma_minus: vec![0.0; n_states],
            values: vec![0.0; n_states],
            flow_residual: f64::NAN,
        }
    }

    /// State density rho(s) = sum_a rho_bar(s,a).
    pub fn density(&self, n_actions: usize) -> Vec<f64> {
        self.rho_bar.chunks(n_actions).map(|row| row.iter().sum()).collect()
    }
}

const PIVOT_TOL: f64 = 1e-9;
const RCOST_TOL: f64 = 1e-9;
const PHASE1_TOL: f64 = 1e-7;
const FEAS_TOL: f64 = 1e-8;

/// Outcome of one simplex phase.
enum PhaseEnd {
    Optimal,
    Unbounded,
}

/// Dense tableau in canonical form: `basis[i]` indexes the identity
/// column of row i. Costs live in an explicit reduced-cost row.
struct Tableau {
    m: usize,
    n: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    basis: Vec<usize>,
    rc: Vec<f64>,
    /// Negative of the current objective value (classic tableau corner).
    neg_obj: f64,
}

impl Tableau {
    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }

    fn pivot(&mut self, r: usize, q: usize) {
        let pivot = self.at(r, q);
        let inv = 1.0 / pivot;
        for j in 0..self.n {
            self.a[r * self.n + j] *= inv;
        }
        self.b[r] *= inv;
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.at(i, q);
            if f != 0.0 {
                for j in 0..self.n {
                    self.a[i * self.n + j] -= f * self.a[r * self.n + j];
                }
                self.b[i] -= f * self.b[r];
            }
        }
        let f = self.rc[q];
        if f != 0.0 {
            for j in 0..self.n {
                self.rc[j] -= f * self.a[r * self.n + j];
            }
            self.neg_obj -= f * self.b[r];
        }
        self.basis[r] = q;
    }

    /// Recompute the reduced-cost row for a new cost vector (used at the
    /// phase-1 to phase-2 switch).
    fn reset_costs(&mut self, c: &[f64]) {
        self.rc.copy_from_slice(c);
        self.neg_obj = 0.0;
        for i in 0..self.m {
            let cb = c[self.basis[i]];
            if cb != 0.0 {
                for j in 0..self.n {
                    self.rc[j] -= cb * self.a[i * self.n + j];
                }
                self.neg_obj -= cb * self.b[i];
            }
        }
    }

    /// Run simplex iterations with Bland's rule: enter the lowest-index
    /// column with negative reduced cost, leave by minimum ratio with
    /// ties broken toward the lowest basic variable index. `allowed`
    /// bounds the columns eligible to enter.
    fn run(&mut self, allowed: usize) -> PhaseEnd {
        loop {
            let mut entering = None;
            for j in 0..allowed {
                if self.rc[j] < -RCOST_TOL {
                    entering = Some(j);
                    break;
                }
            }
            let q = match entering {
                Some(q) => q,
                None => return PhaseEnd::Optimal,
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.m {
                let aiq = self.at(i, q);
                if aiq > PIVOT_TOL {
                    let ratio = self.b[i] / aiq;
                    match leave {
                        None => leave = Some((i, ratio)),
                        Some((best_i, best_ratio)) => {
                            if ratio < best_ratio - PIVOT_TOL
                                || ((ratio - best_ratio).abs() <= PIVOT_TOL
                                    && self.basis[i] < self.basis[best_i])
                            {
                                leave = Some((i, ratio));
                            }
                        }
                    }
                }
            }
            match leave {
                Some((r, _)) => self.pivot(r, q),
                None => return PhaseEnd::Unbounded,
            }
        }
    }
}

/// Row bookkeeping for the standard form assembled from an
/// [`OccupancyLp`].
struct RowMap {
    /// Row index of each flow equality.
    flow: Vec<usize>,
    /// (state, row) pairs of upper box rows.
    upper: Vec<(usize, usize)>,
    /// (state, row) pairs of lower box rows.
    lower: Vec<(usize, usize)>,
}

/// Solve the occupancy LP with a dense two-phase simplex. Infeasibility
/// and unboundedness come back in the status, not as errors.
pub fn solve_lp(lp: &OccupancyLp) -> Result<LpSolution> {
    let n_rho = lp.n_vars();
    let upper_states = lp.upper_rows();
    let lower_states = lp.lower_rows();
    let m = lp.n_states + upper_states.len() + lower_states.len();
    let n_slack = upper_states.len();
    let n_surplus = lower_states.len();
    let n_real = n_rho + n_slack + n_surplus;
    let n_total = n_real + m; // artificials at the end

    let mut a = vec![0.0; m * n_total];
    let mut b = vec![0.0; m];
    let mut rows = RowMap { flow: Vec::new(), upper: Vec::new(), lower: Vec::new() };

    // Flow rows.
    for s in 0..lp.n_states {
        let row = s;
        rows.flow.push(row);
        for col in 0..n_rho {
            a[row * n_total + col] = lp.flow_coeff(s, col);
        }
        b[row] = lp.phi[s];
    }
    // Upper box rows: sum_a rho_bar(s,a) + slack = rho_max(s).
    for (k, &s) in upper_states.iter().enumerate() {
        let row = lp.n_states + k;
        rows.upper.push((s, row));
        for act in 0..lp.n_actions {
            a[row * n_total + s * lp.n_actions + act] = 1.0;
        }
        a[row * n_total + n_rho + k] = 1.0;
        b[row] = lp.upper[s];
    }
    // Lower box rows: sum_a rho_bar(s,a) - surplus = rho_min(s).
    for (k, &s) in lower_states.iter().enumerate() {
        let row = lp.n_states + n_slack + k;
        rows.lower.push((s, row));
        for act in 0..lp.n_actions {
            a[row * n_total + s * lp.n_actions + act] = 1.0;
        }
        a[row * n_total + n_rho + n_slack + k] = -1.0;
        b[row] = lp.lower[s];
    }
    // Artificial identity block, initial basis.
    let mut basis = Vec::with_capacity(m);
    for i in 0..m {
        a[i * n_total + n_real + i] = 1.0;
        basis.push(n_real + i);
    }

    debug_assert!(b.iter().all(|&v| v >= 0.0), "all right-hand sides are nonnegative");

    // Phase 1: minimize the artificial sum. Reduced costs of real
    // columns start at -(column sum over rows).
    let mut rc = vec![0.0; n_total];
    let mut neg_obj = 0.0;
    for j in 0..n_real {
        let mut sum = 0.0;
        for i in 0..m {
            sum += a[i * n_total + j];
        }
        rc[j] = -sum;
    }
    for &bi in &b {
        neg_obj -= bi;
    }
    let mut tab = Tableau { m, n: n_total, a, b, basis, rc, neg_obj };
    match tab.run(n_real) {
        PhaseEnd::Optimal => {}
        PhaseEnd::Unbounded => {
            return Err(DcrlError::Numerical(
                "phase-1 objective cannot be unbounded".into(),
            ))
        }
    }
    let phase1_obj = -tab.neg_obj;
    if phase1_obj > PHASE1_TOL {
        return Ok(LpSolution::empty(LpStatus::Infeasible, lp.n_states, lp.n_actions));
    }
    // Drive any zero-level artificials out of the basis; a row whose real
    // coefficients are all zero is redundant, which this LP never
    // produces (flow rows are nonsingular, box rows carry unique slacks).
    for r in 0..m {
        if tab.basis[r] >= n_real {
            let mut pivot_col = None;
            for j in 0..n_real {
                if tab.at(r, j).abs() > PIVOT_TOL {
                    pivot_col = Some(j);
                    break;
                }
            }
            match pivot_col {
                Some(j) => tab.pivot(r, j),
                None => {
                    return Err(DcrlError::Numerical(format!(
                        "redundant constraint row {r} in occupancy LP"
                    )))
                }
            }
        }
    }

    // Phase 2: minimize -(objective).
    let mut c2 = vec![0.0; n_total];
    for j in 0..n_rho {
        c2[j] = -lp.obj[j];
    }
    tab.reset_costs(&c2);
    match tab.run(n_real) {
        PhaseEnd::Optimal => {}
        PhaseEnd::Unbounded => {
            return Ok(LpSolution::empty(LpStatus::Unbounded, lp.n_states, lp.n_actions));
        }
    }

    // Primal solution.
    let mut x = vec![0.0; n_real];
    for i in 0..m {
        if tab.basis[i] < n_real {
            x[tab.basis[i]] = tab.b[i];
        }
    }
    let rho_bar: Vec<f64> = x[..n_rho].iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect();
    let objective: f64 = rho_bar.iter().zip(&lp.obj).map(|(x, r)| x * r).sum();

    // Duals: solve B^T y = c_B over the final basis columns.
    let mut bt = DenseMatrix::zeros(m);
    let mut cb = vec![0.0; m];
    for (i, &j) in tab.basis.iter().enumerate() {
        cb[i] = c2[j];
        for row in 0..m {
            // Column j of the ORIGINAL matrix; artificials are e_row.
            let orig = if j >= n_real {
                if row == j - n_real {
                    1.0
                } else {
                    0.0
                }
            } else {
                original_coeff(lp, &rows, row, j, n_rho, n_slack)
            };
            bt.set(i, row, orig);
        }
    }
    let y = solve_dense(&bt, &cb)?;

    let mut sigma_plus = vec![0.0; lp.n_states];
    let mut sigma_minus = vec![0.0; lp.n_states];
    for &(s, row) in &rows.upper {
        let v = -y[row];
        if v < -1e-6 {
            return Err(DcrlError::Numerical(format!(
                "upper-row price for state {s} has the wrong sign: {v}"
            )));
        }
        sigma_plus[s] = v.max(0.0);
    }
    for &(s, row) in &rows.lower {
        let v = y[row];
        if v < -1e-6 {
            return Err(DcrlError::Numerical(format!(
                "lower-row price for state {s} has the wrong sign: {v}"
            )));
        }
        sigma_minus[s] = v.max(0.0);
    }
    let values: Vec<f64> = rows.flow.iter().map(|&row| -y[row]).collect();

    // Post checks: flow residual and complementary slackness.
    let mut flow_residual = 0.0_f64;
    for s in 0..lp.n_states {
        let mut lhs = 0.0;
        for col in 0..n_rho {
            lhs += lp.flow_coeff(s, col) * rho_bar[col];
        }
        flow_residual = flow_residual.max((lhs - lp.phi[s]).abs());
    }
    if flow_residual > FEAS_TOL {
        return Err(DcrlError::Numerical(format!(
            "flow residual {flow_residual:.3e} exceeds {FEAS_TOL:.0e}"
        )));
    }
    let density: Vec<f64> = (0..lp.n_states)
        .map(|s| rho_bar[s * lp.n_actions..(s + 1) * lp.n_actions].iter().sum())
        .collect();
    for s in 0..lp.n_states {
        if lp.upper[s].is_finite() && sigma_plus[s] > 1e-9 {
            let slack = (density[s] - lp.upper[s]).abs();
            if sigma_plus[s] * slack > 1e-6 {
                return Err(DcrlError::Numerical(format!(
                    "complementary slackness violated at upper bound of state {s}"
                )));
            }
        }
        if lp.lower[s] > 0.0 && sigma_minus[s] > 1e-9 {
            let slack = (lp.lower[s] - density[s]).abs();
            if sigma_minus[s] * slack > 1e-6 {
                return Err(DcrlError::Numerical(format!(
                    "complementary slackness violated at lower bound of state {s}"
                )));
            }
        }
    }

    Ok(LpSolution {
        status: LpStatus::Optimal,
        rho_bar,
        objective,
        sigma_plus,
        sigma_minus,
        values,
        flow_residual,
    })
}

/// Coefficient of the original standard-form matrix at (row, real column
/// j), reconstructed from the LP description.
fn original_coeff(
    lp: &OccupancyLp,
    rows: &RowMap,
    row: usize,
    j: usize,
    n_rho: usize,
    n_slack: usize,
) -> f64 {
    if j < n_rho {
        if row < lp.n_states {
            return lp.flow_coeff(row, j);
        }
        let s = j / lp.n_actions;
        for &(bs, br) in rows.upper.iter().chain(rows.lower.iter()) {
            if br == row {
                return if bs == s { 1.0 } else { 0.0 };
            }
        }
        0.0
    } else if j < n_rho + n_slack {
        let k = j - n_rho;
        if rows.upper[k].1 == row {
            1.0
        } else {
            0.0
        }
    } else {
        let k = j - n_rho - n_slack;
        if rows.lower[k].1 == row {
            -1.0
        } else {
            0.0
        }
    }
}

/// Recover a stochastic policy from an occupancy: pi(a|s) =
/// rho_bar(s,a) / sum_a rho_bar(s,a), uniform at zero-mass states.
pub fn policy_from_occupancy(
    rho_bar: &[f64],
    n_states: usize,
    n_actions: usize,
) -> Result<TabularPolicy> {
    if rho_bar.len() != n_states * n_actions {
        return Err(DcrlError::invalid_argument(format!(
            "occupancy has length {}, expected {}",
            rho_bar.len(),
            n_states * n_actions
        )));
    }
    if rho_bar.iter().any(|&v| v < -1e-9) {
        return Err(DcrlError::invalid_argument(
            "occupancy entries must be nonnegative",
        ));
    }
    let mut probs = vec![0.0; n_states * n_actions];
    for s in 0..n_states {
        let row = &rho_bar[s * n_actions..(s + 1) * n_actions];
        let mass: f64 = row.iter().map(|&v| v.max(0.0)).sum();
        if mass > 0.0 {
            for a in 0..n_actions {
                probs[s * n_actions + a] = row[a].max(0.0) / mass;
            }
        } else {
            for a in 0..n_actions {
                probs[s * n_actions + a] = 1.0 / n_actions as f64;
            }
        }
    }
    TabularPolicy::new(n_states, n_actions, probs)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DualityStatus {
    Passed,
    /// LP infeasible, nothing to compare.
    SkippedInfeasible,
    Failed(String),
}

/// Outcome of the primal/dual agreement test on one instance.
#[derive(Debug, Clone)]
pub struct DualityReport {
    pub status: DualityStatus,
    /// Constrained optimum from the LP.
    pub j_lp: f64,
    /// Optimal value of the multiplier-adjusted unconstrained problem.
    pub j_adjusted: f64,
    /// |j_adjusted + sigma_plus . rho_max - sigma_minus . rho_min - j_lp|.
    pub duality_gap: f64,
    /// Raw expected return of the policy recovered from the LP occupancy.
    pub lp_policy_return: f64,
    /// Worst bound violation of that policy's exact density.
    pub lp_policy_violation: f64,
}

/// Verify on one instance that the occupancy LP and the adjusted-reward
/// problem built from its dual prices tell the same story:
///
/// 1. strong duality: VI's adjusted optimum plus the bound terms matches
///    the LP objective within 1e-4 * |J*|;
/// 2. the policy extracted from the LP occupancy is feasible (within
///    1e-6) and earns the LP objective in raw reward.
///
/// Only objectives and feasibility are compared — with binding bounds the
/// adjusted problem usually has tied optima and only some of the ties
/// randomize the right way, so policy identity is never asserted.
pub fn duality_check(mdp: &DiscreteMdp, constraint: &DensityConstraint) -> Result<DualityReport> {
    for &t in &mdp.terminal_states {
        let lo = constraint.lower.at_id(t)?;
        let up = constraint.upper.at_id(t)?;
        if lo > 0.0 || up.is_finite() {
            return Err(DcrlError::invalid_argument(format!(
                "terminal state {t} carries a density bound; reward adjustment cannot act \
                 on states where no action is taken"
            )));
        }
    }
    let lp = build_occupancy_lp(mdp, constraint)?;
    let sol = solve_lp(&lp)?;
    match sol.status {
        LpStatus::Infeasible => {
            return Ok(DualityReport {
                status: DualityStatus::SkippedInfeasible,
                j_lp: f64::NAN,
                j_adjusted: f64::NAN,
                duality_gap: f64::NAN,
                lp_policy_return: f64::NAN,
                lp_policy_violation: f64::NAN,
            })
        }
        LpStatus::Unbounded => {
            return Err(DcrlError::Numerical(
                "occupancy LP cannot be unbounded (total mass is finite)".into(),
            ))
        }
        LpStatus::Optimal => {}
    }

    // Part 1: strong duality through the adjusted problem.
    let adjustment: Vec<f64> = sol
        .sigma_minus
        .iter()
        .zip(&sol.sigma_plus)
        .map(|(m, p)| m - p)
        .collect();
    let (table, _) = value_iteration(mdp, Some(&adjustment), 1e-10)?;
    // phi^T V from the VI table's greedy values.
    let v_adj: f64 = mdp
        .initial_dist
        .iter()
        .enumerate()
        .map(|(s, &p)| {
            if p == 0.0 {
                0.0
            } else {
                p * (0..mdp.n_actions)
                    .map(|a| table.q(s, a))
                    .fold(f64::NEG_INFINITY, f64::max)
            }
        })
        .sum();
    let mut bound_terms = 0.0;
    for s in 0..mdp.n_states {
        if sol.sigma_plus[s] > 1e-12 {
            bound_terms += sol.sigma_plus[s] * lp.upper[s];
        }
        if sol.sigma_minus[s] > 1e-12 {
            bound_terms -= sol.sigma_minus[s] * lp.lower[s];
        }
    }
    let j_adjusted = v_adj;
    let duality_gap = (j_adjusted + bound_terms - sol.objective).abs();

    // Part 2: LP-policy round trip.
    let pi_lp = policy_from_occupancy(&sol.rho_bar, mdp.n_states, mdp.n_actions)?;
    let rho = exact_density(mdp, &pi_lp)?;
    let mut violation = 0.0_f64;
    for s in 0..mdp.n_states {
        if lp.upper[s].is_finite() {
            violation = violation.max(rho[s] - lp.upper[s]);
        }
        violation = violation.max(lp.lower[s] - rho[s]);
    }
    let lp_policy_return = expected_return(mdp, &pi_lp)?;

    let tol_obj = 1e-4 * sol.objective.abs().max(1e-4);
    let mut failures = Vec::new();
    if duality_gap > tol_obj {
        failures.push(format!("duality gap {duality_gap:.3e} > {tol_obj:.3e}"));
    }
    if violation > 1e-6 {
        failures.push(format!("LP policy violates bounds by {violation:.3e}"));
    }
    if (lp_policy_return - sol.objective).abs() > tol_obj {
        failures.push(format!(
            "LP policy return {lp_policy_return:.6} differs from objective {:.6}",
            sol.objective
        ));
    }
    let status = if failures.is_empty() {
        DualityStatus::Passed
    } else {
        DualityStatus::Failed(failures.join("; "))
    };
    Ok(DualityReport {
        status,
        j_lp: sol.objective,
        j_adjusted,
        duality_gap,
        lp_policy_return,
        lp_policy_violation: violation,
    })
}

/// LP dual prices as multiplier fields, for feeding into the reward
/// adjustment machinery.
pub fn solution_multipliers(sol: &LpSolution) -> (MultiplierField, MultiplierField) {
    (
        MultiplierField::Tabular(sol.sigma_plus.clone()),
        MultiplierField::Tabular(sol.sigma_minus.clone()),
    )
}

/// Random density corridor guaranteed feasible for `mdp`: bounds are
/// placed around the density of an equal mixture of the unconstrained
/// optimal occupancy and the uniform policy's occupancy (feasible by
/// convexity of the occupancy polytope), with random margins. Upper
/// bounds usually bind at the optimum because the optimal density sits
/// away from the mixture.
pub fn random_feasible_constraint(mdp: &DiscreteMdp, seed: u64) -> Result<DensityConstraint> {
    let mut rng = crate::seeding::substream(seed, 7);
    let (_, pi_star) = value_iteration(mdp, None, 1e-10)?;
    let rho_star = exact_density(mdp, &pi_star)?;
    let rho_unif = exact_density(
        mdp,
        &TabularPolicy::uniform(mdp.n_states, mdp.n_actions),
    )?;
    let witness: Vec<f64> = rho_star
        .iter()
        .zip(&rho_unif)
        .map(|(a, b)| 0.5 * a + 0.5 * b)
        .collect();
    let mut lower = vec![0.0; mdp.n_states];
    let mut upper = vec![f64::INFINITY; mdp.n_states];
    for s in 0..mdp.n_states {
        if mdp.is_terminal(s) {
            continue;
        }
        let roll: f64 = rng.gen();
        if roll < 0.4 {
            // Upper bound between the witness and (usually) the optimum.
            upper[s] = witness[s] * (1.0 + rng.gen_range(0.02..0.3));
        } else if roll < 0.6 && witness[s] > 1e-6 {
            lower[s] = witness[s] * rng.gen_range(0.3..0.95);
        }
    }
    DensityConstraint::new(crate::dual::Bound::PerState(lower), crate::dual::Bound::PerState(upper))
}

/// Seeded small MDP with exactly one binding upper density bound. Rewards
/// are shifted positive so optimal objectives sit well away from zero and
/// relative tolerances on them stay meaningful. The cap lands on the
/// state the unconstrained optimum over-visits most, strictly between the
/// uniform policy's density there (feasibility witness) and the
/// unconstrained optimum's (so the bound binds).
///
/// Two kinds of draw are rejected with an error: ones where the
/// unconstrained optimum concentrates nowhere (the cap would be vacuous)
/// and ill-conditioned ones where the dual path from zero to the optimal
/// price is too flat. Fixed-step ascent on the multiplier moves at
/// step x violation per iteration, so its iteration count scales with the
/// integral of 1/violation along that path; draws where the integral is
/// large (a high price defended by a sliver of excess density) take
/// unboundedly long for any solver of that family, which makes them
/// useless as convergence fixtures.
pub fn binding_upper_instance(
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    seed: u64,
) -> Result<(DiscreteMdp, DensityConstraint)> {
    let mut mdp = random_mdp(n_states, n_actions, gamma, seed);
    for r in &mut mdp.reward {
        *r += 1.2;
    }
    let (_, pi_star) = value_iteration(&mdp, None, 1e-10)?;
    let rho_star = exact_density(&mdp, &pi_star)?;
    let rho_unif = exact_density(&mdp, &TabularPolicy::uniform(n_states, n_actions))?;
    let (s_star, gap) = (0..n_states)
        .map(|s| (s, rho_star[s] - rho_unif[s]))
        .max_by(|a, b| a.1.partial_cmp(&b.1).expect("densities are finite"))
        .expect("at least one state");
    if gap <= 1e-6 {
        // Dense random chains mix too fast for this to happen in
        // practice, but a degenerate draw would make the cap vacuous.
        return Err(DcrlError::InvalidArgument(format!(
            "seed {seed}: unconstrained optimum does not concentrate anywhere; use another seed"
        )));
    }
    let mut upper = vec![f64::INFINITY; n_states];
    let cap = rho_unif[s_star] + 0.3 * gap;
    upper[s_star] = cap;
    let constraint = DensityConstraint::upper_only(Bound::PerState(upper))?;

    let lp = build_occupancy_lp(&mdp, &constraint)?;
    let sol = solve_lp(&lp)?;
    if sol.status != LpStatus::Optimal {
        return Err(DcrlError::InvalidArgument(format!(
            "seed {seed}: constructed instance did not solve to optimality; use another seed"
        )));
    }
    let sigma_star = sol.sigma_plus.iter().cloned().fold(0.0f64, f64::max);
    if sigma_star > 1e-9 {
        // Midpoint estimate of the climb integral over the best-response
        // violation. Samples where the best response is already (nearly)
        // feasible lie past the last policy flip and are skipped: ascent
        // terminates there. A bound of 5 keeps roughly 170 iterations at
        // the 0.03 step the convergence suites run, leaving headroom for
        // sampling noise and settling at the equilibrium.
        let steps = 16usize;
        let h = sigma_star / steps as f64;
        let mut climb = 0.0;
        let mut adj = vec![0.0; n_states];
        for j in 0..steps {
            adj[s_star] = -((j as f64 + 0.5) * h);
            let (_, pi) = value_iteration(&mdp, Some(&adj), 1e-9)?;
            let rho = exact_density(&mdp, &pi)?;
            let excess = rho[s_star] - cap;
            if excess > 1e-2 {
                climb += h / excess;
            }
        }
        if climb > 5.0 {
            return Err(DcrlError::InvalidArgument(format!(
                "seed {seed}: dual path too flat (climb integral {climb:.1}); use another seed"
            )));
        }
    }
    Ok((mdp, constraint))
}

/// Sparse text dump of an LP instance for external cross-checking.
pub fn lp_to_text(lp: &OccupancyLp) -> String {
    let mut out = String::new();
    out.push_str("occupancy_lp\n");
    out.push_str(&format!(
        "states {} actions {} gamma {}\n",
        lp.n_states, lp.n_actions, lp.gamma
    ));
    out.push_str("maximize\n");
    for s in 0..lp.n_states {
        for a in 0..lp.n_actions {
            let c = lp.obj[s * lp.n_actions + a];
            if c != 0.0 {
                out.push_str(&format!("obj {s} {a} {c}\n"));
            }
        }
    }
    for s in 0..lp.n_states {
        out.push_str(&format!("flow {s} rhs {}\n", lp.phi[s]));
        for col in 0..lp.n_vars() {
            let v = lp.flow_coeff(s, col);
            if v != 0.0 {
                out.push_str(&format!(
                    "  coef {} {} {v}\n",
                    col / lp.n_actions,
                    col % lp.n_actions
                ));
            }
        }
    }
    for s in 0..lp.n_states {
        if lp.lower[s] > 0.0 || lp.upper[s].is_finite() {
            out.push_str(&format!("bound {s} {} {}\n", lp.lower[s], lp.upper[s]));
        }
    }
    out
}
