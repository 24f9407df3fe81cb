//! Tabular MDPs, environment traits, rollouts, and the exact
//! model-based density / return solvers used as ground truth.

mod io;
mod policy;
mod rollout;

pub use io::{parse_mdp, read_mdp, write_mdp};
pub use policy::{
    standard_normal, ContinuousSpacePolicy, GreedyQPolicy, LinearGaussianPolicy, Policy,
    TabularPolicy,
};
pub use rollout::{estimate_return, rollout, rollout_batch, Episode, ExperienceBuffer, Transition};

use crate::linalg::{inf_norm, solve_dense, DenseMatrix};
use crate::seeding::RolloutRng;
use crate::{DcrlError, Result};
use rand::Rng;

/// Row-sum / distribution tolerance used by construction-time validation.
pub const DIST_TOL: f64 = 1e-9;

/// A finite MDP with explicit transition and reward tensors.
///
/// Terminal states are absorbing with zero reward; rollouts stop on
/// arrival and the exact density solver kills outgoing flow there, so the
/// visitation mass of a terminal state is its discounted arrival mass.
#[derive(Debug, Clone)]
pub struct DiscreteMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// P(s, a, s') flattened as `(s * n_actions + a) * n_states + s'`.
    pub transition: Vec<f64>,
    /// R(s, a, s') with the same layout as `transition`.
    pub reward: Vec<f64>,
    pub gamma: f64,
    /// Initial state distribution.
    pub initial_dist: Vec<f64>,
    /// Absorbing states; sorted, deduplicated.
    pub terminal_states: Vec<usize>,
}

/// A single violation found by [`validate_mdp`].
#[derive(Debug, Clone, PartialEq)]
pub enum MdpViolation {
    RowSum { state: usize, action: usize, sum: f64 },
    NegativeProbability { state: usize, action: usize, next_state: usize, value: f64 },
    DiscountOutOfRange { gamma: f64 },
    InitialDistSum { sum: f64 },
    NegativeInitialProbability { state: usize, value: f64 },
    TerminalOutOfRange { state: usize },
    ShapeMismatch { field: &'static str, expected: usize, actual: usize },
}

impl std::fmt::Display for MdpViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MdpViolation::RowSum { state, action, sum } => {
                write!(f, "transition row (s={state}, a={action}) sums to {sum}, expected 1")
            }
            MdpViolation::NegativeProbability { state, action, next_state, value } => write!(
                f,
                "negative probability P({state},{action},{next_state}) = {value}"
            ),
            MdpViolation::DiscountOutOfRange { gamma } => {
                write!(f, "discount must be in (0,1), got {gamma} (discount must be < 1)")
            }
            MdpViolation::InitialDistSum { sum } => {
                write!(f, "initial distribution sums to {sum}, expected 1")
            }
            MdpViolation::NegativeInitialProbability { state, value } => {
                write!(f, "negative initial probability phi({state}) = {value}")
            }
            MdpViolation::TerminalOutOfRange { state } => {
                write!(f, "terminal state {state} out of range")
            }
            MdpViolation::ShapeMismatch { field, expected, actual } => {
                write!(f, "{field} has length {actual}, expected {expected}")
            }
        }
    }
}

/// Report-style validation: returns every violation instead of failing on
/// the first one. An empty report means the MDP is well formed.
pub fn validate_mdp(mdp: &DiscreteMdp) -> Vec<MdpViolation> {
    let mut report = Vec::new();
    let n = mdp.n_states;
    let a = mdp.n_actions;
    let len = n * a * n;
    if mdp.transition.len() != len {
        report.push(MdpViolation::ShapeMismatch {
            field: "transition",
            expected: len,
            actual: mdp.transition.len(),
        });
        return report;
    }
    if mdp.reward.len() != len {
        report.push(MdpViolation::ShapeMismatch {
            field: "reward",
            expected: len,
            actual: mdp.reward.len(),
        });
    }
    if mdp.initial_dist.len() != n {
        report.push(MdpViolation::ShapeMismatch {
            field: "initial_dist",
            expected: n,
            actual: mdp.initial_dist.len(),
        });
        return report;
    }
    if !(mdp.gamma > 0.0 && mdp.gamma < 1.0) {
        report.push(MdpViolation::DiscountOutOfRange { gamma: mdp.gamma });
    }
    for s in 0..n {
        for act in 0..a {
            let row = mdp.transition_row(s, act);
            let mut sum = 0.0;
            for (sp, &p) in row.iter().enumerate() {
                if p < 0.0 {
                    report.push(MdpViolation::NegativeProbability {
                        state: s,
                        action: act,
                        next_state: sp,
                        value: p,
                    });
                }
                sum += p;
            }
            if (sum - 1.0).abs() > DIST_TOL {
                report.push(MdpViolation::RowSum { state: s, action: act, sum });
            }
        }
    }
    let mut phi_sum = 0.0;
    for (s, &p) in mdp.initial_dist.iter().enumerate() {
        if p < 0.0 {
            report.push(MdpViolation::NegativeInitialProbability { state: s, value: p });
        }
        phi_sum += p;
    }
    if (phi_sum - 1.0).abs() > DIST_TOL {
        report.push(MdpViolation::InitialDistSum { sum: phi_sum });
    }
    for &t in &mdp.terminal_states {
        if t >= n {
            report.push(MdpViolation::TerminalOutOfRange { state: t });
        }
    }
    report
}

impl DiscreteMdp {
    /// Validating constructor. Terminal-state rows are rewritten to
    /// zero-reward self loops so the absorbing convention always holds.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        mut transition: Vec<f64>,
        mut reward: Vec<f64>,
        gamma: f64,
        initial_dist: Vec<f64>,
        mut terminal_states: Vec<usize>,
    ) -> Result<Self> {
        terminal_states.sort_unstable();
        terminal_states.dedup();
        for &t in &terminal_states {
            if t >= n_states {
                return Err(DcrlError::invalid_model(format!(
                    "terminal state {t} out of range for {n_states} states"
                )));
            }
            for a in 0..n_actions {
                let base = (t * n_actions + a) * n_states;
                for sp in 0..n_states {
                    transition[base + sp] = if sp == t { 1.0 } else { 0.0 };
                    reward[base + sp] = 0.0;
                }
            }
        }
        let mdp = DiscreteMdp {
            n_states,
            n_actions,
            transition,
            reward,
            gamma,
            initial_dist,
            terminal_states,
        };
        let report = validate_mdp(&mdp);
        if report.is_empty() {
            Ok(mdp)
        } else {
            let msgs: Vec<String> = report.iter().map(|v| v.to_string()).collect();
            Err(DcrlError::invalid_model(msgs.join("; ")))
        }
    }

    #[inline]
    pub fn idx(&self, s: usize, a: usize, sp: usize) -> usize {
        (s * self.n_actions + a) * self.n_states + sp
    }

    #[inline]
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.transition[base..base + self.n_states]
    }

    #[inline]
    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal_states.binary_search(&s).is_ok()
    }

    /// Expected one-step reward r(s, a) = sum_s' P(s,a,s') R(s,a,s').
    pub fn expected_reward(&self, s: usize, a: usize) -> f64 {
        let base = (s * self.n_actions + a) * self.n_states;
        (0..self.n_states)
            .map(|sp| self.transition[base + sp] * self.reward[base + sp])
            .sum()
    }

    /// Sample a successor state for (s, a).
    pub fn sample_next(&self, s: usize, a: usize, rng: &mut RolloutRng) -> usize {
        let row = self.transition_row(s, a);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (sp, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return sp;
            }
        }
        // Guard against row sums a hair under 1.
        row.iter().rposition(|&p| p > 0.0).unwrap_or(self.n_states - 1)
    }

    /// Episode horizon T for which the truncated tail mass
    /// gamma^(T+1) / (1 - gamma) stays at or below `tail_bound`.
    pub fn horizon_for_tail(&self, tail_bound: f64) -> usize {
        horizon_for_tail(self.gamma, tail_bound)
    }
}

/// Seeded dense random MDP: transition rows drawn flat-Dirichlet, rewards
/// uniform in [-1, 1], a random initial distribution, and no terminal
/// states (so every state keeps positive visitation mass and density
/// bounds on it stay meaningful).
pub fn random_mdp(n_states: usize, n_actions: usize, gamma: f64, seed: u64) -> DiscreteMdp {
    let mut rng = crate::seeding::substream(seed, 0);
    fn dirichlet_row(rng: &mut RolloutRng, n: usize) -> Vec<f64> {
        let mut row: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
        let sum: f64 = row.iter().sum();
        for v in &mut row {
            *v /= sum;
        }
        row
    }
    let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        transition.extend(dirichlet_row(&mut rng, n_states));
    }
    let reward: Vec<f64> = (0..n_states * n_actions * n_states)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let initial = dirichlet_row(&mut rng, n_states);
    DiscreteMdp::new(n_states, n_actions, transition, reward, gamma, initial, vec![])
        .expect("generated rows are normalized")
}

/// Smallest T with gamma^(T+1)/(1-gamma) <= tail_bound.
pub fn horizon_for_tail(gamma: f64, tail_bound: f64) -> usize {
    assert!(gamma > 0.0 && gamma < 1.0);
    assert!(tail_bound > 0.0);
    let target = tail_bound * (1.0 - gamma);
    if target >= 1.0 {
        return 1;
    }
    let t = (target.ln() / gamma.ln()).ceil() as i64 - 1;
    t.max(1) as usize
}

/// Simulation interface shared by discrete MDPs and the continuous
/// benchmark environments.
pub trait Env {
    type State: Clone + PartialEq + std::fmt::Debug;
    type Action: Clone + std::fmt::Debug;

    fn gamma(&self) -> f64;
    fn reset(&self, rng: &mut RolloutRng) -> Self::State;
    /// Advance one step: returns (next state, raw reward, done).
    fn step(
        &self,
        state: &Self::State,
        action: &Self::Action,
        rng: &mut RolloutRng,
    ) -> (Self::State, f64, bool);
}

impl Env for DiscreteMdp {
    type State = usize;
    type Action = usize;

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn reset(&self, rng: &mut RolloutRng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (s, &p) in self.initial_dist.iter().enumerate() {
            acc += p;
            if u < acc {
                return s;
            }
        }
        self.initial_dist.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    fn step(&self, state: &usize, action: &usize, rng: &mut RolloutRng) -> (usize, f64, bool) {
        let sp = self.sample_next(*state, *action, rng);
        let r = self.reward[self.idx(*state, *action, sp)];
        (sp, r, self.is_terminal(sp))
    }
}

/// Continuous environments additionally expose their box geometry.
pub trait ContinuousEnv: Env<State = Vec<f64>, Action = Vec<f64>> {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Per-dimension [lo, hi]; emitted states are clamped inside.
    fn state_bounds(&self) -> Vec<(f64, f64)>;
    fn action_bounds(&self) -> Vec<(f64, f64)>;
}

/// Exact discounted state-visitation density of a tabular policy: the
/// unique solution of rho = phi + gamma * P_pi^T rho, with flow killed at
/// terminal states so each terminal contributes only its arrival mass.
pub fn exact_density(mdp: &DiscreteMdp, policy: &TabularPolicy) -> Result<Vec<f64>> {
    policy.check_compatible(mdp)?;
    let n = mdp.n_states;
    // A = I - gamma * P_pi^T (terminal rows of P_pi zeroed).
    let mut a = DenseMatrix::identity(n);
    for s in 0..n {
        if mdp.is_terminal(s) {
            continue;
        }
        for act in 0..mdp.n_actions {
            let pa = policy.prob(s, act);
            if pa == 0.0 {
                continue;
            }
            let row = mdp.transition_row(s, act);
            for (sp, &p) in row.iter().enumerate() {
                if p != 0.0 {
                    a.add(sp, s, -mdp.gamma * pa * p);
                }
            }
        }
    }
    let rho = solve_dense(&a, &mdp.initial_dist)?;
    let resid = density_residual(mdp, policy, &rho);
    if resid > 1e-10 {
        return Err(DcrlError::Numerical(format!(
            "density fixed-point residual {resid:.3e} exceeds 1e-10"
        )));
    }
    Ok(rho)
}

/// Residual ||rho - phi - gamma P_pi^T rho||_inf of a candidate density.
pub fn density_residual(mdp: &DiscreteMdp, policy: &TabularPolicy, rho: &[f64]) -> f64 {
    let n = mdp.n_states;
    let mut rhs = mdp.initial_dist.clone();
    for s in 0..n {
        if mdp.is_terminal(s) {
            continue;
        }
        for act in 0..mdp.n_actions {
            let pa = policy.prob(s, act);
            if pa == 0.0 {
                continue;
            }
            let row = mdp.transition_row(s, act);
            for (sp, &p) in row.iter().enumerate() {
                rhs[sp] += mdp.gamma * pa * p * rho[s];
            }
        }
    }
    let diff: Vec<f64> = rho.iter().zip(&rhs).map(|(a, b)| a - b).collect();
    inf_norm(&diff)
}

/// Exact state-value function of a tabular policy under an optional
/// per-state reward offset (the multiplier adjustment). Terminal states
/// have value zero.
pub fn policy_values(
    mdp: &DiscreteMdp,
    policy: &TabularPolicy,
    adjustment: Option<&[f64]>,
) -> Result<Vec<f64>> {
    policy.check_compatible(mdp)?;
    if let Some(adj) = adjustment {
        if adj.len() != mdp.n_states {
            return Err(DcrlError::invalid_argument(
                "adjustment length does not match state count",
            ));
        }
    }
    let n = mdp.n_states;
    let mut a = DenseMatrix::identity(n);
    let mut r_pi = vec![0.0; n];
    for s in 0..n {
        if mdp.is_terminal(s) {
            continue; // value 0: row stays identity, rhs stays 0
        }
        for act in 0..mdp.n_actions {
            let pa = policy.prob(s, act);
            if pa == 0.0 {
                continue;
            }
            r_pi[s] += pa * mdp.expected_reward(s, act);
            let row = mdp.transition_row(s, act);
            for (sp, &p) in row.iter().enumerate() {
                if p != 0.0 {
                    a.add(s, sp, -mdp.gamma * pa * p);
                }
            }
        }
        if let Some(adj) = adjustment {
            r_pi[s] += adj[s];
        }
    }
    solve_dense(&a, &r_pi)
}

/// Exact expected discounted return of a tabular policy (raw rewards).
pub fn expected_return(mdp: &DiscreteMdp, policy: &TabularPolicy) -> Result<f64> {
    let v = policy_values(mdp, policy, None)?;
    Ok(mdp.initial_dist.iter().zip(&v).map(|(p, v)| p * v).sum())
}

/// Expected return under a per-state reward offset.
pub fn expected_adjusted_return(
    mdp: &DiscreteMdp,
    policy: &TabularPolicy,
    adjustment: &[f64],
) -> Result<f64> {
    let v = policy_values(mdp, policy, Some(adjustment))?;
    Ok(mdp.initial_dist.iter().zip(&v).map(|(p, v)| p * v).sum())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn single_state_mdp(gamma: f64, reward: f64) -> DiscreteMdp {
        DiscreteMdp::new(1, 1, vec![1.0], vec![reward], gamma, vec![1.0], vec![]).unwrap()
    }

    /// Deterministic chain s0 -> s1 -> ... with the last state absorbing.
    pub(crate) fn chain_mdp(n: usize, gamma: f64, terminal_last: bool) -> DiscreteMdp {
        let mut p = vec![0.0; n * n];
        let r = vec![0.0; n * n];
        for s in 0..n {
            let next = (s + 1).min(n - 1);
            p[s * n + next] = 1.0;
        }
        let mut phi = vec![0.0; n];
        phi[0] = 1.0;
        let terminals = if terminal_last { vec![n - 1] } else { vec![] };
        DiscreteMdp::new(n, 1, p, r, gamma, phi, terminals).unwrap()
    }

    #[test]
    fn well_formed_chain_has_empty_report() {
        let mdp = chain_mdp(2, 0.9, false);
        assert!(validate_mdp(&mdp).is_empty());
    }

    #[test]
    fn bad_row_sum_is_reported_with_indices() {
        let mut mdp = chain_mdp(2, 0.9, false);
        let i = mdp.idx(1, 0, 1);
        mdp.transition[i] = 0.9; // row (1,0) now sums to 0.9
        let report = validate_mdp(&mdp);
        assert_eq!(report.len(), 1);
        match &report[0] {
            MdpViolation::RowSum { state, action, sum } => {
                assert_eq!((*state, *action), (1, 0));
                assert!((sum - 0.9).abs() < 1e-12);
            }
            other => panic!("unexpected violation {other:?}"),
        }
    }

    #[test]
    fn gamma_one_is_rejected() {
        let mut mdp = chain_mdp(2, 0.9, false);
        mdp.gamma = 1.0;
        let report = validate_mdp(&mdp);
        assert!(report
            .iter()
            .any(|v| matches!(v, MdpViolation::DiscountOutOfRange { .. })));
        assert!(report[0].to_string().contains("discount must be < 1"));
        // And the constructor refuses it outright.
        assert!(DiscreteMdp::new(1, 1, vec![1.0], vec![0.0], 1.0, vec![1.0], vec![]).is_err());
    }

    #[test]
    fn exact_density_geometric_mass_on_self_loop() {
        let mdp = single_state_mdp(0.9, 0.0);
        let rho = exact_density(&mdp, &TabularPolicy::uniform(1, 1)).unwrap();
        assert!((rho[0] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn exact_density_two_state_chain_hand_sum() {
        // phi = [1, 0], s0 -> s1, s1 self-loops, gamma = 0.5.
        // rho(s0) = 1; rho(s1) = 0.5 + 0.25 + ... = 1.
        let mdp = chain_mdp(2, 0.5, false);
        let rho = exact_density(&mdp, &TabularPolicy::uniform(2, 1)).unwrap();
        assert!((rho[0] - 1.0).abs() < 1e-10);
        assert!((rho[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn density_total_mass_without_terminals() {
        let mdp = chain_mdp(5, 0.93, false);
        let rho = exact_density(&mdp, &TabularPolicy::uniform(5, 1)).unwrap();
        let total: f64 = rho.iter().sum();
        assert!((total - 1.0 / (1.0 - 0.93)).abs() < 1e-8);
    }

    #[test]
    fn terminal_state_keeps_only_arrival_mass() {
        // s0 -> s1(terminal): rho = [1, gamma].
        let mdp = chain_mdp(2, 0.7, true);
        let rho = exact_density(&mdp, &TabularPolicy::uniform(2, 1)).unwrap();
        assert!((rho[0] - 1.0).abs() < 1e-10);
        assert!((rho[1] - 0.7).abs() < 1e-10);
    }

    #[test]
    fn expected_return_zero_rewards() {
        let mdp = chain_mdp(3, 0.9, false);
        let j = expected_return(&mdp, &TabularPolicy::uniform(3, 1)).unwrap();
        assert_eq!(j, 0.0);
    }

    #[test]
    fn expected_return_geometric_series() {
        let mdp = single_state_mdp(0.9, 1.0);
        let j = expected_return(&mdp, &TabularPolicy::uniform(1, 1)).unwrap();
        assert!((j - 10.0).abs() < 1e-9);
    }

    #[test]
    fn horizon_tail_bound_holds() {
        for &gamma in &[0.5, 0.9, 0.99] {
            let t = horizon_for_tail(gamma, 1e-3);
            let tail = gamma.powi(t as i32 + 1) / (1.0 - gamma);
            assert!(tail <= 1e-3, "gamma={gamma} tail={tail}");
            // T is minimal: one step shorter overshoots.
            let tail_prev = gamma.powi(t as i32) / (1.0 - gamma);
            assert!(t == 1 || tail_prev > 1e-3);
        }
    }
}
