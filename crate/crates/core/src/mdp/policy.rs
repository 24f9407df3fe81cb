//! Policy representations: stochastic tabular policies for discrete MDPs,
//! greedy/epsilon-greedy policies over Q tables, and linear-Gaussian
//! controllers for the continuous environments.

use super::{DiscreteMdp, Env};
use crate::seeding::RolloutRng;
use crate::{DcrlError, Result};
use rand::Rng;

/// Anything that can pick actions for an environment.
pub trait Policy<E: Env + ?Sized> {
    fn act(&self, state: &E::State, rng: &mut RolloutRng) -> E::Action;
}

/// Full per-state action distribution, row-major `probs[s * n_actions + a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(DcrlError::invalid_argument(format!(
                "policy table has length {}, expected {}",
                probs.len(),
                n_states * n_actions
            )));
        }
        for s in 0..n_states {
            let row = &probs[s * n_actions..(s + 1) * n_actions];
            if row.iter().any(|&p| p < 0.0) {
                return Err(DcrlError::invalid_argument(format!(
                    "negative action probability at state {s}"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > super::DIST_TOL {
                return Err(DcrlError::invalid_argument(format!(
                    "action distribution at state {s} sums to {sum}"
                )));
            }
        }
        Ok(TabularPolicy { n_states, n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        TabularPolicy {
            n_states,
            n_actions,
            probs: vec![p; n_states * n_actions],
        }
    }

    /// Deterministic policy from a per-state action list.
    pub fn deterministic(n_states: usize, n_actions: usize, actions: &[usize]) -> Result<Self> {
        if actions.len() != n_states {
            return Err(DcrlError::invalid_argument(
                "one action per state required",
            ));
        }
        let mut probs = vec![0.0; n_states * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(DcrlError::invalid_argument(format!(
                    "action {a} out of range at state {s}"
                )));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(TabularPolicy { n_states, n_actions, probs })
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn sample(&self, s: usize, rng: &mut RolloutRng) -> usize {
        let row = &self.probs[s * self.n_actions..(s + 1) * self.n_actions];
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (a, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    pub(crate) fn check_compatible(&self, mdp: &DiscreteMdp) -> Result<()> {
        if self.n_states != mdp.n_states || self.n_actions != mdp.n_actions {
            return Err(DcrlError::invalid_argument(format!(
                "policy shape ({}, {}) does not match MDP ({}, {})",
                self.n_states, self.n_actions, mdp.n_states, mdp.n_actions
            )));
        }
        Ok(())
    }
}

impl<E: Env<State = usize, Action = usize> + ?Sized> Policy<E> for TabularPolicy {
    fn act(&self, state: &usize, rng: &mut RolloutRng) -> usize {
        self.sample(*state, rng)
    }
}

/// Greedy (or epsilon-greedy) policy over a flat Q table. Ties go to the
/// lowest action index so evaluation runs are reproducible.
#[derive(Debug, Clone)]
pub struct GreedyQPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    pub q: Vec<f64>,
    pub epsilon: f64,
}

impl GreedyQPolicy {
    pub fn new(n_states: usize, n_actions: usize, q: Vec<f64>, epsilon: f64) -> Result<Self> {
        if q.len() != n_states * n_actions {
            return Err(DcrlError::invalid_argument(format!(
                "Q table has length {}, expected {}",
                q.len(),
                n_states * n_actions
            )));
        }
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(DcrlError::invalid_argument(format!(
                "epsilon {epsilon} outside [0, 1]"
            )));
        }
        Ok(GreedyQPolicy { n_states, n_actions, q, epsilon })
    }

    pub fn greedy_action(&self, s: usize) -> usize {
        let row = &self.q[s * self.n_actions..(s + 1) * self.n_actions];
        let mut best = 0;
        for (a, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = a;
            }
        }
        best
    }

    /// Expand into an explicit tabular policy (epsilon mass spread
    /// uniformly over all actions, remainder on the greedy one).
    pub fn to_tabular(&self) -> TabularPolicy {
        let mut probs = vec![self.epsilon / self.n_actions as f64; self.n_states * self.n_actions];
        for s in 0..self.n_states {
            probs[s * self.n_actions + self.greedy_action(s)] += 1.0 - self.epsilon;
        }
        TabularPolicy {
            n_states: self.n_states,
            n_actions: self.n_actions,
            probs,
        }
    }
}

impl<E: Env<State = usize, Action = usize> + ?Sized> Policy<E> for GreedyQPolicy {
    fn act(&self, state: &usize, rng: &mut RolloutRng) -> usize {
        if self.epsilon > 0.0 && rng.gen::<f64>() < self.epsilon {
            rng.gen_range(0..self.n_actions)
        } else {
            self.greedy_action(*state)
        }
    }
}

/// Marker trait for policies over box-valued states and actions.
pub trait ContinuousSpacePolicy: for<'a> Fn(&'a [f64], &'a mut RolloutRng) -> Vec<f64> {}

/// Linear state-feedback controller with diagonal Gaussian exploration
/// noise: a = clamp(W s + b + eps), eps_i ~ N(0, noise_std_i^2).
#[derive(Debug, Clone)]
pub struct LinearGaussianPolicy {
    pub state_dim: usize,
    pub action_dim: usize,
    /// Row-major `weights[a * state_dim + s]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// Per-action-dimension noise scale; zero means deterministic.
    pub noise_std: Vec<f64>,
    /// Per-action-dimension clamp range.
    pub action_bounds: Vec<(f64, f64)>,
}

impl LinearGaussianPolicy {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        noise_std: Vec<f64>,
        action_bounds: Vec<(f64, f64)>,
    ) -> Result<Self> {
        if weights.len() != state_dim * action_dim
            || bias.len() != action_dim
            || noise_std.len() != action_dim
            || action_bounds.len() != action_dim
        {
            return Err(DcrlError::invalid_argument(
                "linear policy parameter shapes do not match dims",
            ));
        }
        Ok(LinearGaussianPolicy {
            state_dim,
            action_dim,
            weights,
            bias,
            noise_std,
            action_bounds,
        })
    }

    /// Flat parameter vector [weights..., bias...] used by the CEM search.
    pub fn from_flat(
        state_dim: usize,
        action_dim: usize,
        params: &[f64],
        noise_std: Vec<f64>,
        action_bounds: Vec<(f64, f64)>,
    ) -> Result<Self> {
        let expected = state_dim * action_dim + action_dim;
        if params.len() != expected {
            return Err(DcrlError::invalid_argument(format!(
                "expected {expected} policy parameters, got {}",
                params.len()
            )));
        }
        let weights = params[..state_dim * action_dim].to_vec();
        let bias = params[state_dim * action_dim..].to_vec();
        Self::new(state_dim, action_dim, weights, bias, noise_std, action_bounds)
    }

    pub fn n_params(state_dim: usize, action_dim: usize) -> usize {
        state_dim * action_dim + action_dim
    }

    pub fn mean_action(&self, state: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for a in 0..self.action_dim {
            for (s, &x) in state.iter().enumerate() {
                out[a] += self.weights[a * self.state_dim + s] * x;
            }
        }
        out
    }

    pub fn act(&self, state: &[f64], rng: &mut RolloutRng) -> Vec<f64> {
        let mut out = self.mean_action(state);
        for a in 0..self.action_dim {
            if self.noise_std[a] > 0.0 {
                out[a] += self.noise_std[a] * standard_normal(rng);
            }
            let (lo, hi) = self.action_bounds[a];
            out[a] = out[a].clamp(lo, hi);
        }
        out
    }
}

impl<E: Env<State = Vec<f64>, Action = Vec<f64>> + ?Sized> Policy<E> for LinearGaussianPolicy {
    fn act(&self, state: &Vec<f64>, rng: &mut RolloutRng) -> Vec<f64> {
        LinearGaussianPolicy::act(self, state, rng)
    }
}

/// Box-Muller standard normal draw.
pub fn standard_normal(rng: &mut RolloutRng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > 0.0 {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}
