//! Episode simulation. Batches draw one RNG substream per episode index,
//! so results are identical whether episodes run serially or in parallel.

use super::{Env, Policy};
use crate::seeding::{substream, RolloutRng};
use rayon::prelude::*;

/// One sampled trajectory. `states` always has one more entry than
/// `actions`/`rewards` and includes the final arrival state; an episode
/// that starts in a terminal state has a single state and no actions.
#[derive(Debug, Clone)]
pub struct Episode<S, A> {
    pub states: Vec<S>,
    pub actions: Vec<A>,
    pub rewards: Vec<f64>,
    /// True when the episode ended by reaching a terminal state rather
    /// than by hitting the horizon.
    pub terminated: bool,
}

impl<S, A> Episode<S, A> {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Discounted reward sum of this episode.
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        let mut total = 0.0;
        let mut w = 1.0;
        for &r in &self.rewards {
            total += w * r;
            w *= gamma;
        }
        total
    }

    /// Undiscounted reward sum.
    pub fn raw_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// A single (s, a, r, s', done) step, for off-policy learners.
#[derive(Debug, Clone)]
pub struct Transition<S, A> {
    pub state: S,
    pub action: A,
    pub reward: f64,
    pub next_state: S,
    pub done: bool,
}

/// Episode store that keeps trajectory structure, so both flat
/// transitions (for Q-learning) and per-step discount weights (for
/// density estimation) can be recovered.
#[derive(Debug, Clone, Default)]
pub struct ExperienceBuffer<S, A> {
    pub episodes: Vec<Episode<S, A>>,
}

impl<S, A> ExperienceBuffer<S, A> {
    pub fn new() -> Self {
        ExperienceBuffer { episodes: Vec::new() }
    }

    pub fn from_episodes(episodes: Vec<Episode<S, A>>) -> Self {
        ExperienceBuffer { episodes }
    }

    pub fn push_episode(&mut self, ep: Episode<S, A>) {
        self.episodes.push(ep);
    }

    pub fn n_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn n_transitions(&self) -> usize {
        self.episodes.iter().map(|e| e.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Every visited state (arrival states included) paired with its raw
    /// discount weight gamma^j; division by N is the estimator's job.
    pub fn weighted_states(&self, gamma: f64) -> impl Iterator<Item = (&S, f64)> + '_ {
        self.episodes.iter().flat_map(move |ep| {
            ep.states.iter().enumerate().map(move |(j, s)| (s, gamma.powi(j as i32)))
        })
    }

    /// Total discount weight Σ_i Σ_{j=0}^{T_i} gamma^j across the buffer.
    pub fn total_weight(&self, gamma: f64) -> f64 {
        self.episodes
            .iter()
            .map(|ep| {
                let mut sum = 0.0;
                let mut w = 1.0;
                for _ in 0..ep.states.len() {
                    sum += w;
                    w *= gamma;
                }
                sum
            })
            .sum()
    }
}

impl<S: Clone, A: Clone> ExperienceBuffer<S, A> {
    /// Flat view of all steps in episode order. `done` is set only on the
    /// last step of episodes that reached a terminal (not on truncation).
    pub fn transitions(&self) -> impl Iterator<Item = Transition<S, A>> + '_ {
        self.episodes.iter().flat_map(|ep| {
            (0..ep.len()).map(move |i| Transition {
                state: ep.states[i].clone(),
                action: ep.actions[i].clone(),
                reward: ep.rewards[i],
                next_state: ep.states[i + 1].clone(),
                done: ep.terminated && i + 1 == ep.len(),
            })
        })
    }
}

/// Run one episode up to `horizon` steps, stopping early at terminals.
pub fn rollout<E: Env, P: Policy<E>>(
    env: &E,
    policy: &P,
    horizon: usize,
    rng: &mut RolloutRng,
) -> Episode<E::State, E::Action> {
    let mut state = env.reset(rng);
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    states.push(state.clone());
    let mut terminated = false;
    for _ in 0..horizon {
        let action = policy.act(&state, rng);
        let (next, reward, done) = env.step(&state, &action, rng);
        actions.push(action);
        rewards.push(reward);
        states.push(next.clone());
        state = next;
        if done {
            terminated = true;
            break;
        }
    }
    Episode { states, actions, rewards, terminated }
}

/// Run `n_episodes` episodes in parallel. Episode `i` uses the RNG
/// substream `(seed, i)`, so output is a pure function of the arguments.
pub fn rollout_batch<E, P>(
    env: &E,
    policy: &P,
    n_episodes: usize,
    horizon: usize,
    seed: u64,
) -> Vec<Episode<E::State, E::Action>>
where
    E: Env + Sync,
    P: Policy<E> + Sync,
    E::State: Send,
    E::Action: Send,
{
    (0..n_episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            rollout(env, policy, horizon, &mut rng)
        })
        .collect()
}

/// Monte-Carlo estimate of the expected discounted return.
pub fn estimate_return<S, A>(episodes: &[Episode<S, A>], gamma: f64) -> f64 {
    if episodes.is_empty() {
        return 0.0;
    }
    episodes.iter().map(|e| e.discounted_return(gamma)).sum::<f64>() / episodes.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{expected_return, DiscreteMdp, TabularPolicy};
    use crate::seeding::substream;

    fn two_state_terminal() -> DiscreteMdp {
        // s0 -> s1 (terminal) with reward 1 on the transition.
        let p = vec![0.0, 1.0, 0.0, 1.0];
        let r = vec![0.0, 1.0, 0.0, 0.0];
        DiscreteMdp::new(2, 1, p, r, 0.9, vec![1.0, 0.0], vec![1]).unwrap()
    }

    #[test]
    fn rollout_stops_at_terminal_and_keeps_arrival_state() {
        let mdp = two_state_terminal();
        let pi = TabularPolicy::uniform(2, 1);
        let mut rng = substream(3, 0);
        let ep = rollout(&mdp, &pi, 100, &mut rng);
        assert_eq!(ep.states, vec![0, 1]);
        assert_eq!(ep.rewards, vec![1.0]);
        assert!(ep.terminated);
        assert_eq!(ep.discounted_return(0.9), 1.0);
    }

    #[test]
    fn rollout_truncates_at_horizon() {
        let mdp = crate::mdp::tests::chain_mdp(10, 0.9, false);
        let pi = TabularPolicy::uniform(10, 1);
        let mut rng = substream(3, 1);
        let ep = rollout(&mdp, &pi, 4, &mut rng);
        assert_eq!(ep.len(), 4);
        assert_eq!(ep.states.len(), 5);
        assert!(!ep.terminated);
    }

    #[test]
    fn batch_is_reproducible_and_order_independent() {
        let mdp = two_state_terminal();
        let pi = TabularPolicy::uniform(2, 1);
        let a = rollout_batch(&mdp, &pi, 32, 50, 9);
        let b = rollout_batch(&mdp, &pi, 32, 50, 9);
        assert_eq!(a.len(), 32);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.states, y.states);
            assert_eq!(x.rewards, y.rewards);
        }
        // Each episode matches a fresh serial run with the same substream.
        for (i, ep) in a.iter().enumerate() {
            let mut rng = substream(9, i as u64);
            let solo = rollout(&mdp, &pi, 50, &mut rng);
            assert_eq!(solo.states, ep.states);
        }
    }

    #[test]
    fn estimated_return_approaches_exact_value() {
        // Two actions, stochastic transitions, no terminals.
        let p = vec![
            0.7, 0.3, // s0, a0
            0.2, 0.8, // s0, a1
            0.5, 0.5, // s1, a0
            0.9, 0.1, // s1, a1
        ];
        let r = vec![1.0, 0.0, 0.0, 2.0, -1.0, 0.5, 0.0, 0.0];
        let mdp = DiscreteMdp::new(2, 2, p, r, 0.8, vec![0.5, 0.5], vec![]).unwrap();
        let pi = TabularPolicy::new(2, 2, vec![0.4, 0.6, 0.7, 0.3]).unwrap();
        let exact = expected_return(&mdp, &pi).unwrap();
        let horizon = mdp.horizon_for_tail(1e-4);
        let eps = rollout_batch(&mdp, &pi, 4000, horizon, 11);
        let est = estimate_return(&eps, mdp.gamma);
        assert!((est - exact).abs() < 0.05, "est {est} vs exact {exact}");
    }

    #[test]
    fn buffer_marks_only_final_transition_done() {
        let mdp = crate::mdp::tests::chain_mdp(4, 0.9, true);
        let pi = TabularPolicy::uniform(4, 1);
        let mut rng = substream(0, 0);
        let ep = rollout(&mdp, &pi, 10, &mut rng);
        let mut buf = ExperienceBuffer::new();
        buf.push_episode(ep);
        assert_eq!(buf.n_transitions(), 3);
        let steps: Vec<_> = buf.transitions().collect();
        assert!(!steps[0].done);
        assert!(steps[2].done);
    }

    #[test]
    fn weighted_states_cover_arrivals_with_geometric_weights() {
        let mdp = crate::mdp::tests::chain_mdp(3, 0.5, true);
        let pi = TabularPolicy::uniform(3, 1);
        let mut rng = substream(0, 1);
        let buf = ExperienceBuffer::from_episodes(vec![rollout(&mdp, &pi, 10, &mut rng)]);
        let pairs: Vec<(usize, f64)> =
            buf.weighted_states(0.5).map(|(s, w)| (*s, w)).collect();
        assert_eq!(pairs, vec![(0, 1.0), (1, 0.5), (2, 0.25)]);
        assert!((buf.total_weight(0.5) - 1.75).abs() < 1e-15);
    }
}
