//! Inner policy optimizers for the adjusted-reward problem: exact value
//! iteration (model-based), tabular Q-learning (model-free, discrete),
//! and cross-entropy search over linear-Gaussian controllers (model-free,
//! continuous).

use crate::mdp::{
    rollout, ContinuousEnv, DiscreteMdp, Env, GreedyQPolicy, LinearGaussianPolicy, TabularPolicy,
};
use crate::seeding::substream2;
use crate::{DcrlError, Result};
use rand::Rng;
use rayon::prelude::*;

/// Action-value table with per-pair visit counts.
#[derive(Debug, Clone)]
pub struct QTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub values: Vec<f64>,
    pub visits: Vec<u64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        QTable {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
            visits: vec![0; n_states * n_actions],
        }
    }

    #[inline]
    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn max_q(&self, s: usize) -> f64 {
        let row = &self.values[s * self.n_actions..(s + 1) * self.n_actions];
        row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Greedy action with lowest-index tie-break.
    pub fn greedy_action(&self, s: usize) -> usize {
        let row = &self.values[s * self.n_actions..(s + 1) * self.n_actions];
        let mut best = 0;
        for (a, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = a;
            }
        }
        best
    }

    pub fn greedy_policy(&self, epsilon: f64) -> Result<GreedyQPolicy> {
        GreedyQPolicy::new(self.n_states, self.n_actions, self.values.clone(), epsilon)
    }

    /// Deterministic greedy policy as an explicit tabular distribution.
    pub fn greedy_tabular(&self) -> TabularPolicy {
        let actions: Vec<usize> = (0..self.n_states).map(|s| self.greedy_action(s)).collect();
        TabularPolicy::deterministic(self.n_states, self.n_actions, &actions)
            .expect("greedy actions are in range")
    }

    /// Stochastic policy pi(a|s) proportional to exp(Q(s,a)/temperature).
    /// Temperature 0 falls back to the deterministic greedy policy.
    pub fn softmax_tabular(&self, temperature: f64) -> Result<TabularPolicy> {
        if temperature < 0.0 {
            return Err(DcrlError::invalid_argument("temperature must be >= 0"));
        }
        if temperature == 0.0 {
            return Ok(self.greedy_tabular());
        }
        let mut probs = vec![0.0; self.n_states * self.n_actions];
        for s in 0..self.n_states {
            let row = &self.values[s * self.n_actions..(s + 1) * self.n_actions];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (a, &v) in row.iter().enumerate() {
                let e = ((v - m) / temperature).exp();
                probs[s * self.n_actions + a] = e;
                z += e;
            }
            for a in 0..self.n_actions {
                probs[s * self.n_actions + a] /= z;
            }
        }
        TabularPolicy::new(self.n_states, self.n_actions, probs)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("state,action,q,visits\n");
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                out.push_str(&format!(
                    "{s},{a},{},{}\n",
                    self.q(s, a),
                    self.visits[s * self.n_actions + a]
                ));
            }
        }
        out
    }
}

/// Exact value iteration for the adjusted-reward MDP. The optional
/// `adjustment` adds a per-state offset to the reward of every action
/// taken at that state. Iterates until the Bellman residual of the
/// returned table is at most `tol`; the greedy policy breaks ties toward
/// the lowest action index.
pub fn value_iteration(
    mdp: &DiscreteMdp,
    adjustment: Option<&[f64]>,
    tol: f64,
) -> Result<(QTable, TabularPolicy)> {
    value_iteration_warm(mdp, adjustment, tol, None)
}

/// [`value_iteration`] seeded from a previous Q table. When the
/// adjustment changes only slightly between calls (as in a dual-ascent
/// outer loop), restarting from the old table cuts the sweep count by an
/// order of magnitude.
pub fn value_iteration_warm(
    mdp: &DiscreteMdp,
    adjustment: Option<&[f64]>,
    tol: f64,
    warm_start: Option<&QTable>,
) -> Result<(QTable, TabularPolicy)> {
    if !(tol > 0.0) {
        return Err(DcrlError::invalid_argument("tolerance must be positive"));
    }
    if let Some(adj) = adjustment {
        if adj.len() != mdp.n_states {
            return Err(DcrlError::invalid_argument(
                "adjustment length does not match state count",
            ));
        }
    }
    let n = mdp.n_states;
    let na = mdp.n_actions;
    // Adjusted one-step rewards; terminal states contribute nothing.
    let mut r_adj = vec![0.0; n * na];
    for s in 0..n {
        if mdp.is_terminal(s) {
            continue;
        }
        let off = adjustment.map_or(0.0, |a| a[s]);
        for a in 0..na {
            r_adj[s * na + a] = mdp.expected_reward(s, a) + off;
        }
    }
    let mut q = match warm_start {
        Some(t) if t.values.len() == n * na => t.values.clone(),
        _ => vec![0.0; n * na],
    };
    let mut next = vec![0.0; n * na];
    // Contraction: residual of the k+1 iterate is <= gamma * delta_k, so
    // stop once gamma * delta <= tol. Cap iterations defensively.
    let max_iters = 2_000_000usize;
    let mut iters = 0;
    loop {
        let mut vmax = vec![0.0; n];
        for s in 0..n {
            let row = &q[s * na..(s + 1) * na];
            vmax[s] = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
        let mut delta = 0.0_f64;
        for s in 0..n {
            for a in 0..na {
                let idx = s * na + a;
                let val = if mdp.is_terminal(s) {
                    0.0
                } else {
                    let row = mdp.transition_row(s, a);
                    let mut exp_next = 0.0;
                    for (sp, &p) in row.iter().enumerate() {
                        if p != 0.0 && !mdp.is_terminal(sp) {
                            exp_next += p * vmax[sp];
                        }
                    }
                    r_adj[idx] + mdp.gamma * exp_next
                };
                delta = delta.max((val - q[idx]).abs());
                next[idx] = val;
            }
        }
        std::mem::swap(&mut q, &mut next);
        iters += 1;
        if mdp.gamma * delta <= tol {
            break;
        }
        if iters >= max_iters {
            return Err(DcrlError::Numerical(format!(
                "value iteration did not reach tolerance {tol} in {max_iters} sweeps"
            )));
        }
    }
    let table = QTable {
        n_states: n,
        n_actions: na,
        values: q,
        visits: vec![0; n * na],
    };
    let policy = table.greedy_tabular();
    Ok((table, policy))
}

/// Schedules and budget for tabular Q-learning.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Initial learning rate, in (0, 1].
    pub learning_rate: f64,
    /// Per-episode multiplicative decay of the learning rate, in (0, 1].
    pub lr_decay: f64,
    /// Learning-rate floor.
    pub lr_min: f64,
    /// Initial exploration rate, in [0, 1].
    pub epsilon_start: f64,
    /// Exploration floor.
    pub epsilon_end: f64,
    /// Per-episode multiplicative decay of epsilon, in (0, 1].
    pub epsilon_decay: f64,
    pub episodes: usize,
    pub horizon: usize,
    /// Target TD-residual magnitude; purely informational in the result.
    pub tol: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            learning_rate: 0.5,
            lr_decay: 0.999,
            lr_min: 0.01,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay: 0.995,
            episodes: 2000,
            horizon: 200,
            tol: 1e-2,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| x > 0.0 && x <= 1.0;
        if !in_unit(self.learning_rate) || !in_unit(self.lr_decay) {
            return Err(DcrlError::invalid_argument(
                "learning rate and decay must be in (0, 1]",
            ));
        }
        if !(0.0..=1.0).contains(&self.epsilon_start)
            || !(0.0..=1.0).contains(&self.epsilon_end)
            || !in_unit(self.epsilon_decay)
        {
            return Err(DcrlError::invalid_argument(
                "epsilon schedule values must be in [0, 1] with decay in (0, 1]",
            ));
        }
        if self.episodes == 0 {
            return Err(DcrlError::invalid_argument("episodes must be >= 1"));
        }
        if self.horizon == 0 {
            return Err(DcrlError::invalid_argument("horizon must be >= 1"));
        }
        Ok(())
    }
}

/// Q-learning output: the table, the evaluation-mode greedy policy
/// (epsilon = 0), and an empirical Bellman-residual estimate (mean |TD
/// error| over the final tenth of the training episodes).
#[derive(Debug, Clone)]
pub struct QLearnResult {
    pub table: QTable,
    pub policy: GreedyQPolicy,
    pub bellman_residual: f64,
}

/// Tabular Q-learning on adjusted rewards. `adjust(s)` is added to every
/// raw reward received for an action taken at state `s`. Episode `e`
/// draws RNG substream `(seed, e)`, so runs are reproducible.
pub fn q_learning<E, F>(
    env: &E,
    n_states: usize,
    n_actions: usize,
    adjust: F,
    config: &SolverConfig,
    warm_start: Option<QTable>,
) -> Result<QLearnResult>
where
    E: Env<State = usize, Action = usize>,
    F: Fn(usize) -> f64,
{
    config.validate()?;
    let mut table = match warm_start {
        Some(t) => {
            if t.n_states != n_states || t.n_actions != n_actions {
                return Err(DcrlError::invalid_argument(
                    "warm-start table shape does not match the environment",
                ));
            }
            t
        }
        None => QTable::zeros(n_states, n_actions),
    };
    let gamma = env.gamma();
    let tail_start = config.episodes - config.episodes.div_ceil(10);
    let mut tail_abs_td = 0.0;
    let mut tail_steps = 0u64;
    for e in 0..config.episodes {
        let ef = e as f64;
        let lr = (config.learning_rate * config.lr_decay.powf(ef)).max(config.lr_min);
        let eps = (config.epsilon_start * config.epsilon_decay.powf(ef)).max(config.epsilon_end);
        let mut rng = crate::seeding::substream(config.seed, e as u64);
        let mut s = env.reset(&mut rng);
        for _ in 0..config.horizon {
            let a = if rng.gen::<f64>() < eps {
                rng.gen_range(0..n_actions)
            } else {
                table.greedy_action(s)
            };
            let (sp, raw, done) = env.step(&s, &a, &mut rng);
            let reward = raw + adjust(s);
            let target = if done { reward } else { reward + gamma * table.max_q(sp) };
            let idx = s * n_actions + a;
            let td = target - table.values[idx];
            table.values[idx] += lr * td;
            table.visits[idx] += 1;
            if e >= tail_start {
                tail_abs_td += td.abs();
                tail_steps += 1;
            }
            s = sp;
            if done {
                break;
            }
        }
    }
    let bellman_residual = if tail_steps > 0 { tail_abs_td / tail_steps as f64 } else { 0.0 };
    let policy = table.greedy_policy(0.0)?;
    Ok(QLearnResult { table, policy, bellman_residual })
}

/// Cross-entropy search configuration over linear-Gaussian policy
/// parameters.
#[derive(Debug, Clone)]
pub struct CemConfig {
    /// Candidates per generation; at least 4.
    pub population: usize,
    /// Fraction of candidates kept as elites, in (0, 1).
    pub elite_fraction: f64,
    /// Additive floor on the parameter standard deviation.
    pub noise_floor: f64,
    /// Number of generations.
    pub generations: usize,
    pub episodes_per_candidate: usize,
    pub horizon: usize,
    /// Initial parameter mean; zeros when empty.
    pub initial_mean: Vec<f64>,
    pub initial_std: f64,
    pub seed: u64,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            population: 32,
            elite_fraction: 0.2,
            noise_floor: 1e-3,
            generations: 20,
            episodes_per_candidate: 4,
            horizon: 100,
            initial_mean: Vec::new(),
            initial_std: 1.0,
            seed: 0,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 4 {
            return Err(DcrlError::invalid_argument(
                "population must be at least 4",
            ));
        }
        if !(self.elite_fraction > 0.0 && self.elite_fraction < 1.0) {
            return Err(DcrlError::invalid_argument(
                "elite fraction must be in (0, 1)",
            ));
        }
        if self.generations == 0 || self.episodes_per_candidate == 0 || self.horizon == 0 {
            return Err(DcrlError::invalid_argument(
                "generations, episodes, and horizon must be >= 1",
            ));
        }
        if !(self.initial_std > 0.0) || self.noise_floor < 0.0 {
            return Err(DcrlError::invalid_argument(
                "initial std must be positive and noise floor nonnegative",
            ));
        }
        Ok(())
    }
}

/// Cross-entropy search output. `elite_mean_returns` records the elite
/// average adjusted return per generation (useful for monitoring search
/// progress).
#[derive(Debug, Clone)]
pub struct CemResult {
    pub policy: LinearGaussianPolicy,
    pub mean_params: Vec<f64>,
    pub param_std: Vec<f64>,
    pub elite_mean_returns: Vec<f64>,
    /// Standard deviation of the elite scores in the final generation —
    /// a rough measure of how far the search is from settled.
    pub elite_spread: f64,
}

/// Optional warm start for [`cem_search`]: the sampling distribution of a
/// previous run.
#[derive(Debug, Clone)]
pub struct CemState {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Cross-entropy policy search. Candidates are flat parameter vectors of
/// a deterministic linear controller; each is scored by its mean adjusted
/// discounted return over seeded rollouts, elites refit the sampling
/// Gaussian, and the final mean parameters become the returned
/// (deterministic) policy. `adjust(s)` is added to the raw reward of
/// every step taken from state s.
pub fn cem_search<E, F>(
    env: &E,
    adjust: F,
    config: &CemConfig,
    warm_start: Option<CemState>,
) -> Result<CemResult>
where
    E: ContinuousEnv + Sync,
    F: Fn(&[f64]) -> f64 + Sync,
{
    config.validate()?;
    let n_params = LinearGaussianPolicy::n_params(env.state_dim(), env.action_dim());
    let (mut mean, mut std): (Vec<f64>, Vec<f64>) = match warm_start {
        Some(st) => {
            if st.mean.len() != n_params || st.std.len() != n_params {
                return Err(DcrlError::invalid_argument(
                    "warm-start distribution has the wrong parameter count",
                ));
            }
            (st.mean, st.std)
        }
        None => {
            let mean = if config.initial_mean.is_empty() {
                vec![0.0; n_params]
            } else if config.initial_mean.len() == n_params {
                config.initial_mean.clone()
            } else {
                return Err(DcrlError::invalid_argument(format!(
                    "initial mean has {} entries, policy has {n_params} parameters",
                    config.initial_mean.len()
                )));
            };
            (mean, vec![config.initial_std; n_params])
        }
    };

    let n_elite = ((config.population as f64 * config.elite_fraction).ceil() as usize)
        .clamp(1, config.population - 1);
    let gamma = env.gamma();
    let mut elite_mean_returns = Vec::with_capacity(config.generations);
    let mut elite_spread = 0.0;

    for gen in 0..config.generations {
        // Sample the whole generation from one substream so candidate
        // count, not thread schedule, determines the draws.
        let mut sample_rng = substream2(config.seed, gen as u64, u64::MAX);
        let candidates: Vec<Vec<f64>> = (0..config.population)
            .map(|_| {
                (0..n_params)
                    .map(|d| {
                        mean[d] + std[d] * crate::mdp::standard_normal(&mut sample_rng)
                    })
                    .collect()
            })
            .collect();

        let scores: Vec<f64> = candidates
            .par_iter()
            .enumerate()
            .map(|(c, params)| {
                let policy = LinearGaussianPolicy::from_flat(
                    env.state_dim(),
                    env.action_dim(),
                    params,
                    vec![0.0; env.action_dim()],
                    env.action_bounds(),
                )
                .expect("parameter count checked above");
                let mut total = 0.0;
                for e in 0..config.episodes_per_candidate {
                    let mut rng = substream2(
                        config.seed,
                        gen as u64,
                        (c * config.episodes_per_candidate + e) as u64,
                    );
                    let ep = rollout(env, &policy, config.horizon, &mut rng);
                    let mut ret = 0.0;
                    let mut w = 1.0;
                    for (j, &r) in ep.rewards.iter().enumerate() {
                        ret += w * (r + adjust(&ep.states[j]));
                        w *= gamma;
                    }
                    total += ret;
                }
                total / config.episodes_per_candidate as f64
            })
            .collect();

        // Rank best-first; ties break toward the lower candidate index.
        let mut order: Vec<usize> = (0..config.population).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let elites = &order[..n_elite];
        let elite_mean = elites.iter().map(|&i| scores[i]).sum::<f64>() / n_elite as f64;
        elite_mean_returns.push(elite_mean);
        elite_spread = (elites
            .iter()
            .map(|&i| (scores[i] - elite_mean) * (scores[i] - elite_mean))
            .sum::<f64>()
            / n_elite as f64)
            .sqrt();

        for d in 0..n_params {
            let m: f64 = elites.iter().map(|&i| candidates[i][d]).sum::<f64>() / n_elite as f64;
            let v: f64 = elites
                .iter()
                .map(|&i| (candidates[i][d] - m) * (candidates[i][d] - m))
                .sum::<f64>()
                / n_elite as f64;
            mean[d] = m;
            std[d] = v.sqrt() + config.noise_floor;
        }
    }

    let policy = LinearGaussianPolicy::from_flat(
        env.state_dim(),
        env.action_dim(),
        &mean,
        vec![0.0; env.action_dim()],
        env.action_bounds(),
    )?;
    Ok(CemResult { policy, mean_params: mean, param_std: std, elite_mean_returns, elite_spread })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{
        exact_density, expected_adjusted_return, expected_return, random_mdp, rollout_batch,
        DiscreteMdp,
    };
    use crate::seeding::RolloutRng;
    use rand::Rng;

    #[test]
    fn vi_zero_rewards_zero_q_index_zero_actions() {
        let mut mdp = random_mdp(3, 2, 0.9, 5);
        mdp.reward.iter_mut().for_each(|r| *r = 0.0);
        let (q, pi) = value_iteration(&mdp, None, 1e-10).unwrap();
        assert!(q.values.iter().all(|&v| v == 0.0));
        for s in 0..3 {
            assert_eq!(pi.prob(s, 0), 1.0);
        }
    }

    #[test]
    fn vi_single_state_geometric_value() {
        let mdp =
            DiscreteMdp::new(1, 2, vec![1.0, 1.0], vec![1.0, 1.0], 0.9, vec![1.0], vec![])
                .unwrap();
        let (q, _) = value_iteration(&mdp, None, 1e-9).unwrap();
        assert!((q.q(0, 0) - 10.0).abs() < 1e-7);
        assert!((q.q(0, 1) - 10.0).abs() < 1e-7);
    }

    #[test]
    fn vi_respects_adjustment_penalty() {
        // From s0: action 0 goes to s1 (raw reward 0.6/step there via
        // self-loop), action 1 goes to s2 (raw reward 0.5/step). With a
        // penalty sigma_plus = 5 on s1, the greedy policy flips to s2.
        let n = 3;
        let mut p = vec![0.0; n * 2 * n];
        let mut r = vec![0.0; n * 2 * n];
        let idx = |s: usize, a: usize, sp: usize| (s * 2 + a) * n + sp;
        p[idx(0, 0, 1)] = 1.0;
        p[idx(0, 1, 2)] = 1.0;
        for a in 0..2 {
            p[idx(1, a, 1)] = 1.0;
            r[idx(1, a, 1)] = 0.6;
            p[idx(2, a, 2)] = 1.0;
            r[idx(2, a, 2)] = 0.5;
        }
        let mdp = DiscreteMdp::new(n, 2, p, r, 0.9, vec![1.0, 0.0, 0.0], vec![]).unwrap();
        let (_, pi_raw) = value_iteration(&mdp, None, 1e-9).unwrap();
        assert_eq!(pi_raw.prob(0, 0), 1.0, "unadjusted policy prefers s1");
        let adj = vec![0.0, -5.0, 0.0];
        let (_, pi_adj) = value_iteration(&mdp, Some(&adj), 1e-9).unwrap();
        assert_eq!(pi_adj.prob(0, 1), 1.0, "penalty drives policy to s2");
        // Oracle: compare both deterministic choices' adjusted returns.
        let to_s1 = TabularPolicy::deterministic(n, 2, &[0, 0, 0]).unwrap();
        let to_s2 = TabularPolicy::deterministic(n, 2, &[1, 0, 0]).unwrap();
        let j1 = expected_adjusted_return(&mdp, &to_s1, &adj).unwrap();
        let j2 = expected_adjusted_return(&mdp, &to_s2, &adj).unwrap();
        assert!(j2 > j1);
    }

    #[test]
    fn vi_residual_bound_holds() {
        let mdp = random_mdp(6, 3, 0.95, 11);
        let tol = 1e-8;
        let (q, _) = value_iteration(&mdp, None, tol).unwrap();
        // Recompute one Bellman application and measure the residual.
        let mut resid = 0.0_f64;
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                let mut val = mdp.expected_reward(s, a);
                for (sp, &p) in mdp.transition_row(s, a).iter().enumerate() {
                    val += mdp.gamma * p * q.max_q(sp);
                }
                resid = resid.max((val - q.q(s, a)).abs());
            }
        }
        assert!(resid <= tol, "residual {resid}");
    }

    #[test]
    fn vi_greedy_beats_all_deterministic_policies() {
        for seed in 0..5 {
            let mdp = random_mdp(4, 2, 0.9, 100 + seed);
            let (_, pi) = value_iteration(&mdp, None, 1e-10).unwrap();
            let j_star = expected_return(&mdp, &pi).unwrap();
            for mask in 0..(1 << 4) {
                let actions: Vec<usize> = (0..4).map(|s| (mask >> s) & 1).collect();
                let cand = TabularPolicy::deterministic(4, 2, &actions).unwrap();
                let j = expected_return(&mdp, &cand).unwrap();
                assert!(
                    j <= j_star + 1e-7,
                    "seed {seed}: policy {actions:?} beats greedy ({j} > {j_star})"
                );
            }
        }
    }

    #[test]
    fn vi_constant_shift_in_both_multipliers_changes_nothing() {
        let mdp = random_mdp(4, 2, 0.9, 42);
        let sp = vec![0.5, 0.0, 1.0, 0.2];
        let sm = vec![0.0, 0.3, 0.1, 0.0];
        let adj: Vec<f64> = sp.iter().zip(&sm).map(|(p, m)| m - p).collect();
        // Adding c to both sides leaves sigma_minus - sigma_plus intact.
        let adj_shifted: Vec<f64> =
            sp.iter().zip(&sm).map(|(p, m)| (m + 7.0) - (p + 7.0)).collect();
        let (_, pi_a) = value_iteration(&mdp, Some(&adj), 1e-10).unwrap();
        let (_, pi_b) = value_iteration(&mdp, Some(&adj_shifted), 1e-10).unwrap();
        assert_eq!(pi_a.probs, pi_b.probs);
    }

    #[test]
    fn softmax_policy_sharpens_with_temperature() {
        let mut q = QTable::zeros(1, 2);
        q.values = vec![1.0, 0.0];
        let warm = q.softmax_tabular(1.0).unwrap();
        let cold = q.softmax_tabular(0.05).unwrap();
        assert!(warm.prob(0, 0) > 0.5 && warm.prob(0, 0) < 0.9);
        assert!(cold.prob(0, 0) > 0.999);
        let greedy = q.softmax_tabular(0.0).unwrap();
        assert_eq!(greedy.prob(0, 0), 1.0);
    }

    fn corridor() -> DiscreteMdp {
        // 3-state corridor: action 1 moves right, action 0 moves left;
        // reaching s2 pays 1 and terminates.
        let n = 3;
        let mut p = vec![0.0; n * 2 * n];
        let mut r = vec![0.0; n * 2 * n];
        let idx = |s: usize, a: usize, sp: usize| (s * 2 + a) * n + sp;
        p[idx(0, 0, 0)] = 1.0;
        p[idx(0, 1, 1)] = 1.0;
        p[idx(1, 0, 0)] = 1.0;
        p[idx(1, 1, 2)] = 1.0;
        r[idx(1, 1, 2)] = 1.0;
        DiscreteMdp::new(n, 2, p, r, 0.9, vec![1.0, 0.0, 0.0], vec![2]).unwrap()
    }

    #[test]
    fn q_learning_matches_value_iteration_on_corridor() {
        let mdp = corridor();
        let config = SolverConfig { episodes: 3000, horizon: 30, seed: 7, ..Default::default() };
        let res = q_learning(&mdp, 3, 2, |_| 0.0, &config, None).unwrap();
        let (_, vi_pi) = value_iteration(&mdp, None, 1e-10).unwrap();
        let learned = res.table.greedy_tabular();
        // Compare on non-terminal states only.
        for s in 0..2 {
            assert_eq!(
                learned.probs[s * 2..(s + 1) * 2],
                vi_pi.probs[s * 2..(s + 1) * 2],
                "state {s}"
            );
        }
        assert!(res.bellman_residual < 0.05, "residual {}", res.bellman_residual);
    }

    #[test]
    fn q_learning_is_deterministic_given_seed() {
        let mdp = corridor();
        let config = SolverConfig { episodes: 500, horizon: 30, seed: 3, ..Default::default() };
        let a = q_learning(&mdp, 3, 2, |_| 0.0, &config, None).unwrap();
        let b = q_learning(&mdp, 3, 2, |_| 0.0, &config, None).unwrap();
        assert_eq!(a.table.values, b.table.values);
        assert_eq!(a.table.visits, b.table.visits);
    }

    #[test]
    fn q_learning_penalty_reduces_hazard_visits() {
        // Two routes to a terminal goal: through hazard s1 (shorter) or
        // safe s2 (longer). A big penalty on s1 should reroute.
        let n = 4;
        let mut p = vec![0.0; n * 2 * n];
        let mut r = vec![0.0; n * 2 * n];
        let idx = |s: usize, a: usize, sp: usize| (s * 2 + a) * n + sp;
        p[idx(0, 0, 1)] = 1.0; // into hazard
        p[idx(0, 1, 2)] = 1.0; // detour
        for a in 0..2 {
            p[idx(1, a, 3)] = 1.0;
            r[idx(1, a, 3)] = 1.0;
            p[idx(2, a, 3)] = 1.0;
            r[idx(2, a, 3)] = 0.8;
        }
        let mdp = DiscreteMdp::new(n, 2, p, r, 0.9, vec![1.0, 0.0, 0.0, 0.0], vec![3]).unwrap();
        let config = SolverConfig { episodes: 2000, horizon: 20, seed: 5, ..Default::default() };
        let base = q_learning(&mdp, n, 2, |_| 0.0, &config, None).unwrap();
        let penal =
            q_learning(&mdp, n, 2, |s| if s == 1 { -5.0 } else { 0.0 }, &config, None).unwrap();
        let dens = |res: &QLearnResult| {
            let pi = res.table.greedy_tabular();
            exact_density(&mdp, &pi).unwrap()[1]
        };
        let d_base = dens(&base);
        let d_pen = dens(&penal);
        assert!(d_pen < d_base, "hazard density {d_pen} !< {d_base}");
        assert_eq!(d_pen, 0.0);
    }

    #[test]
    fn q_learning_visits_are_counted() {
        let mdp = corridor();
        let config = SolverConfig { episodes: 50, horizon: 10, seed: 0, ..Default::default() };
        let res = q_learning(&mdp, 3, 2, |_| 0.0, &config, None).unwrap();
        let total: u64 = res.table.visits.iter().sum();
        assert!(total > 0);
        let csv = res.table.to_csv();
        assert!(csv.starts_with("state,action,q,visits\n"));
        assert_eq!(csv.lines().count(), 1 + 6);
    }

    /// Deterministic scalar linear system x' = a x + b u with quadratic
    /// tracking cost, for exercising the continuous solver.
    struct ScalarLq {
        a: f64,
        b: f64,
        q: f64,
        r: f64,
        gamma: f64,
    }

    impl Env for ScalarLq {
        type State = Vec<f64>;
        type Action = Vec<f64>;
        fn gamma(&self) -> f64 {
            self.gamma
        }
        fn reset(&self, rng: &mut RolloutRng) -> Vec<f64> {
            vec![rng.gen_range(0.5..1.5)]
        }
        fn step(&self, s: &Vec<f64>, u: &Vec<f64>, _rng: &mut RolloutRng) -> (Vec<f64>, f64, bool) {
            let x = s[0];
            let a = u[0];
            let next = self.a * x + self.b * a;
            let reward = -(self.q * x * x + self.r * a * a);
            (vec![next], reward, false)
        }
    }

    impl ContinuousEnv for ScalarLq {
        fn state_dim(&self) -> usize {
            1
        }
        fn action_dim(&self) -> usize {
            1
        }
        fn state_bounds(&self) -> Vec<(f64, f64)> {
            vec![(-10.0, 10.0)]
        }
        fn action_bounds(&self) -> Vec<(f64, f64)> {
            vec![(-10.0, 10.0)]
        }
    }

    /// Discounted scalar Riccati fixed point and optimal gain.
    fn lq_optimal_gain(env: &ScalarLq) -> f64 {
        let (a, b, q, r, g) = (env.a, env.b, env.q, env.r, env.gamma);
        let mut p = q;
        for _ in 0..10_000 {
            let next = q + g * a * a * p - (g * a * b * p).powi(2) / (r + g * b * b * p);
            if (next - p).abs() < 1e-14 {
                p = next;
                break;
            }
            p = next;
        }
        g * a * b * p / (r + g * b * b * p)
    }

    fn mean_cost(env: &ScalarLq, policy: &LinearGaussianPolicy) -> f64 {
        let eps = rollout_batch(env, policy, 64, 120, 77);
        -crate::mdp::estimate_return(&eps, env.gamma)
    }

    #[test]
    fn cem_matches_analytic_lq_gain() {
        let env = ScalarLq { a: 1.0, b: 0.5, q: 1.0, r: 0.1, gamma: 0.9 };
        let config = CemConfig {
            population: 48,
            generations: 30,
            episodes_per_candidate: 4,
            horizon: 120,
            initial_std: 1.0,
            seed: 13,
            ..Default::default()
        };
        let res = cem_search(&env, |_| 0.0, &config, None).unwrap();
        let k = lq_optimal_gain(&env);
        let optimal = LinearGaussianPolicy::new(
            1,
            1,
            vec![-k],
            vec![0.0],
            vec![0.0],
            env.action_bounds(),
        )
        .unwrap();
        let c_opt = mean_cost(&env, &optimal);
        let c_cem = mean_cost(&env, &res.policy);
        assert!(
            c_cem <= 1.10 * c_opt,
            "cem cost {c_cem} vs optimal {c_opt} (gain {k})"
        );
    }

    #[test]
    fn cem_drives_pure_action_penalty_to_zero() {
        // State sits still (a=1, b=0) and only the action is penalized,
        // so the optimum is the zero controller.
        let env = ScalarLq { a: 1.0, b: 0.0, q: 0.0, r: 1.0, gamma: 0.9 };
        let init = vec![2.0, 2.0];
        let config = CemConfig {
            population: 32,
            generations: 30,
            episodes_per_candidate: 4,
            horizon: 40,
            initial_mean: init.clone(),
            // Search scale must cover the distance to the optimum, or the
            // elite variance collapses before the mean gets there.
            initial_std: 2.0,
            seed: 21,
            ..Default::default()
        };
        let res = cem_search(&env, |_| 0.0, &config, None).unwrap();
        let mean_abs_action = |policy: &LinearGaussianPolicy| {
            let eps = rollout_batch(&env, policy, 32, 40, 5);
            let (mut sum, mut count) = (0.0, 0usize);
            for ep in &eps {
                for u in &ep.actions {
                    sum += u[0].abs();
                    count += 1;
                }
            }
            sum / count as f64
        };
        let initial_policy = LinearGaussianPolicy::from_flat(
            1,
            1,
            &init,
            vec![0.0],
            env.action_bounds(),
        )
        .unwrap();
        let a0 = mean_abs_action(&initial_policy);
        let a1 = mean_abs_action(&res.policy);
        assert!(a1 <= 0.1 * a0, "mean |action| {a1} vs initial {a0}");
    }

    #[test]
    fn cem_is_deterministic_given_seed() {
        let env = ScalarLq { a: 1.0, b: 0.5, q: 1.0, r: 0.1, gamma: 0.9 };
        let config = CemConfig {
            population: 16,
            generations: 5,
            episodes_per_candidate: 2,
            horizon: 40,
            seed: 99,
            ..Default::default()
        };
        let a = cem_search(&env, |_| 0.0, &config, None).unwrap();
        let b = cem_search(&env, |_| 0.0, &config, None).unwrap();
        assert_eq!(a.mean_params, b.mean_params);
        assert_eq!(a.elite_mean_returns, b.elite_mean_returns);
    }

    #[test]
    fn cem_rejects_tiny_population() {
        let env = ScalarLq { a: 1.0, b: 0.5, q: 1.0, r: 0.1, gamma: 0.9 };
        let config = CemConfig { population: 3, ..Default::default() };
        assert!(cem_search(&env, |_| 0.0, &config, None).is_err());
    }

}
