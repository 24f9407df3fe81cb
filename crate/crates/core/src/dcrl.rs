//! The outer training loop: alternate an inner policy optimizer on the
//! multiplier-adjusted reward with a projected dual-ascent step on the
//! multiplier fields, until the KKT residuals clear their tolerances.
//! Also here: the scalar-Lagrangian baseline (one multiplier against an
//! expected-cost threshold), the cross-entropy search over multiplier
//! vectors, and the conversion from a density cap to the cost threshold
//! it implies.

use crate::density::{
    ema_blend, kde_density, scott_bandwidth, tabular_density, DensityField, KernelKind,
    KernelSpec, StateQuery,
};
use crate::dual::{
    adjustment_vector, ascend_lower, ascend_upper, eval_multiplier, kkt_check, residual_norm,
    Bound, DensityConstraint, KktReport, MultiplierField, SupportGrid,
};
use crate::mdp::{
    estimate_return, exact_density, horizon_for_tail, rollout_batch, ContinuousEnv, DiscreteMdp,
    ExperienceBuffer, LinearGaussianPolicy, TabularPolicy,
};
use crate::oracle::policy_from_occupancy;
use crate::seeding::mix;
use crate::solvers::{
    cem_search, q_learning, value_iteration, value_iteration_warm, CemConfig, CemState, QTable,
    SolverConfig,
};
use crate::{DcrlError, Result};
use std::time::Instant;

/// Step-size schedule for the dual ascent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaSchedule {
    Constant,
    /// alpha_k = alpha / sqrt(k + 1).
    InvSqrt,
}

impl AlphaSchedule {
    fn step(&self, base: f64, k: usize) -> f64 {
        match self {
            AlphaSchedule::Constant => base,
            AlphaSchedule::InvSqrt => base / ((k + 1) as f64).sqrt(),
        }
    }
}

/// Quadratic smoothing of the inner problem. Subtracting mu/2 * ||rho||^2
/// from the adjusted objective makes the inner optimum unique and the
/// dual function (1/mu)-smooth, which is what lets a constant dual step
/// alpha < 2*mu converge instead of chattering between tied policies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regularization {
    pub mu: f64,
    /// Frank-Wolfe iteration cap for the regularized inner solve.
    pub fw_iters: usize,
}

/// Which optimizer handles the adjusted-reward problem each outer
/// iteration.
#[derive(Debug, Clone)]
pub enum InnerSolver {
    /// Model-based exact solve. With `regularization` set, the solve runs
    /// Frank-Wolfe on the smoothed objective and returns the (generally
    /// randomized) occupancy-derived policy; `temperature` only applies
    /// to the unregularized path.
    ExactVi {
        tol: f64,
        temperature: f64,
        regularization: Option<Regularization>,
    },
    /// Model-free tabular Q-learning; the per-iteration seed is derived
    /// from the outer seed, overriding the one in the config.
    QLearning(SolverConfig),
    /// Cross-entropy search over linear controllers (continuous
    /// environments only).
    Cem(CemConfig),
}

#[derive(Debug, Clone)]
pub struct DcrlConfig {
    pub max_iters: usize,
    /// Base dual step size. With regularization mu, stability wants
    /// alpha < 2*mu.
    pub alpha: f64,
    pub alpha_schedule: AlphaSchedule,
    /// Absolute feasibility tolerance on the density bounds.
    pub tol_feas: f64,
    /// Absolute complementary-slackness tolerance.
    pub tol_cs: f64,
    /// Truncation tail: episodes run to the horizon where the discarded
    /// discounted mass is at most this.
    pub tail_bound: f64,
    /// Evaluation episodes per outer iteration (the density estimate's N).
    pub episodes_per_iter: usize,
    /// Exponential smoothing of the density estimate across iterations;
    /// this is the weight on history (0 disables smoothing).
    pub density_ema: f64,
    pub inner: InnerSolver,
    pub seed: u64,
    /// Hard multiplier ceiling; crossing it is diagnosed as infeasibility.
    pub sigma_cap: f64,
    /// Window length for the stagnation-based infeasibility diagnosis.
    pub diagnosis_window: usize,
    /// Keep the per-iteration multiplier pair in the result (cheap on
    /// desk-scale problems, and what the dual-objective audits read).
    pub record_trail: bool,
    /// Sample cap for the blended KDE density (continuous runs only).
    pub kde_sample_cap: usize,
    pub kde_kernel: KernelKind,
    /// Fixed per-dimension bandwidth; when empty, Scott's rule on the
    /// first iteration's samples decides, and that choice is held for the
    /// rest of the run (blending requires identical kernels).
    pub kde_bandwidth: Vec<f64>,
}

impl Default for DcrlConfig {
    fn default() -> Self {
        DcrlConfig {
            max_iters: 200,
            // The ascent, the density smoothing, and the regularized
            // inner response (d rho / d sigma is on the order of 1/mu)
            // form a feedback loop; these values keep its poles well
            // inside the unit circle so the multipliers settle instead
            // of ringing.
            alpha: 0.01,
            alpha_schedule: AlphaSchedule::Constant,
            tol_feas: 1e-2,
            tol_cs: 2e-2,
            tail_bound: 1e-3,
            episodes_per_iter: 4000,
            density_ema: 0.5,
            inner: InnerSolver::ExactVi {
                tol: 1e-9,
                temperature: 0.0,
                regularization: Some(Regularization { mu: 0.05, fw_iters: 120 }),
            },
            seed: 0,
            sigma_cap: 1e4,
            diagnosis_window: 50,
            record_trail: true,
            kde_sample_cap: 20_000,
            kde_kernel: KernelKind::Gaussian,
            kde_bandwidth: Vec::new(),
        }
    }
}

impl DcrlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(DcrlError::invalid_argument("max_iters must be >= 1"));
        }
        if self.episodes_per_iter == 0 {
            return Err(DcrlError::invalid_argument("episodes_per_iter must be >= 1"));
        }
        if !(self.alpha > 0.0) {
            return Err(DcrlError::invalid_argument("alpha must be positive"));
        }
        if !(self.tol_feas > 0.0) || !(self.tol_cs > 0.0) {
            return Err(DcrlError::invalid_argument("tolerances must be positive"));
        }
        if !(self.tail_bound > 0.0) {
            return Err(DcrlError::invalid_argument("tail bound must be positive"));
        }
        if !(0.0..1.0).contains(&self.density_ema) {
            return Err(DcrlError::invalid_argument(
                "density smoothing weight must be in [0, 1)",
            ));
        }
        if !(self.sigma_cap > 0.0) {
            return Err(DcrlError::invalid_argument("sigma cap must be positive"));
        }
        if self.diagnosis_window < 2 {
            return Err(DcrlError::invalid_argument("diagnosis window must be >= 2"));
        }
        if self.kde_sample_cap == 0 {
            return Err(DcrlError::invalid_argument("KDE sample cap must be >= 1"));
        }
        match &self.inner {
            InnerSolver::ExactVi { tol, temperature, regularization } => {
                if !(*tol > 0.0) {
                    return Err(DcrlError::invalid_argument(
                        "value-iteration tolerance must be positive",
                    ));
                }
                if *temperature < 0.0 {
                    return Err(DcrlError::invalid_argument("temperature must be >= 0"));
                }
                if let Some(reg) = regularization {
                    if !(reg.mu > 0.0) {
                        return Err(DcrlError::invalid_argument(
                            "regularizer weight must be positive",
                        ));
                    }
                    if reg.fw_iters == 0 {
                        return Err(DcrlError::invalid_argument(
                            "Frank-Wolfe iteration cap must be >= 1",
                        ));
                    }
                }
            }
            InnerSolver::QLearning(cfg) => cfg.validate()?,
            InnerSolver::Cem(cfg) => cfg.validate()?,
        }
        Ok(())
    }
}

/// One outer iteration's worth of diagnostics. `sigma_plus_max` and
/// `sigma_minus_max` are the multipliers the iteration's policy was
/// trained against (pre-ascent); `g_norm` is the alpha-normalized
/// multiplier change produced by the iteration's ascent step.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    pub j_hat: f64,
    pub feas_violation: f64,
    pub cs_upper: f64,
    pub cs_lower: f64,
    pub g_norm: f64,
    pub sigma_plus_max: f64,
    pub sigma_minus_max: f64,
    /// Inner-solver suboptimality proxy: the Frank-Wolfe gap, the
    /// realized Bellman residual, or the CEM elite spread.
    pub inner_residual: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    KktSatisfied,
    MaxIters,
    InfeasibleDiagnosis,
}

/// Final state of a run. The stored density and multipliers are the ones
/// the final KKT report was computed from, so re-running the check on
/// them reproduces `kkt.satisfied`.
#[derive(Debug, Clone)]
pub struct DcrlResult<P> {
    pub policy: P,
    pub density: DensityField,
    pub sigma_plus: MultiplierField,
    pub sigma_minus: MultiplierField,
    pub kkt: KktReport,
    pub iterations: Vec<IterationRecord>,
    pub termination: Termination,
    /// Pre-ascent multiplier pair per iteration (empty unless
    /// `record_trail`).
    pub sigma_trail: Vec<(MultiplierField, MultiplierField)>,
}

/// Metrics CSV for a run. Wall-clock per iteration is deliberately kept
/// out of this file (it lives in [`timing_csv`]) so that two runs with
/// the same config and seed produce byte-identical metrics.
pub fn metrics_csv(records: &[IterationRecord]) -> String {
    let mut out =
        String::from("k,J_hat,feas_violation,cs_upper,cs_lower,g_norm,sigma_plus_max,sigma_minus_max\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.k,
            r.j_hat,
            r.feas_violation,
            r.cs_upper,
            r.cs_lower,
            r.g_norm,
            r.sigma_plus_max,
            r.sigma_minus_max
        ));
    }
    out
}

pub fn timing_csv(records: &[IterationRecord]) -> String {
    let mut out = String::from("k,wall_ms\n");
    for r in records {
        out.push_str(&format!("{},{}\n", r.k, r.wall_ms));
    }
    out
}

/// Regularized inner solve by Frank-Wolfe over the occupancy polytope:
///
///   maximize  sum_{s,a} (r(s,a) + adj(s)) x(s,a)
///               - mu/2 * sum_s (sum_a x(s,a))^2     (non-terminal s)
///
/// The linear oracle is exact value iteration with a per-state offset
/// adj(s) - mu * rho(s); its greedy occupancy is a polytope vertex, and
/// the gap <grad, vertex - x> certifies suboptimality. Terminal states
/// carry their arrival mass but contribute neither objective nor
/// regularizer, matching the convention that no action (and hence no
/// reward adjustment) happens there.
#[derive(Debug, Clone)]
pub struct FwSolution {
    /// Occupancy x(s,a), row-major.
    pub occupancy: Vec<f64>,
    /// Regularized adjusted objective at `occupancy`.
    pub objective: f64,
    /// Final Frank-Wolfe gap (upper-bounds the remaining suboptimality).
    pub gap: f64,
    pub iterations: usize,
}

/// `warm_start` seeds the iterate from a previous occupancy; `warm_q`
/// carries the linear oracle's value table across calls, which matters
/// at discount factors near one where every cold solve costs thousands
/// of sweeps.
pub fn fw_regularized(
    mdp: &DiscreteMdp,
    adjustment: &[f64],
    mu: f64,
    max_iters: usize,
    vi_tol: f64,
    warm_start: Option<&[f64]>,
    warm_q: &mut Option<QTable>,
) -> Result<FwSolution> {
    if !(mu > 0.0) {
        return Err(DcrlError::invalid_argument("regularizer weight must be positive"));
    }
    if adjustment.len() != mdp.n_states {
        return Err(DcrlError::invalid_argument(
            "adjustment length does not match state count",
        ));
    }
    let n = mdp.n_states;
    let na = mdp.n_actions;

    let occupancy_of = |pi: &TabularPolicy| -> Result<Vec<f64>> {
        let rho = exact_density(mdp, pi)?;
        let mut x = vec![0.0; n * na];
        for s in 0..n {
            for a in 0..na {
                x[s * na + a] = rho[s] * pi.prob(s, a);
            }
        }
        Ok(x)
    };

    let mut x = match warm_start {
        Some(w) if w.len() == n * na => w.to_vec(),
        _ => {
            let (q, pi) = value_iteration_warm(mdp, Some(adjustment), vi_tol, warm_q.as_ref())?;
            let occ = occupancy_of(&pi)?;
            *warm_q = Some(q);
            occ
        }
    };

    let state_density = |x: &[f64]| -> Vec<f64> {
        (0..n).map(|s| x[s * na..(s + 1) * na].iter().sum()).collect()
    };
    let objective_at = |x: &[f64], rho: &[f64]| -> f64 {
        let mut f = 0.0;
        for s in 0..n {
            if mdp.is_terminal(s) {
                continue;
            }
            for a in 0..na {
                f += (mdp.expected_reward(s, a) + adjustment[s]) * x[s * na + a];
            }
            f -= 0.5 * mu * rho[s] * rho[s];
        }
        f
    };

    let mut gap = f64::INFINITY;
    let mut iters = 0;
    for t in 0..max_iters {
        iters = t + 1;
        let rho = state_density(&x);
        let offset: Vec<f64> = (0..n).map(|s| adjustment[s] - mu * rho[s]).collect();
        let (q, pi) = value_iteration_warm(mdp, Some(&offset), vi_tol, warm_q.as_ref())?;
        *warm_q = Some(q);
        let vertex = occupancy_of(&pi)?;
        // <grad, vertex - x>; terminal entries have zero gradient.
        gap = 0.0;
        let mut rho_d_sq = 0.0;
        for s in 0..n {
            if mdp.is_terminal(s) {
                continue;
            }
            let mut rho_d = 0.0;
            for a in 0..na {
                let g = mdp.expected_reward(s, a) + offset[s];
                let d = vertex[s * na + a] - x[s * na + a];
                gap += g * d;
                rho_d += d;
            }
            rho_d_sq += rho_d * rho_d;
        }
        let f = objective_at(&x, &rho);
        if gap <= 1e-8 * (1.0 + f.abs()) {
            gap = gap.max(0.0);
            break;
        }
        // Exact line search: F(x + theta*d) is quadratic in theta with
        // slope `gap` at 0 and curvature -mu * ||rho_d||^2.
        let theta = if mu * rho_d_sq > 0.0 {
            (gap / (mu * rho_d_sq)).clamp(0.0, 1.0)
        } else {
            1.0
        };
        for i in 0..n * na {
            x[i] += theta * (vertex[i] - x[i]);
        }
    }
    let rho = state_density(&x);
    let objective = objective_at(&x, &rho);
    Ok(FwSolution { occupancy: x, objective, gap, iterations: iters })
}

/// Regularized dual objective d_mu(sigma): the smoothed inner optimum at
/// the adjusted reward, plus the bound terms sum sigma_plus * rho_max -
/// sum sigma_minus * rho_min. Only meaningful when every positive
/// multiplier sits on a finite bound (a positive price against an
/// infinite bound makes the dual infinite).
pub fn regularized_dual_objective(
    mdp: &DiscreteMdp,
    constraint: &DensityConstraint,
    sigma_plus: &[f64],
    sigma_minus: &[f64],
    mu: f64,
    fw_iters: usize,
) -> Result<f64> {
    if sigma_plus.len() != mdp.n_states || sigma_minus.len() != mdp.n_states {
        return Err(DcrlError::invalid_argument(
            "multiplier length does not match state count",
        ));
    }
    let adjustment: Vec<f64> =
        sigma_plus.iter().zip(sigma_minus).map(|(p, m)| m - p).collect();
    let fw = fw_regularized(mdp, &adjustment, mu, fw_iters, 1e-10, None, &mut None)?;
    let mut bound_terms = 0.0;
    for s in 0..mdp.n_states {
        if sigma_plus[s] > 1e-12 {
            let up = constraint.upper.at_id(s)?;
            if !up.is_finite() {
                return Err(DcrlError::invalid_argument(format!(
                    "positive upper multiplier on state {s}, which has no finite upper bound"
                )));
            }
            bound_terms += sigma_plus[s] * up;
        }
        if sigma_minus[s] > 1e-12 {
            bound_terms -= sigma_minus[s] * constraint.lower.at_id(s)?;
        }
    }
    Ok(fw.objective + bound_terms)
}

fn check_discrete_constraint(mdp: &DiscreteMdp, constraint: &DensityConstraint) -> Result<()> {
    for bound in [&constraint.lower, &constraint.upper] {
        match bound {
            Bound::Uniform(_) => {}
            Bound::PerState(v) => {
                if v.len() != mdp.n_states {
                    return Err(DcrlError::invalid_argument(format!(
                        "bound covers {} states, environment has {}",
                        v.len(),
                        mdp.n_states
                    )));
                }
            }
            Bound::HalfSpace { .. } => {
                return Err(DcrlError::invalid_argument(
                    "half-space bounds apply to continuous state spaces",
                ));
            }
        }
    }
    // No action is taken at a terminal state, so a reward adjustment
    // cannot price its density; bounds there are unenforceable. Constrain
    // the states leading into the terminal instead.
    for &s in &mdp.terminal_states {
        if constraint.lower.at_id(s)? > 0.0 || constraint.upper.at_id(s)?.is_finite() {
            return Err(DcrlError::invalid_argument(format!(
                "state {s} is terminal; density bounds there cannot be enforced through \
                 reward adjustment"
            )));
        }
    }
    Ok(())
}

/// Scratch state the discrete inner solvers carry between outer
/// iterations: warm starts shrink the inner work dramatically once the
/// multipliers settle.
#[derive(Default)]
struct DiscreteInnerState {
    warm_q: Option<QTable>,
    warm_occupancy: Option<Vec<f64>>,
}

fn inner_solve_discrete(
    mdp: &DiscreteMdp,
    adjustment: &[f64],
    inner: &InnerSolver,
    outer_seed: u64,
    k: usize,
    state: &mut DiscreteInnerState,
) -> Result<(TabularPolicy, f64)> {
    match inner {
        InnerSolver::ExactVi { tol, temperature, regularization: None } => {
            let (table, _) =
                value_iteration_warm(mdp, Some(adjustment), *tol, state.warm_q.as_ref())?;
            let policy = table.softmax_tabular(*temperature)?;
            state.warm_q = Some(table);
            Ok((policy, *tol))
        }
        InnerSolver::ExactVi { tol, regularization: Some(reg), .. } => {
            let fw = fw_regularized(
                mdp,
                adjustment,
                reg.mu,
                reg.fw_iters,
                *tol,
                state.warm_occupancy.as_deref(),
                &mut state.warm_q,
            )?;
            let policy = policy_from_occupancy(&fw.occupancy, mdp.n_states, mdp.n_actions)?;
            state.warm_occupancy = Some(fw.occupancy);
            Ok((policy, fw.gap))
        }
        InnerSolver::QLearning(cfg) => {
            let mut cfg = cfg.clone();
            cfg.seed = mix(outer_seed, 9000 + k as u64);
            let res = q_learning(
                mdp,
                mdp.n_states,
                mdp.n_actions,
                |s| adjustment[s],
                &cfg,
                state.warm_q.take(),
            )?;
            let policy = res.table.greedy_tabular();
            state.warm_q = Some(res.table);
            Ok((policy, res.bellman_residual))
        }
        InnerSolver::Cem(_) => Err(DcrlError::invalid_argument(
            "cross-entropy inner solver needs a continuous environment; use the continuous runner",
        )),
    }
}

/// Evaluates the stagnation heuristic over the last `window` records:
/// every violation well above tolerance, no halving across the window,
/// and the multiplier ceiling strictly rising each step — but only once
/// the price itself clears `sigma_floor`. Below that floor a flat
/// violation can simply mean the ascent has not yet out-bid the reward
/// for occupying the state; above it, one unit of density at the priced
/// state is worth more than any reward difference two policies can have
/// (callers pass reward span / (1 - gamma)), so a violation that still
/// will not move is one the dynamics cannot move.
fn diagnose_infeasible(
    records: &[IterationRecord],
    window: usize,
    tol_feas: f64,
    sigma_floor: f64,
) -> bool {
    if records.len() < window {
        return false;
    }
    let tail = &records[records.len() - window..];
    let last = &tail[window - 1];
    if last.sigma_plus_max.max(last.sigma_minus_max) < sigma_floor {
        return false;
    }
    if !tail.iter().all(|r| r.feas_violation > 2.0 * tol_feas) {
        return false;
    }
    if last.feas_violation <= 0.5 * tail[0].feas_violation {
        return false;
    }
    tail.windows(2).all(|w| {
        w[1].sigma_plus_max.max(w[1].sigma_minus_max)
            > w[0].sigma_plus_max.max(w[0].sigma_minus_max)
    })
}

/// Largest value-per-unit-density any policy can extract: the spread of
/// expected one-step rewards over non-terminal state-actions, amortized
/// over the discounted horizon.
fn discrete_price_scale(mdp: &DiscreteMdp) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in 0..mdp.n_states {
        if mdp.terminal_states.contains(&s) {
            continue;
        }
        for a in 0..mdp.n_actions {
            let r = mdp.expected_reward(s, a);
            lo = lo.min(r);
            hi = hi.max(r);
        }
    }
    if lo.is_finite() && hi.is_finite() {
        (hi - lo) / (1.0 - mdp.gamma)
    } else {
        0.0
    }
}

/// The main loop on a discrete environment. Each iteration trains a
/// policy against the current multipliers, measures its density from
/// fresh evaluation rollouts (the model is never consulted for the
/// ascent, only the simulator), checks the KKT residuals, and takes one
/// projected ascent step. Deterministic given the config seed.
pub fn run_dcrl_discrete(
    mdp: &DiscreteMdp,
    constraint: &DensityConstraint,
    config: &DcrlConfig,
) -> Result<DcrlResult<TabularPolicy>> {
    config.validate()?;
    check_discrete_constraint(mdp, constraint)?;
    let n = mdp.n_states;
    let horizon = mdp.horizon_for_tail(config.tail_bound);
    let price_scale = discrete_price_scale(mdp);

    let mut sigma_plus = MultiplierField::zeros_tabular(n);
    let mut sigma_minus = MultiplierField::zeros_tabular(n);
    let mut inner_state = DiscreteInnerState::default();
    let mut smoothed: Option<DensityField> = None;
    let mut records = Vec::new();
    let mut trail = Vec::new();

    for k in 0..config.max_iters {
        let started = Instant::now();
        let adjustment = adjustment_vector(&sigma_plus, &sigma_minus)?;
        let (policy, inner_residual) =
            inner_solve_discrete(mdp, &adjustment, &config.inner, config.seed, k, &mut inner_state)?;

        let episodes = rollout_batch(
            mdp,
            &policy,
            config.episodes_per_iter,
            horizon,
            mix(config.seed, 2000 + k as u64),
        );
        let j_hat = estimate_return(&episodes, mdp.gamma);
        let raw = tabular_density(&ExperienceBuffer::from_episodes(episodes), mdp.gamma, n)?;
        let rho = match &smoothed {
            Some(prev) => ema_blend(prev, &raw, config.density_ema)?,
            None => raw,
        };
        smoothed = Some(rho.clone());

        let report = kkt_check(
            &rho,
            constraint,
            &sigma_plus,
            &sigma_minus,
            config.tol_feas,
            config.tol_cs,
        )?;
        let alpha_k = config.alpha_schedule.step(config.alpha, k);
        let sp_next = ascend_upper(&sigma_plus, &rho, &constraint.upper, alpha_k)?;
        let sm_next = ascend_lower(&sigma_minus, &rho, &constraint.lower, alpha_k)?;
        let g_norm = (residual_norm(&sigma_plus, &sp_next, alpha_k)?.powi(2)
            + residual_norm(&sigma_minus, &sm_next, alpha_k)?.powi(2))
        .sqrt();

        records.push(IterationRecord {
            k,
            j_hat,
            feas_violation: report.feasibility_violation,
            cs_upper: report.comp_slack_upper,
            cs_lower: report.comp_slack_lower,
            g_norm,
            sigma_plus_max: sigma_plus.max_value(),
            sigma_minus_max: sigma_minus.max_value(),
            inner_residual,
            wall_ms: started.elapsed().as_millis() as u64,
        });
        if config.record_trail {
            trail.push((sigma_plus.clone(), sigma_minus.clone()));
        }

        if report.satisfied {
            return Ok(DcrlResult {
                policy,
                density: rho,
                sigma_plus,
                sigma_minus,
                kkt: report,
                iterations: records,
                termination: Termination::KktSatisfied,
                sigma_trail: trail,
            });
        }

        sigma_plus = sp_next;
        sigma_minus = sm_next;

        let blown_up = sigma_plus.max_value().max(sigma_minus.max_value()) > config.sigma_cap;
        if blown_up
            || diagnose_infeasible(&records, config.diagnosis_window, config.tol_feas, price_scale)
        {
            return Ok(DcrlResult {
                policy,
                density: rho,
                sigma_plus,
                sigma_minus,
                kkt: report,
                iterations: records,
                termination: Termination::InfeasibleDiagnosis,
                sigma_trail: trail,
            });
        }

        if k + 1 == config.max_iters {
            return Ok(DcrlResult {
                policy,
                density: rho,
                sigma_plus,
                sigma_minus,
                kkt: report,
                iterations: records,
                termination: Termination::MaxIters,
                sigma_trail: trail,
            });
        }
    }
    unreachable!("loop always returns by the final iteration");
}

/// The main loop on a continuous environment: multipliers live on a
/// support grid and are read back by multilinear interpolation, the
/// inner solver is cross-entropy search, and the density is a kernel
/// estimate over evaluation rollouts of the deterministic mean policy.
pub fn run_dcrl_continuous<E>(
    env: &E,
    constraint: &DensityConstraint,
    grid: &SupportGrid,
    config: &DcrlConfig,
) -> Result<DcrlResult<LinearGaussianPolicy>>
where
    E: ContinuousEnv + Sync,
{
    config.validate()?;
    let cem_cfg = match &config.inner {
        InnerSolver::Cem(cfg) => cfg.clone(),
        _ => {
            return Err(DcrlError::invalid_argument(
                "continuous runs need the cross-entropy inner solver",
            ))
        }
    };
    if grid.dim() != env.state_dim() {
        return Err(DcrlError::invalid_argument(format!(
            "support grid has dimension {}, environment states have {}",
            grid.dim(),
            env.state_dim()
        )));
    }
    // Bounds must be evaluable at coordinate states; probing one support
    // point surfaces shape errors before the loop starts.
    let probe = grid.point(0);
    constraint.lower.at_point(&probe)?;
    constraint.upper.at_point(&probe)?;

    let horizon = horizon_for_tail(env.gamma(), config.tail_bound);
    let mut sigma_plus = MultiplierField::zeros_sampled(grid.clone());
    let mut sigma_minus = MultiplierField::zeros_sampled(grid.clone());
    // No model to read a reward scale from; grow it from observed steps.
    let mut reward_span = (f64::INFINITY, f64::NEG_INFINITY);
    let mut warm: Option<CemState> = None;
    let mut kernel: Option<KernelSpec> = if config.kde_bandwidth.is_empty() {
        None
    } else {
        Some(KernelSpec::new(config.kde_kernel, config.kde_bandwidth.clone())?)
    };
    let mut smoothed: Option<DensityField> = None;
    let mut records = Vec::new();
    let mut trail = Vec::new();

    for k in 0..config.max_iters {
        let started = Instant::now();
        let adjust = {
            let sp = &sigma_plus;
            let sm = &sigma_minus;
            move |x: &[f64]| {
                // Dimensions were validated against the grid above.
                eval_multiplier(sm, StateQuery::Point(x)).expect("validated field")
                    - eval_multiplier(sp, StateQuery::Point(x)).expect("validated field")
            }
        };
        let mut inner_cfg = cem_cfg.clone();
        inner_cfg.seed = mix(config.seed, 500 + k as u64);
        let cem = cem_search(env, adjust, &inner_cfg, warm.take())?;
        // Refresh the search spread on each warm start: the elites
        // collapse it within a run, and a collapsed distribution cannot
        // react when the multipliers move.
        warm = Some(CemState {
            mean: cem.mean_params.clone(),
            std: cem
                .param_std
                .iter()
                .map(|s| s.max(0.25 * cem_cfg.initial_std))
                .collect(),
        });
        let policy = cem.policy;

        let episodes = rollout_batch(
            env,
            &policy,
            config.episodes_per_iter,
            horizon,
            mix(config.seed, 2000 + k as u64),
        );
        let j_hat = estimate_return(&episodes, env.gamma());
        for ep in &episodes {
            for &r in &ep.rewards {
                reward_span.0 = reward_span.0.min(r);
                reward_span.1 = reward_span.1.max(r);
            }
        }
        let price_scale = if reward_span.0.is_finite() {
            (reward_span.1 - reward_span.0) / (1.0 - env.gamma())
        } else {
            0.0
        };
        let buffer = ExperienceBuffer::from_episodes(episodes);
        let spec = match &kernel {
            Some(spec) => spec.clone(),
            None => {
                let points: Vec<Vec<f64>> =
                    buffer.weighted_states(env.gamma()).map(|(s, _)| s.clone()).collect();
                let spec = KernelSpec::new(config.kde_kernel, scott_bandwidth(&points)?)?;
                kernel = Some(spec.clone());
                spec
            }
        };
        let raw = kde_density(&buffer, env.gamma(), spec)?;
        let blended = match &smoothed {
            Some(prev) => ema_blend(prev, &raw, config.density_ema)?,
            None => raw,
        };
        // Blending concatenates sample sets; cap the growth so iteration
        // cost stays flat.
        let rho = match blended {
            DensityField::KernelSampled(f) => {
                DensityField::KernelSampled(f.thin_to(config.kde_sample_cap)?)
            }
            other => other,
        };
        smoothed = Some(rho.clone());

        let report = kkt_check(
            &rho,
            constraint,
            &sigma_plus,
            &sigma_minus,
            config.tol_feas,
            config.tol_cs,
        )?;
        let alpha_k = config.alpha_schedule.step(config.alpha, k);
        let sp_next = ascend_upper(&sigma_plus, &rho, &constraint.upper, alpha_k)?;
        let sm_next = ascend_lower(&sigma_minus, &rho, &constraint.lower, alpha_k)?;
        let g_norm = (residual_norm(&sigma_plus, &sp_next, alpha_k)?.powi(2)
            + residual_norm(&sigma_minus, &sm_next, alpha_k)?.powi(2))
        .sqrt();

        records.push(IterationRecord {
            k,
            j_hat,
            feas_violation: report.feasibility_violation,
            cs_upper: report.comp_slack_upper,
            cs_lower: report.comp_slack_lower,
            g_norm,
            sigma_plus_max: sigma_plus.max_value(),
            sigma_minus_max: sigma_minus.max_value(),
            inner_residual: cem.elite_spread,
            wall_ms: started.elapsed().as_millis() as u64,
        });
        if config.record_trail {
            trail.push((sigma_plus.clone(), sigma_minus.clone()));
        }

        if report.satisfied {
            return Ok(DcrlResult {
                policy,
                density: rho,
                sigma_plus,
                sigma_minus,
                kkt: report,
                iterations: records,
                termination: Termination::KktSatisfied,
                sigma_trail: trail,
            });
        }

        sigma_plus = sp_next;
        sigma_minus = sm_next;

        let blown_up = sigma_plus.max_value().max(sigma_minus.max_value()) > config.sigma_cap;
        if blown_up
            || diagnose_infeasible(&records, config.diagnosis_window, config.tol_feas, price_scale)
        {
            return Ok(DcrlResult {
                policy,
                density: rho,
                sigma_plus,
                sigma_minus,
                kkt: report,
                iterations: records,
                termination: Termination::InfeasibleDiagnosis,
                sigma_trail: trail,
            });
        }

        if k + 1 == config.max_iters {
            return Ok(DcrlResult {
                policy,
                density: rho,
                sigma_plus,
                sigma_minus,
                kkt: report,
                iterations: records,
                termination: Termination::MaxIters,
                sigma_trail: trail,
            });
        }
    }
    unreachable!("loop always returns by the final iteration");
}

/// Scalar-Lagrangian baseline: constrain the expected discounted cost
/// sum_s rho(s) c(s) below `eta` with a single multiplier lambda, trained
/// on reward - lambda * cost. Reported in the same shape as the density
/// runs: the per-iteration `feas_violation` column carries the estimated
/// cost value itself, and the final upper multiplier field is the
/// equivalent per-state price lambda * c(s).
pub fn run_rcpo(
    mdp: &DiscreteMdp,
    cost: &[f64],
    eta: f64,
    config: &DcrlConfig,
) -> Result<DcrlResult<TabularPolicy>> {
    config.validate()?;
    if cost.len() != mdp.n_states {
        return Err(DcrlError::invalid_argument(
            "cost length does not match state count",
        ));
    }
    if cost.iter().any(|&c| c < 0.0) {
        return Err(DcrlError::invalid_argument("costs must be nonnegative"));
    }
    if !(eta >= 0.0) {
        return Err(DcrlError::invalid_argument("threshold must be nonnegative"));
    }
    let n = mdp.n_states;
    let horizon = mdp.horizon_for_tail(config.tail_bound);
    let mut lambda = 0.0_f64;
    let mut inner_state = DiscreteInnerState::default();
    let mut smoothed: Option<DensityField> = None;
    let mut records = Vec::new();
    let mut trail = Vec::new();

    let package = |policy: TabularPolicy,
                   rho: DensityField,
                   lambda: f64,
                   j_cost: f64,
                   satisfied: bool,
                   records: Vec<IterationRecord>,
                   trail: Vec<(MultiplierField, MultiplierField)>,
                   termination: Termination| {
        let sigma_plus =
            MultiplierField::Tabular(cost.iter().map(|&c| lambda * c).collect());
        let sigma_minus = MultiplierField::zeros_tabular(n);
        let kkt = KktReport {
            feasibility_violation: (j_cost - eta).max(0.0),
            comp_slack_upper: if lambda > 0.0 { lambda * (j_cost - eta).abs() } else { 0.0 },
            comp_slack_lower: 0.0,
            satisfied,
        };
        DcrlResult {
            policy,
            density: rho,
            sigma_plus,
            sigma_minus,
            kkt,
            iterations: records,
            termination,
            sigma_trail: trail,
        }
    };

    for k in 0..config.max_iters {
        let started = Instant::now();
        let adjustment: Vec<f64> = cost.iter().map(|&c| -lambda * c).collect();
        let (policy, inner_residual) =
            inner_solve_discrete(mdp, &adjustment, &config.inner, config.seed, k, &mut inner_state)?;

        let episodes = rollout_batch(
            mdp,
            &policy,
            config.episodes_per_iter,
            horizon,
            mix(config.seed, 2000 + k as u64),
        );
        let j_hat = estimate_return(&episodes, mdp.gamma);
        let raw = tabular_density(&ExperienceBuffer::from_episodes(episodes), mdp.gamma, n)?;
        let rho = match &smoothed {
            Some(prev) => ema_blend(prev, &raw, config.density_ema)?,
            None => raw,
        };
        smoothed = Some(rho.clone());
        let rho_vals = match &rho {
            DensityField::Tabular(v) => v.clone(),
            _ => unreachable!("tabular estimator"),
        };
        let j_cost: f64 = rho_vals.iter().zip(cost).map(|(r, c)| r * c).sum();

        let satisfied = (j_cost - eta).max(0.0) <= config.tol_feas
            && (if lambda > 0.0 { lambda * (j_cost - eta).abs() } else { 0.0 })
                <= config.tol_cs;
        let alpha_k = config.alpha_schedule.step(config.alpha, k);
        let lambda_next = (lambda + alpha_k * (j_cost - eta)).max(0.0);

        records.push(IterationRecord {
            k,
            j_hat,
            feas_violation: j_cost,
            cs_upper: if lambda > 0.0 { lambda * (j_cost - eta).abs() } else { 0.0 },
            cs_lower: 0.0,
            g_norm: (lambda_next - lambda).abs() / alpha_k,
            sigma_plus_max: lambda,
            sigma_minus_max: 0.0,
            inner_residual,
            wall_ms: started.elapsed().as_millis() as u64,
        });
        if config.record_trail {
            trail.push((
                MultiplierField::Tabular(cost.iter().map(|&c| lambda * c).collect()),
                MultiplierField::zeros_tabular(n),
            ));
        }

        if satisfied {
            return Ok(package(
                policy,
                rho,
                lambda,
                j_cost,
                true,
                records,
                trail,
                Termination::KktSatisfied,
            ));
        }
        lambda = lambda_next;
        if lambda > config.sigma_cap {
            return Ok(package(
                policy,
                rho,
                lambda,
                j_cost,
                false,
                records,
                trail,
                Termination::InfeasibleDiagnosis,
            ));
        }
        if k + 1 == config.max_iters {
            return Ok(package(
                policy,
                rho,
                lambda,
                j_cost,
                false,
                records,
                trail,
                Termination::MaxIters,
            ));
        }
    }
    unreachable!("loop always returns by the final iteration");
}

/// Cross-entropy search over multiplier vectors: sample candidate
/// multiplier sets from a diagonal Gaussian, train a policy per
/// candidate, rank by total constraint violation, refit on the elites,
/// and stop at the first fully feasible policy or when the budget runs
/// out.
#[derive(Debug, Clone)]
pub struct CersConfig {
    pub population: usize,
    pub elite_fraction: f64,
    pub generations: usize,
    /// Initial standard deviation of the multiplier sampling distribution.
    pub sigma_init_scale: f64,
    /// Evaluation episodes per candidate (the density estimate each
    /// candidate is judged on).
    pub episodes_per_candidate: usize,
    pub tail_bound: f64,
    /// A candidate counts as feasible when its max violation is at most
    /// this.
    pub tol_feas: f64,
    /// Value-iteration tolerance for candidate training.
    pub inner_tol: f64,
    /// Softmax temperature of the trained candidate policies; 0 = greedy.
    pub temperature: f64,
    /// Wall-clock budget; None disables the timeout (run all
    /// generations). Checked between candidate evaluations.
    pub budget_ms: Option<u64>,
    pub seed: u64,
}

impl Default for CersConfig {
    fn default() -> Self {
        CersConfig {
            population: 16,
            elite_fraction: 0.2,
            generations: 30,
            sigma_init_scale: 1.0,
            episodes_per_candidate: 1000,
            tail_bound: 1e-3,
            tol_feas: 1e-2,
            inner_tol: 1e-9,
            temperature: 0.0,
            budget_ms: None,
            seed: 0,
        }
    }
}

impl CersConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 4 {
            return Err(DcrlError::invalid_argument("population must be at least 4"));
        }
        if !(self.elite_fraction > 0.0 && self.elite_fraction < 1.0) {
            return Err(DcrlError::invalid_argument("elite fraction must be in (0, 1)"));
        }
        if self.generations == 0 || self.episodes_per_candidate == 0 {
            return Err(DcrlError::invalid_argument(
                "generations and episodes per candidate must be >= 1",
            ));
        }
        if !(self.sigma_init_scale > 0.0) {
            return Err(DcrlError::invalid_argument("initial scale must be positive"));
        }
        if !(self.tol_feas > 0.0) || !(self.inner_tol > 0.0) || !(self.tail_bound > 0.0) {
            return Err(DcrlError::invalid_argument("tolerances must be positive"));
        }
        if self.temperature < 0.0 {
            return Err(DcrlError::invalid_argument("temperature must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CersResult {
    /// Best policy seen (the first feasible one when `feasible`).
    pub policy: Option<TabularPolicy>,
    pub feasible: bool,
    pub timed_out: bool,
    pub generations_used: usize,
    pub candidates_evaluated: usize,
    pub wall_ms: u64,
    /// Max violation of the best candidate seen.
    pub best_violation: f64,
}

pub fn run_cers(
    mdp: &DiscreteMdp,
    constraint: &DensityConstraint,
    config: &CersConfig,
) -> Result<CersResult> {
    config.validate()?;
    check_discrete_constraint(mdp, constraint)?;
    let n = mdp.n_states;
    let horizon = mdp.horizon_for_tail(config.tail_bound);
    let started = Instant::now();

    // One search dimension per constrained entry: upper-bounded states
    // first, then lower-bounded ones. Unconstrained states need no price.
    let mut upper_states = Vec::new();
    let mut lower_states = Vec::new();
    for s in 0..n {
        if constraint.upper.at_id(s)?.is_finite() {
            upper_states.push(s);
        }
        if constraint.lower.at_id(s)? > 0.0 {
            lower_states.push(s);
        }
    }
    let dims = upper_states.len() + lower_states.len();
    if dims == 0 {
        // Nothing to search; any optimal policy is feasible.
        let (_, policy) = value_iteration(mdp, None, config.inner_tol)?;
        return Ok(CersResult {
            policy: Some(policy),
            feasible: true,
            timed_out: false,
            generations_used: 0,
            candidates_evaluated: 0,
            wall_ms: started.elapsed().as_millis() as u64,
            best_violation: 0.0,
        });
    }

    let mut mean = vec![0.0; dims];
    let mut std = vec![config.sigma_init_scale; dims];
    let n_elite = ((config.population as f64 * config.elite_fraction).ceil() as usize)
        .clamp(1, config.population - 1);
    let noise_floor = 1e-3;

    let mut best: Option<(TabularPolicy, f64)> = None;
    let mut candidates_evaluated = 0usize;

    let mut generations_used = 0;
    'generations: for gen in 0..config.generations {
        generations_used = gen + 1;
        let mut rng = crate::seeding::substream(config.seed, gen as u64);
        let candidates: Vec<Vec<f64>> = (0..config.population)
            .map(|_| {
                (0..dims)
                    .map(|d| (mean[d] + std[d] * crate::mdp::standard_normal(&mut rng)).max(0.0))
                    .collect()
            })
            .collect();

        let mut l1_scores = vec![f64::INFINITY; config.population];
        for (c, params) in candidates.iter().enumerate() {
            if let Some(budget) = config.budget_ms {
                if started.elapsed().as_millis() as u64 > budget {
                    return Ok(CersResult {
                        best_violation: best.as_ref().map_or(f64::INFINITY, |b| b.1),
                        policy: best.map(|b| b.0),
                        feasible: false,
                        timed_out: true,
                        generations_used: gen,
                        candidates_evaluated,
                        wall_ms: started.elapsed().as_millis() as u64,
                    });
                }
            }
            let mut adjustment = vec![0.0; n];
            for (i, &s) in upper_states.iter().enumerate() {
                adjustment[s] -= params[i];
            }
            for (i, &s) in lower_states.iter().enumerate() {
                adjustment[s] += params[upper_states.len() + i];
            }
            let (table, _) = value_iteration(mdp, Some(&adjustment), config.inner_tol)?;
            let policy = table.softmax_tabular(config.temperature)?;
            let episodes = rollout_batch(
                mdp,
                &policy,
                config.episodes_per_candidate,
                horizon,
                mix(config.seed, (gen * config.population + c) as u64),
            );
            let rho = tabular_density(
                &ExperienceBuffer::from_episodes(episodes),
                mdp.gamma,
                n,
            )?;
            let rho_vals = match &rho {
                DensityField::Tabular(v) => v.clone(),
                _ => unreachable!("tabular estimator"),
            };
            let mut max_violation = 0.0_f64;
            let mut l1_violation = 0.0;
            for s in 0..n {
                let up = constraint.upper.at_id(s)?;
                let lo = constraint.lower.at_id(s)?;
                let mut v = (lo - rho_vals[s]).max(0.0);
                if up.is_finite() {
                    v = v.max(rho_vals[s] - up);
                }
                max_violation = max_violation.max(v);
                l1_violation += v;
            }
            candidates_evaluated += 1;
            l1_scores[c] = l1_violation;
            if best.as_ref().map_or(true, |b| max_violation < b.1) {
                best = Some((policy.clone(), max_violation));
            }
            if max_violation <= config.tol_feas {
                return Ok(CersResult {
                    policy: Some(policy),
                    feasible: true,
                    timed_out: false,
                    generations_used,
                    candidates_evaluated,
                    wall_ms: started.elapsed().as_millis() as u64,
                    best_violation: max_violation,
                });
            }
        }

        if gen + 1 == config.generations {
            break 'generations;
        }
        // Least-violating candidates refit the sampling distribution.
        let mut order: Vec<usize> = (0..config.population).collect();
        order.sort_by(|&a, &b| l1_scores[a].partial_cmp(&l1_scores[b]).unwrap().then(a.cmp(&b)));
        let elites = &order[..n_elite];
        for d in 0..dims {
            let m: f64 = elites.iter().map(|&i| candidates[i][d]).sum::<f64>() / n_elite as f64;
            let v: f64 = elites
                .iter()
                .map(|&i| (candidates[i][d] - m) * (candidates[i][d] - m))
                .sum::<f64>()
                / n_elite as f64;
            mean[d] = m;
            std[d] = v.sqrt() + noise_floor;
        }
    }

    Ok(CersResult {
        best_violation: best.as_ref().map_or(f64::INFINITY, |b| b.1),
        policy: best.map(|b| b.0),
        feasible: false,
        timed_out: false,
        generations_used,
        candidates_evaluated,
        wall_ms: started.elapsed().as_millis() as u64,
    })
}

/// The cost threshold a density cap implies: eta = sum_s rho_max(s) *
/// c(s) over cost-bearing states. Any policy whose density respects the
/// cap automatically keeps its expected discounted cost below eta.
pub fn density_to_value_threshold(constraint: &DensityConstraint, cost: &[f64]) -> Result<f64> {
    let mut eta = 0.0;
    for (s, &c) in cost.iter().enumerate() {
        if c < 0.0 {
            return Err(DcrlError::invalid_argument("costs must be nonnegative"));
        }
        if c == 0.0 {
            continue;
        }
        let up = constraint.upper.at_id(s)?;
        if !up.is_finite() {
            return Err(DcrlError::invalid_argument(format!(
                "state {s} carries cost but has no finite density cap; the implied threshold \
                 is infinite"
            )));
        }
        eta += up * c;
    }
    Ok(eta)
}
