//! The four subcommands: run, oracle, convert, sweep.

use dcrl_core::dcrl::{
    metrics_csv, run_cers, run_dcrl_continuous, run_dcrl_discrete, run_rcpo, timing_csv,
    DcrlResult, IterationRecord, Termination,
};
use dcrl_core::density::{density_to_csv, DensityField};
use dcrl_core::dual::{constraint_state_csv, DensityConstraint, MultiplierField};
use dcrl_core::envs::{DiscreteBundle, ThermalBundle};
use dcrl_core::mdp::{
    estimate_return, expected_return, horizon_for_tail, rollout_batch, write_mdp, DiscreteMdp,
    Env, TabularPolicy,
};
use dcrl_core::oracle::{build_occupancy_lp, duality_check, lp_to_text, solve_lp, DualityStatus, LpStatus};
use dcrl_core::solvers::{cem_search, value_iteration};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::artifacts::{
    linear_policy_csv, run_meta_toml, tabular_policy_csv, write_file,
};
use crate::config::{
    build_cem_config, build_cers_config, build_dcrl_config, RunConfig,
};
use crate::problem::{build_problem, Problem};
use crate::CliError;

/// What a cell of a sweep (or a plain run) reports upward.
pub struct RunOutcome {
    pub exit_code: i32,
    pub solved: bool,
    pub wall_ms: u64,
    /// Negated expected return of the final policy, NaN when the method
    /// produced none.
    pub cost: f64,
    pub summary: String,
}

fn internal(e: dcrl_core::DcrlError) -> CliError {
    CliError::config(format!("run: {e}"))
}

// ---------------------------------------------------------------------
// run
// ---------------------------------------------------------------------

pub fn cmd_run(config: &RunConfig, config_dir: &Path) -> Result<i32, CliError> {
    let out_dir = PathBuf::from(&config.run.out_dir);
    let outcome = run_single(config, config_dir, &out_dir)?;
    println!("{}", outcome.summary);
    Ok(outcome.exit_code)
}

/// Execute one configured run and write its artifacts into `out_dir`.
/// Shared between `run` and each `sweep` cell.
pub fn run_single(
    config: &RunConfig,
    config_dir: &Path,
    out_dir: &Path,
) -> Result<RunOutcome, CliError> {
    let seed = config.run.seed;
    let problem = build_problem(&config.env, config_dir)?;
    match problem {
        Problem::Discrete(bundle) => run_discrete(config, &bundle, out_dir, seed),
        Problem::Continuous(bundle) => run_continuous(config, &bundle, out_dir, seed),
    }
}

fn termination_name(t: Termination) -> &'static str {
    match t {
        Termination::KktSatisfied => "kkt_satisfied",
        Termination::MaxIters => "max_iters",
        Termination::InfeasibleDiagnosis => "infeasible_diagnosis",
    }
}

fn run_discrete(
    config: &RunConfig,
    bundle: &DiscreteBundle,
    out_dir: &Path,
    seed: u64,
) -> Result<RunOutcome, CliError> {
    let mdp = &bundle.mdp;
    let constraint = &bundle.constraint;
    let dcrl_config = build_dcrl_config(config, seed)?;
    let horizon = mdp.horizon_for_tail(dcrl_config.tail_bound);
    let meta_toml =
        run_meta_toml(config, seed, dcrl_config.tail_bound, horizon, &bundle.meta.name)?;
    let started = Instant::now();

    match config.method.name.as_str() {
        "dcrl" | "rcpo" => {
            let result = if config.method.name == "dcrl" {
                run_dcrl_discrete(mdp, constraint, &dcrl_config).map_err(internal)?
            } else {
                let (cost, eta) = rcpo_inputs(config, bundle)?;
                run_rcpo(mdp, &cost, eta, &dcrl_config).map_err(internal)?
            };
            let wall_ms = started.elapsed().as_millis() as u64;
            write_loop_artifacts(out_dir, &result, constraint, &meta_toml, Some(mdp))?;
            let cost = -expected_return(mdp, &result.policy).map_err(internal)?;
            let exit_code = match result.termination {
                Termination::InfeasibleDiagnosis => 2,
                _ => 0,
            };
            Ok(RunOutcome {
                exit_code,
                solved: result.termination == Termination::KktSatisfied,
                wall_ms,
                cost,
                summary: format!(
                    "{} terminated {} after {} iterations (violation {:.3e})",
                    config.method.name,
                    termination_name(result.termination),
                    result.iterations.len(),
                    result.kkt.feasibility_violation,
                ),
            })
        }
        "cers" => {
            let cers_config = build_cers_config(config, seed);
            let result = run_cers(mdp, constraint, &cers_config).map_err(internal)?;
            let wall_ms = started.elapsed().as_millis() as u64;
            let (j_hat, cost, policy_csv, density_csv) = match &result.policy {
                Some(policy) => {
                    let j = expected_return(mdp, policy).map_err(internal)?;
                    let rho = dcrl_core::mdp::exact_density(mdp, policy).map_err(internal)?;
                    (
                        j,
                        -j,
                        Some(tabular_policy_csv(policy)),
                        Some(density_to_csv(&DensityField::Tabular(rho))),
                    )
                }
                None => (f64::NAN, f64::NAN, None, None),
            };
            // The search has no per-iteration trail; metrics.csv carries
            // one summary row so the artifact contract stays uniform.
            let record = IterationRecord {
                k: 0,
                j_hat,
                feas_violation: result.best_violation,
                cs_upper: 0.0,
                cs_lower: 0.0,
                g_norm: 0.0,
                sigma_plus_max: 0.0,
                sigma_minus_max: 0.0,
                inner_residual: 0.0,
                wall_ms: result.wall_ms,
            };
            write_file(out_dir, "metrics.csv", &metrics_csv(&[record.clone()]))?;
            write_file(out_dir, "timing.csv", &timing_csv(&[record]))?;
            write_file(out_dir, "run_meta.toml", &meta_toml)?;
            write_file(out_dir, "mdp.txt", &write_mdp(mdp))?;
            if let Some(csv) = policy_csv {
                write_file(out_dir, "policy.csv", &csv)?;
            }
            if let Some(csv) = density_csv {
                write_file(out_dir, "density.csv", &csv)?;
            }
            let mut report = String::new();
            let _ = writeln!(report, "feasible = {}", result.feasible);
            let _ = writeln!(report, "timed_out = {}", result.timed_out);
            let _ = writeln!(report, "generations_used = {}", result.generations_used);
            let _ = writeln!(report, "candidates_evaluated = {}", result.candidates_evaluated);
            let _ = writeln!(report, "best_violation = {}", result.best_violation);
            let _ = writeln!(report, "wall_ms = {}", result.wall_ms);
            write_file(out_dir, "search_report.toml", &report)?;
            Ok(RunOutcome {
                exit_code: 0,
                solved: result.feasible,
                wall_ms,
                cost,
                summary: format!(
                    "cers {} after {} generations ({} candidates, best violation {:.3e})",
                    if result.feasible { "found a feasible policy" } else { "failed" },
                    result.generations_used,
                    result.candidates_evaluated,
                    result.best_violation,
                ),
            })
        }
        "unconstrained" => {
            let tol = config.solver.tol.unwrap_or(1e-9);
            let (_, policy) = value_iteration(mdp, None, tol).map_err(internal)?;
            let wall_ms = started.elapsed().as_millis() as u64;
            let rho = dcrl_core::mdp::exact_density(mdp, &policy).map_err(internal)?;
            let j = expected_return(mdp, &policy).map_err(internal)?;
            // Violation against the bundled constraint is informational:
            // nothing enforced it, the row just records what ignoring the
            // bounds does.
            let violation = max_violation(&rho, constraint)?;
            let record = IterationRecord {
                k: 0,
                j_hat: j,
                feas_violation: violation,
                cs_upper: 0.0,
                cs_lower: 0.0,
                g_norm: 0.0,
                sigma_plus_max: 0.0,
                sigma_minus_max: 0.0,
                inner_residual: 0.0,
                wall_ms,
            };
            write_file(out_dir, "metrics.csv", &metrics_csv(&[record.clone()]))?;
            write_file(out_dir, "timing.csv", &timing_csv(&[record]))?;
            write_file(out_dir, "run_meta.toml", &meta_toml)?;
            write_file(out_dir, "policy.csv", &tabular_policy_csv(&policy))?;
            write_file(out_dir, "density.csv", &density_to_csv(&DensityField::Tabular(rho)))?;
            write_file(out_dir, "mdp.txt", &write_mdp(mdp))?;
            Ok(RunOutcome {
                exit_code: 0,
                solved: true,
                wall_ms,
                cost: -j,
                summary: format!(
                    "unconstrained optimum J = {j:.4} (bound violation {violation:.3e})"
                ),
            })
        }
        other => Err(CliError::config(format!(
            "unknown method `{other}` at method.name"
        ))),
    }
}

fn run_continuous(
    config: &RunConfig,
    bundle: &ThermalBundle,
    out_dir: &Path,
    seed: u64,
) -> Result<RunOutcome, CliError> {
    let env = &bundle.env;
    let gamma = env.gamma();
    let started = Instant::now();
    match config.method.name.as_str() {
        "dcrl" => {
            if config.solver.kind != "cem" {
                return Err(CliError::config(
                    "continuous environments need solver.kind = \"cem\"",
                ));
            }
            let dcrl_config = build_dcrl_config(config, seed)?;
            let horizon = horizon_for_tail(gamma, dcrl_config.tail_bound);
            let meta_toml =
                run_meta_toml(config, seed, dcrl_config.tail_bound, horizon, &bundle.meta.name)?;
            let result = run_dcrl_continuous(env, &bundle.constraint, &bundle.grid, &dcrl_config)
                .map_err(internal)?;
            let wall_ms = started.elapsed().as_millis() as u64;
            write_file(out_dir, "metrics.csv", &metrics_csv(&result.iterations))?;
            write_file(out_dir, "timing.csv", &timing_csv(&result.iterations))?;
            write_file(out_dir, "run_meta.toml", &meta_toml)?;
            write_file(out_dir, "policy.csv", &linear_policy_csv(&result.policy))?;
            write_file(out_dir, "density.csv", &density_to_csv(&result.density))?;
            let state_csv = constraint_state_csv(
                &result.density,
                &bundle.constraint,
                &result.sigma_plus,
                &result.sigma_minus,
            )
            .map_err(internal)?;
            write_file(out_dir, "constraint_state.csv", &state_csv)?;
            let exit_code = match result.termination {
                Termination::InfeasibleDiagnosis => 2,
                _ => 0,
            };
            let cost = -eval_return_continuous(env, &result.policy, &dcrl_config, seed);
            Ok(RunOutcome {
                exit_code,
                solved: result.termination == Termination::KktSatisfied,
                wall_ms,
                cost,
                summary: format!(
                    "dcrl terminated {} after {} iterations (violation {:.3e})",
                    termination_name(result.termination),
                    result.iterations.len(),
                    result.kkt.feasibility_violation,
                ),
            })
        }
        "unconstrained" => {
            let cem_config = build_cem_config(&config.solver, seed);
            let tail = config.dual.tail_bound.unwrap_or(1e-3);
            let horizon = horizon_for_tail(gamma, tail);
            let meta_toml = run_meta_toml(config, seed, tail, horizon, &bundle.meta.name)?;
            let result = cem_search(env, |_| 0.0, &cem_config, None).map_err(internal)?;
            let wall_ms = started.elapsed().as_millis() as u64;
            let episodes = rollout_batch(
                env,
                &result.policy,
                config.dual.episodes_per_iter.unwrap_or(1000),
                horizon,
                seed,
            );
            let j = estimate_return(&episodes, gamma);
            let record = IterationRecord {
                k: 0,
                j_hat: j,
                feas_violation: f64::NAN,
                cs_upper: 0.0,
                cs_lower: 0.0,
                g_norm: 0.0,
                sigma_plus_max: 0.0,
                sigma_minus_max: 0.0,
                inner_residual: result.elite_spread,
                wall_ms,
            };
            write_file(out_dir, "metrics.csv", &metrics_csv(&[record.clone()]))?;
            write_file(out_dir, "timing.csv", &timing_csv(&[record]))?;
            write_file(out_dir, "run_meta.toml", &meta_toml)?;
            write_file(out_dir, "policy.csv", &linear_policy_csv(&result.policy))?;
            Ok(RunOutcome {
                exit_code: 0,
                solved: true,
                wall_ms,
                cost: -j,
                summary: format!("unconstrained search finished, estimated J = {j:.4}"),
            })
        }
        other => Err(CliError::config(format!(
            "method `{other}` needs a discrete environment"
        ))),
    }
}

/// Cost vector and threshold for the surrogate value-constraint run:
/// unit (or configured) cost over a named region, threshold either
/// explicit or derived from the region's density caps.
fn rcpo_inputs(config: &RunConfig, bundle: &DiscreteBundle) -> Result<(Vec<f64>, f64), CliError> {
    let region_name = config.method.cost_region.as_ref().ok_or_else(|| {
        CliError::config("method.cost_region is required for rcpo")
    })?;
    let region = bundle.meta.region(region_name).ok_or_else(|| {
        CliError::config(format!(
            "environment `{}` has no region named `{region_name}`",
            bundle.meta.name
        ))
    })?;
    let cost_value = config.method.cost_value.unwrap_or(1.0);
    let mut cost = vec![0.0; bundle.mdp.n_states];
    for &s in region {
        cost[s] = cost_value;
    }
    let eta = match config.method.eta {
        Some(v) => v,
        None => dcrl_core::dcrl::density_to_value_threshold(&bundle.constraint, &cost)
            .map_err(|e| CliError::config(format!("method.eta: {e}")))?,
    };
    Ok((cost, eta))
}

fn write_loop_artifacts(
    out_dir: &Path,
    result: &DcrlResult<TabularPolicy>,
    constraint: &DensityConstraint,
    meta_toml: &str,
    mdp: Option<&DiscreteMdp>,
) -> Result<(), CliError> {
    write_file(out_dir, "metrics.csv", &metrics_csv(&result.iterations))?;
    write_file(out_dir, "timing.csv", &timing_csv(&result.iterations))?;
    write_file(out_dir, "run_meta.toml", meta_toml)?;
    write_file(out_dir, "policy.csv", &tabular_policy_csv(&result.policy))?;
    write_file(out_dir, "density.csv", &density_to_csv(&result.density))?;
    let state_csv = constraint_state_csv(
        &result.density,
        constraint,
        &result.sigma_plus,
        &result.sigma_minus,
    )
    .map_err(internal)?;
    write_file(out_dir, "constraint_state.csv", &state_csv)?;
    if let Some(mdp) = mdp {
        write_file(out_dir, "mdp.txt", &write_mdp(mdp))?;
    }
    Ok(())
}

fn max_violation(rho: &[f64], constraint: &DensityConstraint) -> Result<f64, CliError> {
    let mut worst: f64 = 0.0;
    for (s, &v) in rho.iter().enumerate() {
        let lo = constraint.lower.at_id(s).map_err(internal)?;
        let up = constraint.upper.at_id(s).map_err(internal)?;
        worst = worst.max(lo - v).max(v - up);
    }
    Ok(worst.max(0.0))
}

fn eval_return_continuous<E>(
    env: &E,
    policy: &dcrl_core::mdp::LinearGaussianPolicy,
    config: &dcrl_core::dcrl::DcrlConfig,
    seed: u64,
) -> f64
where
    E: dcrl_core::mdp::ContinuousEnv + Sync,
{
    let horizon = horizon_for_tail(env.gamma(), config.tail_bound);
    let episodes = rollout_batch(env, policy, config.episodes_per_iter, horizon, seed);
    estimate_return(&episodes, env.gamma())
}

// ---------------------------------------------------------------------
// oracle
// ---------------------------------------------------------------------

pub fn cmd_oracle(config: &RunConfig, config_dir: &Path) -> Result<i32, CliError> {
    let problem = build_problem(&config.env, config_dir)?;
    let bundle = match problem {
        Problem::Discrete(b) => b,
        Problem::Continuous(_) => {
            return Err(CliError::config(
                "the LP oracle needs a discrete environment",
            ))
        }
    };
    let cap = config.oracle.size_cap;
    if bundle.mdp.n_states > cap {
        return Err(CliError::config(format!(
            "oracle restricted to small instances: environment has {} states, cap is {cap}",
            bundle.mdp.n_states
        )));
    }
    let out_dir = PathBuf::from(&config.run.out_dir);
    let lp = build_occupancy_lp(&bundle.mdp, &bundle.constraint).map_err(internal)?;
    let solution = solve_lp(&lp).map_err(internal)?;
    write_file(&out_dir, "lp.txt", &lp_to_text(&lp))?;

    let mut report = String::new();
    if solution.status != LpStatus::Optimal {
        let _ = writeln!(report, "status = \"{:?}\"", solution.status);
        write_file(&out_dir, "oracle_report.toml", &report)?;
        println!("LP status: {:?} (nothing to compare)", solution.status);
        return Ok(0);
    }

    // Slackness residuals of the LP's own optimum: how far each stated
    // price is from complementary slackness with its density.
    let density = solution.density(bundle.mdp.n_actions);
    let mut slack_upper: f64 = 0.0;
    let mut slack_lower: f64 = 0.0;
    for s in 0..bundle.mdp.n_states {
        let up = bundle.constraint.upper.at_id(s).map_err(internal)?;
        let lo = bundle.constraint.lower.at_id(s).map_err(internal)?;
        if up.is_finite() {
            slack_upper = slack_upper.max(solution.sigma_plus[s] * (density[s] - up).abs());
        }
        slack_lower = slack_lower.max(solution.sigma_minus[s] * (lo - density[s]).abs());
    }

    let duality = duality_check(&bundle.mdp, &bundle.constraint).map_err(internal)?;
    let status_name = match &duality.status {
        DualityStatus::Passed => "passed".to_string(),
        DualityStatus::SkippedInfeasible => "infeasible".to_string(),
        DualityStatus::Failed(why) => format!("failed: {why}"),
    };
    let _ = writeln!(report, "status = \"{status_name}\"");
    let _ = writeln!(report, "j_lp = {}", duality.j_lp);
    let _ = writeln!(report, "j_adjusted = {}", duality.j_adjusted);
    let _ = writeln!(report, "duality_gap = {}", duality.duality_gap);
    let _ = writeln!(report, "lp_policy_return = {}", duality.lp_policy_return);
    let _ = writeln!(report, "lp_policy_violation = {}", duality.lp_policy_violation);
    let _ = writeln!(report, "comp_slack_upper = {slack_upper}");
    let _ = writeln!(report, "comp_slack_lower = {slack_lower}");
    let _ = writeln!(report, "flow_residual = {}", solution.flow_residual);
    write_file(&out_dir, "oracle_report.toml", &report)?;

    println!("constrained optimum J* = {:.6}", duality.j_lp);
    println!("duality gap = {:.3e}", duality.duality_gap);
    println!("slackness residuals: upper {slack_upper:.3e}, lower {slack_lower:.3e}");
    println!("duality check: {status_name}");
    Ok(0)
}

// ---------------------------------------------------------------------
// convert
// ---------------------------------------------------------------------

pub fn cmd_convert(config: &RunConfig, config_dir: &Path) -> Result<i32, CliError> {
    let section = config.convert.as_ref().ok_or_else(|| {
        CliError::config("convert needs a [convert] section (region, cost)")
    })?;
    let problem = build_problem(&config.env, config_dir)?;
    let bundle = match problem {
        Problem::Discrete(b) => b,
        Problem::Continuous(_) => {
            return Err(CliError::config(
                "threshold conversion needs a discrete environment",
            ))
        }
    };
    let region = bundle.meta.region(&section.region).ok_or_else(|| {
        CliError::config(format!(
            "environment `{}` has no region named `{}`",
            bundle.meta.name, section.region
        ))
    })?;
    let mut cost = vec![0.0; bundle.mdp.n_states];
    for &s in region {
        cost[s] = section.cost;
    }
    let eta = dcrl_core::dcrl::density_to_value_threshold(&bundle.constraint, &cost)
        .map_err(|e| CliError::config(e.to_string()))?;
    println!("eta = {eta}");
    for &s in region {
        let cap = bundle.constraint.upper.at_id(s).map_err(internal)?;
        println!("  state {s}: rho_max {cap} * cost {} = {}", section.cost, cap * section.cost);
    }
    Ok(0)
}

// ---------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------

pub use crate::sweep::cmd_sweep;
