//! Run-configuration schema and TOML loading.
//!
//! One file describes one run: which environment to build, which method
//! to apply, the inner-solver and dual-ascent settings, and where the
//! artifacts go. Sweeps reference a base file of this shape and override
//! keys per cell. Unknown keys are rejected so typos surface as config
//! errors instead of silently falling back to defaults.

use dcrl_core::dcrl::{
    AlphaSchedule, CersConfig, DcrlConfig, InnerSolver, Regularization,
};
use dcrl_core::solvers::{CemConfig, SolverConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvSection,
    pub method: MethodSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub dual: DualSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub oracle: OracleSection,
    pub convert: Option<ConvertSection>,
}

/// Environment constructor plus its parameters. `kind` picks the
/// constructor; the remaining keys are that constructor's arguments and
/// ignored keys belonging to other kinds are rejected at build time, not
/// here, because several kinds share names (`seed`, `rho_min`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub kind: String,

    // express_delivery
    pub n_points: Option<usize>,
    pub rho_min: Option<f64>,
    pub seed: Option<u64>,

    // mars_rover
    pub time_budget: Option<f64>,

    // ev_grid
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub n_stations: Option<usize>,
    pub energy_levels: Option<usize>,
    pub station_cap: Option<f64>,
    pub low_energy_cap: Option<f64>,

    // thermal_motor
    pub heat_threshold: Option<f64>,
    pub heat_cap: Option<f64>,
    pub gamma: Option<f64>,
    pub grid_points: Option<Vec<usize>>,

    // custom_mdp
    pub path: Option<String>,
    pub rho_max: Option<f64>,
    pub rho_min_per_state: Option<Vec<f64>>,
    pub rho_max_per_state: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    pub name: String,

    // rcpo: unit cost over a named region and a value threshold.
    pub cost_region: Option<String>,
    pub cost_value: Option<f64>,
    pub eta: Option<f64>,

    // cers population settings; tolerances come from [dual].
    pub population: Option<usize>,
    pub elite_fraction: Option<f64>,
    pub generations: Option<usize>,
    pub sigma_init_scale: Option<f64>,
    pub episodes_per_candidate: Option<usize>,
    pub budget_ms: Option<u64>,
}

/// Inner-solver selection. Defaults to regularized exact value
/// iteration, the configuration the convergence analysis is about.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_solver_kind")]
    pub kind: String,

    // exact_vi
    pub tol: Option<f64>,
    pub temperature: Option<f64>,
    /// Regularizer weight; set to 0 to disable smoothing.
    pub mu: Option<f64>,
    pub fw_iters: Option<usize>,

    // q_learning
    pub learning_rate: Option<f64>,
    pub lr_decay: Option<f64>,
    pub lr_min: Option<f64>,
    pub epsilon_start: Option<f64>,
    pub epsilon_end: Option<f64>,
    pub epsilon_decay: Option<f64>,
    pub episodes: Option<usize>,
    pub horizon: Option<usize>,

    // cem
    pub population: Option<usize>,
    pub elite_fraction: Option<f64>,
    pub noise_floor: Option<f64>,
    pub generations: Option<usize>,
    pub episodes_per_candidate: Option<usize>,
    pub initial_std: Option<f64>,
}

fn default_solver_kind() -> String {
    "exact_vi".into()
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            kind: default_solver_kind(),
            tol: None,
            temperature: None,
            mu: None,
            fw_iters: None,
            learning_rate: None,
            lr_decay: None,
            lr_min: None,
            epsilon_start: None,
            epsilon_end: None,
            epsilon_decay: None,
            episodes: None,
            horizon: None,
            population: None,
            elite_fraction: None,
            noise_floor: None,
            generations: None,
            episodes_per_candidate: None,
            initial_std: None,
        }
    }
}

/// Dual-ascent settings; every field falls back to the library default.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualSection {
    pub alpha: Option<f64>,
    pub schedule: Option<String>,
    pub max_iters: Option<usize>,
    pub tol_feas: Option<f64>,
    pub tol_cs: Option<f64>,
    pub tail_bound: Option<f64>,
    pub episodes_per_iter: Option<usize>,
    pub density_ema: Option<f64>,
    pub sigma_cap: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default)]
    pub seed: u64,
}

fn default_out_dir() -> String {
    "out".into()
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { out_dir: default_out_dir(), seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    /// Largest state count the LP oracle will accept.
    #[serde(default = "default_size_cap")]
    pub size_cap: usize,
}

fn default_size_cap() -> usize {
    64
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection { size_cap: default_size_cap() }
    }
}

/// Threshold-conversion inputs: a named region of the environment and
/// the per-visit cost incurred there.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvertSection {
    pub region: String,
    #[serde(default = "default_cost")]
    pub cost: f64,
}

fn default_cost() -> f64 {
    1.0
}

pub const METHOD_NAMES: &[&str] = &["dcrl", "rcpo", "cers", "unconstrained"];
pub const ENV_KINDS: &[&str] = &[
    "express_delivery",
    "mars_rover",
    "ev_grid",
    "thermal_motor",
    "custom_mdp",
];
pub const SOLVER_KINDS: &[&str] = &["exact_vi", "q_learning", "cem"];

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let config: RunConfig = toml::from_str(text)
        .map_err(|e| CliError::config(format!("config schema: {e}")))?;
    validate_config(&config)?;
    Ok(config)
}

fn validate_config(config: &RunConfig) -> Result<(), CliError> {
    if !METHOD_NAMES.contains(&config.method.name.as_str()) {
        return Err(CliError::config(format!(
            "unknown method `{}` at method.name (expected one of {})",
            config.method.name,
            METHOD_NAMES.join(", ")
        )));
    }
    if !ENV_KINDS.contains(&config.env.kind.as_str()) {
        return Err(CliError::config(format!(
            "unknown environment `{}` at env.kind (expected one of {})",
            config.env.kind,
            ENV_KINDS.join(", ")
        )));
    }
    if !SOLVER_KINDS.contains(&config.solver.kind.as_str()) {
        return Err(CliError::config(format!(
            "unknown solver `{}` at solver.kind (expected one of {})",
            config.solver.kind,
            SOLVER_KINDS.join(", ")
        )));
    }
    if let Some(schedule) = &config.dual.schedule {
        if schedule != "constant" && schedule != "inv_sqrt" {
            return Err(CliError::config(format!(
                "unknown schedule `{schedule}` at dual.schedule (expected constant or inv_sqrt)"
            )));
        }
    }
    Ok(())
}

/// Assemble the library-side loop configuration from the [solver] and
/// [dual] sections. The run seed threads through here so that one root
/// seed drives everything.
pub fn build_dcrl_config(config: &RunConfig, seed: u64) -> Result<DcrlConfig, CliError> {
    let defaults = DcrlConfig::default();
    let dual = &config.dual;
    let schedule = match dual.schedule.as_deref() {
        None | Some("constant") => AlphaSchedule::Constant,
        Some("inv_sqrt") => AlphaSchedule::InvSqrt,
        Some(other) => {
            return Err(CliError::config(format!(
                "unknown schedule `{other}` at dual.schedule"
            )))
        }
    };
    let out = DcrlConfig {
        max_iters: dual.max_iters.unwrap_or(defaults.max_iters),
        alpha: dual.alpha.unwrap_or(defaults.alpha),
        alpha_schedule: schedule,
        tol_feas: dual.tol_feas.unwrap_or(defaults.tol_feas),
        tol_cs: dual.tol_cs.unwrap_or(defaults.tol_cs),
        tail_bound: dual.tail_bound.unwrap_or(defaults.tail_bound),
        episodes_per_iter: dual.episodes_per_iter.unwrap_or(defaults.episodes_per_iter),
        density_ema: dual.density_ema.unwrap_or(defaults.density_ema),
        inner: build_inner_solver(&config.solver, seed)?,
        seed,
        sigma_cap: dual.sigma_cap.unwrap_or(defaults.sigma_cap),
        ..defaults
    };
    out.validate().map_err(|e| CliError::config(e.to_string()))?;
    Ok(out)
}

pub fn build_inner_solver(solver: &SolverSection, seed: u64) -> Result<InnerSolver, CliError> {
    match solver.kind.as_str() {
        "exact_vi" => {
            let default_reg = Regularization { mu: 0.05, fw_iters: 120 };
            let mu = solver.mu.unwrap_or(default_reg.mu);
            let regularization = if mu > 0.0 {
                Some(Regularization {
                    mu,
                    fw_iters: solver.fw_iters.unwrap_or(default_reg.fw_iters),
                })
            } else {
                None
            };
            Ok(InnerSolver::ExactVi {
                tol: solver.tol.unwrap_or(1e-9),
                temperature: solver.temperature.unwrap_or(0.0),
                regularization,
            })
        }
        "q_learning" => {
            let d = SolverConfig::default();
            Ok(InnerSolver::QLearning(SolverConfig {
                learning_rate: solver.learning_rate.unwrap_or(d.learning_rate),
                lr_decay: solver.lr_decay.unwrap_or(d.lr_decay),
                lr_min: solver.lr_min.unwrap_or(d.lr_min),
                epsilon_start: solver.epsilon_start.unwrap_or(d.epsilon_start),
                epsilon_end: solver.epsilon_end.unwrap_or(d.epsilon_end),
                epsilon_decay: solver.epsilon_decay.unwrap_or(d.epsilon_decay),
                episodes: solver.episodes.unwrap_or(d.episodes),
                horizon: solver.horizon.unwrap_or(d.horizon),
                tol: solver.tol.unwrap_or(d.tol),
                seed,
            }))
        }
        "cem" => Ok(InnerSolver::Cem(build_cem_config(solver, seed))),
        other => Err(CliError::config(format!(
            "unknown solver `{other}` at solver.kind"
        ))),
    }
}

pub fn build_cem_config(solver: &SolverSection, seed: u64) -> CemConfig {
    let d = CemConfig::default();
    CemConfig {
        population: solver.population.unwrap_or(d.population),
        elite_fraction: solver.elite_fraction.unwrap_or(d.elite_fraction),
        noise_floor: solver.noise_floor.unwrap_or(d.noise_floor),
        generations: solver.generations.unwrap_or(d.generations),
        episodes_per_candidate: solver.episodes_per_candidate.unwrap_or(d.episodes_per_candidate),
        horizon: solver.horizon.unwrap_or(d.horizon),
        initial_mean: Vec::new(),
        initial_std: solver.initial_std.unwrap_or(d.initial_std),
        seed,
    }
}

/// Population-search settings for the multiplier-space baseline; the
/// shared tolerances come from [dual] so comparisons against the ascent
/// methods judge feasibility the same way.
pub fn build_cers_config(config: &RunConfig, seed: u64) -> CersConfig {
    let d = CersConfig::default();
    let m = &config.method;
    CersConfig {
        population: m.population.unwrap_or(d.population),
        elite_fraction: m.elite_fraction.unwrap_or(d.elite_fraction),
        generations: m.generations.unwrap_or(d.generations),
        sigma_init_scale: m.sigma_init_scale.unwrap_or(d.sigma_init_scale),
        episodes_per_candidate: m.episodes_per_candidate.unwrap_or(d.episodes_per_candidate),
        tail_bound: config.dual.tail_bound.unwrap_or(d.tail_bound),
        tol_feas: config.dual.tol_feas.unwrap_or(d.tol_feas),
        inner_tol: config.solver.tol.unwrap_or(d.inner_tol),
        temperature: config.solver.temperature.unwrap_or(d.temperature),
        budget_ms: m.budget_ms,
        seed,
    }
}
