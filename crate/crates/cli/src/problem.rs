//! Environment construction from the [env] config section.

use dcrl_core::dual::{Bound, DensityConstraint};
use dcrl_core::envs::{
    make_ev_grid, make_express_delivery, make_mars_rover, make_thermal_motor, DiscreteBundle,
    EnvMeta, MarsLayout, ThermalBundle, ThermalParams,
};
use dcrl_core::mdp::read_mdp;
use std::path::Path;

use crate::config::EnvSection;
use crate::CliError;

pub enum Problem {
    Discrete(DiscreteBundle),
    Continuous(ThermalBundle),
}

impl Problem {
    pub fn meta(&self) -> &EnvMeta {
        match self {
            Problem::Discrete(b) => &b.meta,
            Problem::Continuous(b) => &b.meta,
        }
    }
}

fn require<T: Copy>(value: Option<T>, key: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::config(format!("env.{key} is required for this env.kind")))
}

/// Build the configured environment. `config_dir` anchors relative
/// `env.path` values so a config file can sit next to its MDP dump.
pub fn build_problem(env: &EnvSection, config_dir: &Path) -> Result<Problem, CliError> {
    match env.kind.as_str() {
        "express_delivery" => {
            let n_points = require(env.n_points, "n_points")?;
            let rho_min = require(env.rho_min, "rho_min")?;
            let seed = env.seed.unwrap_or(0);
            let bundle = make_express_delivery(n_points, rho_min, seed)
                .map_err(|e| CliError::config(format!("env: {e}")))?;
            Ok(Problem::Discrete(bundle))
        }
        "mars_rover" => {
            let mut layout = MarsLayout::default();
            if let Some(budget) = env.time_budget {
                layout.time_budget = budget;
            }
            let bundle = make_mars_rover(&layout)
                .map_err(|e| CliError::config(format!("env: {e}")))?;
            Ok(Problem::Discrete(bundle))
        }
        "ev_grid" => {
            let bundle = make_ev_grid(
                require(env.width, "width")?,
                require(env.height, "height")?,
                require(env.n_stations, "n_stations")?,
                require(env.energy_levels, "energy_levels")?,
                require(env.station_cap, "station_cap")?,
                require(env.low_energy_cap, "low_energy_cap")?,
                env.seed.unwrap_or(0),
            )
            .map_err(|e| CliError::config(format!("env: {e}")))?;
            Ok(Problem::Discrete(bundle))
        }
        "thermal_motor" => {
            let mut params = ThermalParams::default();
            if let Some(v) = env.heat_threshold {
                params.heat_threshold = v;
            }
            if let Some(v) = env.heat_cap {
                params.heat_cap = v;
            }
            if let Some(v) = env.gamma {
                params.gamma = v;
            }
            if let Some(points) = &env.grid_points {
                if points.len() != 3 {
                    return Err(CliError::config(
                        "env.grid_points needs exactly 3 entries",
                    ));
                }
                params.grid_points = [points[0], points[1], points[2]];
            }
            let bundle = make_thermal_motor(&params)
                .map_err(|e| CliError::config(format!("env: {e}")))?;
            Ok(Problem::Continuous(bundle))
        }
        "custom_mdp" => {
            let rel = env
                .path
                .as_ref()
                .ok_or_else(|| CliError::config("env.path is required for custom_mdp"))?;
            let path = config_dir.join(rel);
            let mdp =
                read_mdp(&path).map_err(|e| CliError::config(format!("env.path: {e}")))?;
            let lower = match (&env.rho_min_per_state, env.rho_min) {
                (Some(vs), _) => Bound::PerState(vs.clone()),
                (None, Some(v)) => Bound::Uniform(v),
                (None, None) => Bound::Uniform(0.0),
            };
            let upper = match (&env.rho_max_per_state, env.rho_max) {
                (Some(vs), _) => Bound::PerState(vs.clone()),
                (None, Some(v)) => Bound::Uniform(v),
                (None, None) => Bound::Uniform(f64::INFINITY),
            };
            let constraint = DensityConstraint::new(lower, upper)
                .map_err(|e| CliError::config(format!("env bounds: {e}")))?;
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "custom".into());
            Ok(Problem::Discrete(DiscreteBundle {
                mdp,
                constraint,
                meta: EnvMeta { name, regions: vec![], constants: vec![] },
            }))
        }
        other => Err(CliError::config(format!(
            "unknown environment `{other}` at env.kind"
        ))),
    }
}
