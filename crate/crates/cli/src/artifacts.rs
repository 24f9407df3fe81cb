//! Artifact writers: everything a run leaves on disk.

use dcrl_core::mdp::{LinearGaussianPolicy, TabularPolicy};
use serde::Serialize;
use std::path::Path;

use crate::config::RunConfig;
use crate::CliError;

pub fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::config(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// `state_id,action_id,prob` rows for a tabular policy.
pub fn tabular_policy_csv(policy: &TabularPolicy) -> String {
    let mut out = String::from("state_id,action_id,prob\n");
    for s in 0..policy.n_states {
        for a in 0..policy.n_actions {
            out.push_str(&format!("{s},{a},{}\n", policy.probs[s * policy.n_actions + a]));
        }
    }
    out
}

/// Row-per-parameter dump of a linear-Gaussian controller.
pub fn linear_policy_csv(policy: &LinearGaussianPolicy) -> String {
    let mut out = String::from("kind,action_dim,state_dim,value\n");
    for a in 0..policy.action_dim {
        for s in 0..policy.state_dim {
            out.push_str(&format!(
                "weight,{a},{s},{}\n",
                policy.weights[a * policy.state_dim + s]
            ));
        }
    }
    for a in 0..policy.action_dim {
        out.push_str(&format!("bias,{a},,{}\n", policy.bias[a]));
        out.push_str(&format!("noise_std,{a},,{}\n", policy.noise_std[a]));
    }
    out
}

#[derive(Serialize)]
struct RunMeta<'a> {
    meta: MetaBlock<'a>,
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct MetaBlock<'a> {
    version: &'a str,
    seed: u64,
    tail_bound: f64,
    /// Episode truncation horizon implied by the tail bound.
    horizon: usize,
    env_name: &'a str,
}

/// Serialize the resolved configuration plus the derived quantities a
/// re-run needs. Everything here is self-contained: re-running with the
/// embedded [config] block and seed reproduces metrics.csv byte for
/// byte.
pub fn run_meta_toml(
    config: &RunConfig,
    seed: u64,
    tail_bound: f64,
    horizon: usize,
    env_name: &str,
) -> Result<String, CliError> {
    let meta = RunMeta {
        meta: MetaBlock {
            version: env!("CARGO_PKG_VERSION"),
            seed,
            tail_bound,
            horizon,
            env_name,
        },
        config,
    };
    toml::to_string(&meta).map_err(|e| CliError::config(format!("run_meta: {e}")))
}
