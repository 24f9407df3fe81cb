//! Parameter sweeps: a base run config plus a grid of overrides.
//!
//! The sweep file names a base config and a table of axes, each axis a
//! dotted config key with a list of values:
//!
//! ```toml
//! [sweep]
//! base = "base.toml"
//! workers = 2
//!
//! [sweep.grid]
//! "env.rho_min" = [0.1, 0.3, 0.5]
//! "method.name" = ["dcrl", "cers"]
//! ```
//!
//! Cells are the cartesian product, enumerated with axes in sorted key
//! order and the last axis varying fastest, so cell numbering is stable
//! across runs. Each cell is an isolated run writing into its own
//! `cell_NNN` subdirectory; the aggregate table lands in `sweep.csv`.

use rayon::prelude::*;
use serde::Deserialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::commands::run_single;
use crate::config::parse_config;
use crate::CliError;

const MAX_CELLS: usize = 1000;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    sweep: SweepSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepSection {
    /// Base run config, relative to the sweep file.
    base: String,
    /// Parallel cell cap; the --workers flag overrides it.
    workers: Option<usize>,
    /// Output root; cells write to subdirectories of it. Falls back to
    /// the base config's run.out_dir.
    out_dir: Option<String>,
    grid: toml::value::Table,
}

pub fn cmd_sweep(
    sweep_path: &Path,
    out_override: Option<String>,
    seed_override: Option<u64>,
    workers_override: Option<usize>,
) -> Result<i32, CliError> {
    let text = std::fs::read_to_string(sweep_path)
        .map_err(|e| CliError::config(format!("{}: {e}", sweep_path.display())))?;
    let file: SweepFile = toml::from_str(&text)
        .map_err(|e| CliError::config(format!("sweep schema: {e}")))?;
    let sweep = file.sweep;
    let sweep_dir = sweep_path.parent().unwrap_or(Path::new("."));

    let base_path = sweep_dir.join(&sweep.base);
    let base_text = std::fs::read_to_string(&base_path)
        .map_err(|e| CliError::config(format!("{}: {e}", base_path.display())))?;
    // Parse once up front so schema errors name the base file rather
    // than surfacing per cell.
    let base_config = parse_config(&base_text)?;
    let base_value: toml::Value = toml::from_str(&base_text)
        .map_err(|e| CliError::config(format!("config schema: {e}")))?;

    let mut axes: Vec<(String, Vec<toml::Value>)> = Vec::new();
    for (key, value) in &sweep.grid {
        let items = value.as_array().ok_or_else(|| {
            CliError::config(format!("sweep.grid.{key} must be a list of values"))
        })?;
        if items.is_empty() {
            return Err(CliError::config(format!("sweep.grid.{key} is empty")));
        }
        axes.push((key.clone(), items.clone()));
    }
    if axes.is_empty() {
        return Err(CliError::config("sweep.grid has no axes"));
    }
    axes.sort_by(|a, b| a.0.cmp(&b.0));

    let n_cells: usize = axes.iter().map(|(_, vs)| vs.len()).product();
    if n_cells > MAX_CELLS {
        return Err(CliError::config(format!(
            "grid has {n_cells} cells, the cap is {MAX_CELLS}"
        )));
    }

    let out_root = PathBuf::from(
        out_override
            .or(sweep.out_dir)
            .unwrap_or_else(|| base_config.run.out_dir.clone()),
    );
    let workers = workers_override.or(sweep.workers).unwrap_or(1).max(1);

    // Materialize every cell's config before running anything, so a bad
    // override aborts the sweep instead of wasting the good cells.
    let mut cells = Vec::with_capacity(n_cells);
    for idx in 0..n_cells {
        let mut value = base_value.clone();
        if let Some(seed) = seed_override {
            set_dotted(&mut value, "run.seed", toml::Value::Integer(seed as i64))?;
        }
        let mut remainder = idx;
        let mut labels = Vec::with_capacity(axes.len());
        // Decode the cell index as mixed-radix digits over the axes,
        // last axis fastest.
        for (key, values) in axes.iter().rev() {
            let pick = remainder % values.len();
            remainder /= values.len();
            labels.push((key.clone(), values[pick].clone()));
            set_dotted(&mut value, key, values[pick].clone())?;
        }
        labels.reverse();
        let cell_dir = out_root.join(format!("cell_{idx:03}"));
        set_dotted(
            &mut value,
            "run.out_dir",
            toml::Value::String(cell_dir.to_string_lossy().into_owned()),
        )?;
        let rendered = toml::to_string(&value)
            .map_err(|e| CliError::config(format!("cell {idx}: {e}")))?;
        let config = parse_config(&rendered)
            .map_err(|e| CliError::config(format!("cell {idx}: {}", e.message)))?;
        cells.push((idx, labels, config, cell_dir));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::config(format!("worker pool: {e}")))?;
    // Relative env paths in the base config stay anchored to its own
    // directory, exactly as in a plain run.
    let base_dir = base_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let outcomes: Result<Vec<_>, CliError> = pool.install(|| {
        cells
            .par_iter()
            .map(|(idx, labels, config, cell_dir)| {
                let outcome = run_single(config, &base_dir, cell_dir)
                    .map_err(|e| CliError::config(format!("cell {idx}: {}", e.message)))?;
                Ok((*idx, labels, config.method.name.clone(), outcome))
            })
            .collect()
    });
    let mut outcomes = outcomes?;
    outcomes.sort_by_key(|(idx, ..)| *idx);

    let mut csv = String::from("cell,method");
    for (key, _) in &axes {
        if key != "method.name" {
            let _ = write!(csv, ",{key}");
        }
    }
    csv.push_str(",solved,wall_ms,cost\n");
    for (idx, labels, method, outcome) in &outcomes {
        let _ = write!(csv, "{idx},{method}");
        for (key, value) in labels.iter() {
            if key != "method.name" {
                let _ = write!(csv, ",{}", plain_value(value));
            }
        }
        let _ = writeln!(
            csv,
            ",{},{},{}",
            outcome.solved, outcome.wall_ms, outcome.cost
        );
    }
    crate::artifacts::write_file(&out_root, "sweep.csv", &csv)?;
    println!(
        "{n_cells} cells finished, table written to {}",
        out_root.join("sweep.csv").display()
    );
    Ok(0)
}

/// Set `root[a][b][c] = value` for a dotted path `a.b.c`, creating
/// intermediate tables as needed.
fn set_dotted(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<(), CliError> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("bad grid key `{path}`")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node.as_table_mut().ok_or_else(|| {
            CliError::config(format!("grid key `{path}` crosses a non-table value"))
        })?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node.as_table_mut().ok_or_else(|| {
        CliError::config(format!("grid key `{path}` crosses a non-table value"))
    })?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Scalar rendering without TOML quoting, for CSV cells.
fn plain_value(value: &toml::Value) -> String {
    match value {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}
