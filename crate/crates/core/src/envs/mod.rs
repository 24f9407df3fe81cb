//! Desk-scale environments bundled with the density constraints they are
//! meant to be solved under: a planar delivery graph with per-point visit
//! quotas, an EV grid with charging stations, a rover gridworld with a
//! restricted band, and a continuous motor-tracking task with a heat cap.
//!
//! Constructors are deterministic in their seed and every discrete model
//! they emit passes `validate_mdp`. Constraints never touch terminal
//! states (the training loop rejects those, since no action taken *at* a
//! terminal can be re-priced).

use crate::dual::{Bound, DensityConstraint, SupportGrid};
use crate::mdp::{standard_normal, ContinuousEnv, DiscreteMdp, Env, Episode};
use crate::seeding::{substream, RolloutRng};
use crate::{DcrlError, Result};
use rand::Rng;
use std::collections::VecDeque;

/// Construction record: named state regions (for reports and constraint
/// checks) and the reward constants baked into the model.
#[derive(Debug, Clone)]
pub struct EnvMeta {
    pub name: String,
    pub regions: Vec<(String, Vec<usize>)>,
    pub constants: Vec<(String, f64)>,
}

impl EnvMeta {
    pub fn region(&self, name: &str) -> Option<&[usize]> {
        self.regions
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, ids)| ids.as_slice())
    }

    pub fn constant(&self, name: &str) -> Option<f64> {
        self.constants.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

/// A discrete environment plus the constraint it ships with.
#[derive(Debug, Clone)]
pub struct DiscreteBundle {
    pub mdp: DiscreteMdp,
    pub constraint: DensityConstraint,
    pub meta: EnvMeta,
}

/// The continuous bundle also carries the support grid on which the
/// multiplier fields live.
#[derive(Debug, Clone)]
pub struct ThermalBundle {
    pub env: ThermalMotor,
    pub constraint: DensityConstraint,
    pub grid: SupportGrid,
    pub meta: EnvMeta,
}

// ---------------------------------------------------------------------
// Express delivery
// ---------------------------------------------------------------------

/// Service points scattered in the unit square, joined into a connected
/// near-neighbor graph together with one ship center. Vans start at a
/// uniformly random service point; moves pay the edge length, delivering
/// at the center pays a bonus and ends the episode. The constraint is a
/// uniform visitation floor `rho_min` on every service point, so a
/// feasible policy cannot simply run to the center: it has to keep the
/// network covered.
///
/// Action 0 always idles in place (small penalty); actions 1.. move along
/// the node's edges in ascending-neighbor order, and slots past the last
/// edge idle as well, so every state exposes the same action count.
pub fn make_express_delivery(n_points: usize, rho_min: f64, seed: u64) -> Result<DiscreteBundle> {
    if n_points < 3 {
        return Err(DcrlError::invalid_argument(
            "express delivery needs at least 3 service points",
        ));
    }
    if !rho_min.is_finite() || rho_min < 0.0 {
        return Err(DcrlError::invalid_argument(
            "rho_min must be finite and nonnegative",
        ));
    }
    let n = n_points + 1;
    let center = n_points;
    let mut rng: RolloutRng = substream(seed, 0);
    let coords: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)))
        .collect();
    let dist = |i: usize, j: usize| -> f64 {
        let dx = coords[i].0 - coords[j].0;
        let dy = coords[i].1 - coords[j].1;
        (dx * dx + dy * dy).sqrt()
    };

    // Undirected 3-nearest-neighbor graph ...
    let k = 3.min(n - 1);
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    let connect = |adj: &mut Vec<Vec<usize>>, i: usize, j: usize| {
        if i != j && !adj[i].contains(&j) {
            adj[i].push(j);
            adj[j].push(i);
        }
    };
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| dist(i, a).total_cmp(&dist(i, b)));
        for &j in order.iter().take(k) {
            connect(&mut adj, i, j);
        }
    }
    // ... stitched into one component by repeatedly adding the shortest
    // edge that crosses the component cut.
    loop {
        let comp = components(&adj);
        if comp.iter().all(|&c| c == comp[0]) {
            break;
        }
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            for j in (i + 1)..n {
                if comp[i] != comp[j] {
                    let d = dist(i, j);
                    if best.map_or(true, |(_, _, b)| d < b) {
                        best = Some((i, j, d));
                    }
                }
            }
        }
        let (i, j, _) = best.expect("disconnected graph must have a crossing pair");
        connect(&mut adj, i, j);
    }
    for nbrs in adj.iter_mut() {
        nbrs.sort_unstable();
    }

    let max_deg = adj.iter().map(Vec::len).max().unwrap_or(0);
    let n_actions = max_deg + 1;
    let n_edges: usize = adj.iter().map(Vec::len).sum::<usize>() / 2;
    let mean_edge = adj
        .iter()
        .enumerate()
        .flat_map(|(i, nbrs)| nbrs.iter().filter(move |&&j| j > i).map(move |&j| dist(i, j)))
        .sum::<f64>()
        / n_edges as f64;
    let idle_cost = 0.1 * mean_edge;
    let goal_bonus = 2.0;

    let idx = |s: usize, a: usize, sp: usize| (s * n_actions + a) * n + sp;
    let mut p = vec![0.0; n * n_actions * n];
    let mut r = vec![0.0; n * n_actions * n];
    for s in 0..n {
        for a in 0..n_actions {
            if a >= 1 && a <= adj[s].len() {
                let j = adj[s][a - 1];
                p[idx(s, a, j)] = 1.0;
                r[idx(s, a, j)] = -dist(s, j) + if j == center { goal_bonus } else { 0.0 };
            } else {
                p[idx(s, a, s)] = 1.0;
                r[idx(s, a, s)] = -idle_cost;
            }
        }
    }
    let mut phi = vec![1.0 / n_points as f64; n];
    phi[center] = 0.0;
    let mdp = DiscreteMdp::new(n, n_actions, p, r, 0.99, phi, vec![center])?;

    let mut lower = vec![rho_min; n];
    lower[center] = 0.0;
    let constraint = DensityConstraint::lower_only(Bound::PerState(lower))?;
    let meta = EnvMeta {
        name: format!("express_delivery_{n_points}"),
        regions: vec![
            ("service_points".into(), (0..n_points).collect()),
            ("ship_center".into(), vec![center]),
        ],
        constants: vec![
            ("goal_bonus".into(), goal_bonus),
            ("idle_cost".into(), idle_cost),
            ("mean_edge".into(), mean_edge),
            ("rho_min".into(), rho_min),
        ],
    };
    Ok(DiscreteBundle { mdp, constraint, meta })
}

/// Mean per-episode operating cost for a delivery policy: distance
/// traveled plus idle penalties, i.e. the negated rewards with the
/// delivery bonus added back for episodes that reached the center.
pub fn delivery_cost(episodes: &[Episode<usize, usize>], goal_bonus: f64) -> f64 {
    if episodes.is_empty() {
        return 0.0;
    }
    let total: f64 = episodes
        .iter()
        .map(|ep| -ep.raw_return() + if ep.terminated { goal_bonus } else { 0.0 })
        .sum();
    total / episodes.len() as f64
}

fn components(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut comp = vec![usize::MAX; n];
    let mut next = 0;
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let mut queue = VecDeque::from([start]);
        comp[start] = next;
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if comp[j] == usize::MAX {
                    comp[j] = next;
                    queue.push_back(j);
                }
            }
        }
        next += 1;
    }
    comp
}

// ---------------------------------------------------------------------
// EV grid
// ---------------------------------------------------------------------

/// Electric vehicle on a `width x height` grid: state is (cell, energy
/// level). Four moves each burn one energy unit and pay a fixed step
/// cost; five charge actions (tau in {0, 1/4, 1/2, 3/4, 1}) top energy up
/// to min(full, e + tau * full) at a station, and waste the step anywhere
/// else. Reaching the goal corner pays +10 and ends the episode; so does
/// running flat. Station states and nearly-flat states carry density
/// caps, which is what keeps a solution from camping at a charger.
pub fn make_ev_grid(
    width: usize,
    height: usize,
    n_stations: usize,
    energy_levels: usize,
    station_cap: f64,
    low_energy_cap: f64,
    seed: u64,
) -> Result<DiscreteBundle> {
    let cells = width * height;
    if cells < 2 {
        return Err(DcrlError::invalid_argument(
            "grid needs at least two cells",
        ));
    }
    if n_stations + 1 > cells {
        return Err(DcrlError::invalid_argument(format!(
            "{n_stations} stations do not fit a {width}x{height} grid with a free goal cell"
        )));
    }
    if energy_levels < 2 {
        return Err(DcrlError::invalid_argument(
            "energy must have at least an empty and a full level",
        ));
    }
    if station_cap <= 0.0 || low_energy_cap <= 0.0 {
        return Err(DcrlError::invalid_argument("density caps must be positive"));
    }

    let levels = energy_levels;
    let full = levels - 1;
    let n_states = cells * levels;
    let state_of = |cell: usize, e: usize| cell * levels + e;
    let goal_cell = cells - 1;
    let start_cell = 0;

    let mut rng: RolloutRng = substream(seed, 0);
    let mut pool: Vec<usize> = (0..cells).filter(|&c| c != goal_cell).collect();
    let mut stations = Vec::with_capacity(n_stations);
    for _ in 0..n_stations {
        let pick = rng.gen_range(0..pool.len());
        stations.push(pool.swap_remove(pick));
    }
    stations.sort_unstable();

    const MOVES: [(isize, isize); 4] = [(0, 1), (1, 0), (0, -1), (-1, 0)];
    const CHARGE_NUM: [usize; 5] = [0, 1, 2, 3, 4];
    let n_actions = MOVES.len() + CHARGE_NUM.len();
    let move_cost = 0.1;
    let charge_cost = 0.05;
    let goal_reward = 10.0;

    let idx = |s: usize, a: usize, sp: usize| (s * n_actions + a) * n_states + sp;
    let mut p = vec![0.0; n_states * n_actions * n_states];
    let mut r = vec![0.0; n_states * n_actions * n_states];
    for cell in 0..cells {
        let (x, y) = (cell % width, cell / width);
        for e in 0..levels {
            let s = state_of(cell, e);
            for (a, &(dx, dy)) in MOVES.iter().enumerate() {
                // Bumping a border stays put but still burns the step.
                let nx = (x as isize + dx).clamp(0, width as isize - 1) as usize;
                let ny = (y as isize + dy).clamp(0, height as isize - 1) as usize;
                let ncell = ny * width + nx;
                let sp = state_of(ncell, e.saturating_sub(1));
                p[idx(s, a, sp)] = 1.0;
                r[idx(s, a, sp)] =
                    -move_cost + if ncell == goal_cell { goal_reward } else { 0.0 };
            }
            for (slot, &num) in CHARGE_NUM.iter().enumerate() {
                let a = MOVES.len() + slot;
                let ne = if stations.contains(&cell) {
                    full.min(e + (num * full).div_ceil(4))
                } else {
                    e
                };
                let sp = state_of(cell, ne);
                p[idx(s, a, sp)] = 1.0;
                r[idx(s, a, sp)] = -charge_cost;
            }
        }
    }

    let mut phi = vec![0.0; n_states];
    phi[state_of(start_cell, full)] = 1.0;
    let mut terminal: Vec<usize> = (0..cells).map(|c| state_of(c, 0)).collect();
    terminal.extend((0..levels).map(|e| state_of(goal_cell, e)));
    let mdp = DiscreteMdp::new(n_states, n_actions, p, r, 0.95, phi, terminal)?;

    // Caps go on non-terminal states only: stations at any charge, and
    // the lowest non-empty band everywhere (running nearly flat should
    // stay rare). Where the two overlap the tighter cap wins.
    let low_band = 1..=(full / 4).max(1);
    let mut upper = vec![f64::INFINITY; n_states];
    let mut station_states = Vec::new();
    let mut low_states = Vec::new();
    for cell in 0..cells {
        if cell == goal_cell {
            continue;
        }
        for e in 1..levels {
            let s = state_of(cell, e);
            if stations.contains(&cell) {
                upper[s] = upper[s].min(station_cap);
                station_states.push(s);
            }
            if low_band.contains(&e) {
                upper[s] = upper[s].min(low_energy_cap);
                low_states.push(s);
            }
        }
    }
    let constraint = DensityConstraint::upper_only(Bound::PerState(upper))?;
    let meta = EnvMeta {
        name: format!("ev_grid_{width}x{height}"),
        regions: vec![
            ("stations".into(), station_states),
            ("low_energy".into(), low_states),
            ("goal".into(), (0..levels).map(|e| state_of(goal_cell, e)).collect()),
        ],
        constants: vec![
            ("goal_reward".into(), goal_reward),
            ("move_cost".into(), move_cost),
            ("charge_cost".into(), charge_cost),
            ("station_cap".into(), station_cap),
            ("low_energy_cap".into(), low_energy_cap),
        ],
    };
    Ok(DiscreteBundle { mdp, constraint, meta })
}

// ---------------------------------------------------------------------
// Mars rover
// ---------------------------------------------------------------------

/// Rover gridworld layout. Cells are indexed `y * width + x`. Area 1 is
/// the start region (uniform initial distribution), area 2 the restricted
/// band whose total discounted occupancy is budgeted, area 3 the terminal
/// goal. Walls are impassable cells; bumping one wastes the move.
#[derive(Debug, Clone)]
pub struct MarsLayout {
    pub width: usize,
    pub height: usize,
    pub area1: Vec<usize>,
    pub area2: Vec<usize>,
    pub area3: Vec<usize>,
    pub walls: Vec<usize>,
    /// Total discounted time allowed inside area 2; split uniformly into
    /// per-cell caps.
    pub time_budget: f64,
}

impl Default for MarsLayout {
    /// 8x8 field: start anywhere on the bottom row, goal at the top-right
    /// corner, and a restricted band across row 4 with a single free gap
    /// at the west edge. The direct route north crosses the band, the
    /// compliant route detours through the gap.
    fn default() -> Self {
        let width = 8;
        MarsLayout {
            width,
            height: 8,
            area1: (0..width).collect(),
            area2: (1..width).map(|x| 4 * width + x).collect(),
            area3: vec![7 * width + 7],
            walls: vec![],
            time_budget: 0.3,
        }
    }
}

pub fn make_mars_rover(layout: &MarsLayout) -> Result<DiscreteBundle> {
    let MarsLayout { width, height, .. } = *layout;
    let cells = width * height;
    if cells == 0 {
        return Err(DcrlError::invalid_argument("layout has no cells"));
    }
    for (name, area) in [
        ("area1", &layout.area1),
        ("area2", &layout.area2),
        ("area3", &layout.area3),
    ] {
        if (name != "area2" && area.is_empty()) || area.iter().any(|&c| c >= cells) {
            return Err(DcrlError::invalid_argument(format!(
                "{name} must be nonempty and inside the {width}x{height} grid"
            )));
        }
    }
    if layout.walls.iter().any(|&c| c >= cells) {
        return Err(DcrlError::invalid_argument("wall cell outside the grid"));
    }
    let is_wall = |c: usize| layout.walls.contains(&c);
    let is_goal = |c: usize| layout.area3.contains(&c);
    for &c in &layout.area3 {
        if layout.area1.contains(&c) || layout.area2.contains(&c) || is_wall(c) {
            return Err(DcrlError::invalid_argument(
                "area 3 must not overlap the start region, the restricted band, or a wall",
            ));
        }
    }
    if layout.area1.iter().any(|&c| is_wall(c)) || layout.area2.iter().any(|&c| is_wall(c)) {
        return Err(DcrlError::invalid_argument("areas 1 and 2 must be passable"));
    }
    if layout.time_budget <= 0.0 && !layout.area2.is_empty() {
        return Err(DcrlError::invalid_argument("time budget must be positive"));
    }

    // Every start must be able to reach the goal at all.
    let reachable = {
        let mut seen = vec![false; cells];
        let mut queue: VecDeque<usize> = layout.area3.iter().copied().collect();
        for &c in &layout.area3 {
            seen[c] = true;
        }
        while let Some(c) = queue.pop_front() {
            let (x, y) = (c % width, c / width);
            for (dx, dy) in [(0isize, 1isize), (1, 0), (0, -1), (-1, 0)] {
                let nx = x as isize + dx;
                let ny = y as isize + dy;
                if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                    continue;
                }
                let nc = ny as usize * width + nx as usize;
                if !seen[nc] && !is_wall(nc) {
                    seen[nc] = true;
                    queue.push_back(nc);
                }
            }
        }
        seen
    };
    if layout.area1.iter().any(|&c| !reachable[c]) {
        return Err(DcrlError::invalid_argument(
            "area 3 is cut off from part of the start region",
        ));
    }

    let step_cost = 0.2;
    let goal_reward = 10.0;
    let n_actions = 4;
    let idx = |s: usize, a: usize, sp: usize| (s * n_actions + a) * cells + sp;
    let mut p = vec![0.0; cells * n_actions * cells];
    let mut r = vec![0.0; cells * n_actions * cells];
    for c in 0..cells {
        let (x, y) = (c % width, c / width);
        for (a, (dx, dy)) in [(0isize, 1isize), (1, 0), (0, -1), (-1, 0)]
            .into_iter()
            .enumerate()
        {
            let nx = (x as isize + dx).clamp(0, width as isize - 1) as usize;
            let ny = (y as isize + dy).clamp(0, height as isize - 1) as usize;
            let mut nc = ny * width + nx;
            if is_wall(nc) {
                nc = c;
            }
            p[idx(c, a, nc)] = 1.0;
            r[idx(c, a, nc)] = -step_cost + if is_goal(nc) { goal_reward } else { 0.0 };
        }
    }
    let mut phi = vec![0.0; cells];
    for &c in &layout.area1 {
        phi[c] = 1.0 / layout.area1.len() as f64;
    }
    let mdp = DiscreteMdp::new(cells, n_actions, p, r, 0.95, phi, layout.area3.clone())?;

    let mut upper = vec![f64::INFINITY; cells];
    let per_cell_cap = if layout.area2.is_empty() {
        f64::INFINITY
    } else {
        layout.time_budget / layout.area2.len() as f64
    };
    for &c in &layout.area2 {
        upper[c] = per_cell_cap;
    }
    let constraint = DensityConstraint::upper_only(Bound::PerState(upper))?;
    let meta = EnvMeta {
        name: format!("mars_rover_{width}x{height}"),
        regions: vec![
            ("area1".into(), layout.area1.clone()),
            ("area2".into(), layout.area2.clone()),
            ("area3".into(), layout.area3.clone()),
        ],
        constants: vec![
            ("goal_reward".into(), goal_reward),
            ("step_cost".into(), step_cost),
            ("time_budget".into(), layout.time_budget),
            ("per_cell_cap".into(), per_cell_cap),
        ],
    };
    Ok(DiscreteBundle { mdp, constraint, meta })
}

// ---------------------------------------------------------------------
// Thermal motor
// ---------------------------------------------------------------------

/// Motor tracking task. State is [velocity, heat, reference]; the single
/// action nudges the velocity, heats the motor quadratically in the
/// control effort, and the reference drifts as a bounded random walk.
/// Reward is the negative tracking error, so good tracking demands
/// effort, and effort builds heat — the density cap on the hot half-space
/// is what forces the policy to back off.
#[derive(Debug, Clone)]
pub struct ThermalParams {
    /// Velocity change per unit action.
    pub velocity_gain: f64,
    /// Heat added per unit squared action.
    pub heat_gain: f64,
    /// Fraction of heat shed per step; heat follows
    /// h' = (1 - decay) * h + gain * u^2.
    pub heat_decay: f64,
    /// Reference random-walk step scale.
    pub ref_step: f64,
    /// Heat level above which density is capped.
    pub heat_threshold: f64,
    /// Uniform density cap over the hot half-space.
    pub heat_cap: f64,
    pub gamma: f64,
    /// Support-grid resolution per state dimension.
    pub grid_points: [usize; 3],
}

impl Default for ThermalParams {
    fn default() -> Self {
        ThermalParams {
            velocity_gain: 0.1,
            heat_gain: 0.2,
            heat_decay: 0.1,
            ref_step: 0.05,
            heat_threshold: 0.5,
            heat_cap: 0.6,
            gamma: 0.95,
            grid_points: [3, 8, 3],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ThermalMotor {
    params: ThermalParams,
    heat_max: f64,
}

impl ThermalMotor {
    pub fn params(&self) -> &ThermalParams {
        &self.params
    }
}

impl Env for ThermalMotor {
    type State = Vec<f64>;
    type Action = Vec<f64>;

    fn gamma(&self) -> f64 {
        self.params.gamma
    }

    fn reset(&self, rng: &mut RolloutRng) -> Vec<f64> {
        vec![0.0, 0.0, rng.gen_range(-0.5..0.5)]
    }

    fn step(&self, s: &Vec<f64>, a: &Vec<f64>, rng: &mut RolloutRng) -> (Vec<f64>, f64, bool) {
        let u = a[0].clamp(-1.0, 1.0);
        let p = &self.params;
        let v = (s[0] + p.velocity_gain * u).clamp(-2.0, 2.0);
        let h = ((1.0 - p.heat_decay) * s[1] + p.heat_gain * u * u).clamp(0.0, self.heat_max);
        let w = (s[2] + p.ref_step * standard_normal(rng)).clamp(-1.0, 1.0);
        let reward = -(v - w).abs();
        (vec![v, h, w], reward, false)
    }
}

impl ContinuousEnv for ThermalMotor {
    fn state_dim(&self) -> usize {
        3
    }
    fn action_dim(&self) -> usize {
        1
    }
    fn state_bounds(&self) -> Vec<(f64, f64)> {
        vec![(-2.0, 2.0), (0.0, self.heat_max), (-1.0, 1.0)]
    }
    fn action_bounds(&self) -> Vec<(f64, f64)> {
        vec![(-1.0, 1.0)]
    }
}

pub fn make_thermal_motor(params: &ThermalParams) -> Result<ThermalBundle> {
    if params.heat_decay <= 0.0 || params.heat_decay > 1.0 {
        return Err(DcrlError::invalid_argument(
            "heat decay must lie in (0, 1]",
        ));
    }
    if params.velocity_gain <= 0.0 || params.heat_gain <= 0.0 || params.ref_step < 0.0 {
        return Err(DcrlError::invalid_argument(
            "gains must be positive and the reference step nonnegative",
        ));
    }
    if params.gamma <= 0.0 || params.gamma >= 1.0 {
        return Err(DcrlError::invalid_argument("gamma must lie in (0, 1)"));
    }
    if params.heat_cap <= 0.0 {
        return Err(DcrlError::invalid_argument("heat cap must be positive"));
    }
    if params.grid_points.iter().any(|&g| g < 2) {
        return Err(DcrlError::invalid_argument(
            "support grid needs at least 2 points per dimension",
        ));
    }
    // Sustained max effort converges to gain/decay, which bounds heat.
    let heat_max = params.heat_gain / params.heat_decay;
    if params.heat_threshold < 0.0 || params.heat_threshold >= heat_max {
        return Err(DcrlError::invalid_argument(format!(
            "heat threshold must lie in [0, {heat_max}) to leave a hot region at all"
        )));
    }
    let env = ThermalMotor { params: params.clone(), heat_max };
    let constraint = DensityConstraint::upper_only(Bound::HalfSpace {
        dim: 1,
        threshold: params.heat_threshold,
        above: params.heat_cap,
        below: f64::INFINITY,
    })?;
    let grid = SupportGrid::uniform(
        &env.state_bounds(),
        &params.grid_points,
    )?;
    let meta = EnvMeta {
        name: "thermal_motor".into(),
        regions: vec![],
        constants: vec![
            ("heat_threshold".into(), params.heat_threshold),
            ("heat_cap".into(), params.heat_cap),
            ("heat_max".into(), heat_max),
            ("velocity_gain".into(), params.velocity_gain),
        ],
    };
    Ok(ThermalBundle { env, constraint, grid, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dcrl::{run_dcrl_discrete, DcrlConfig, InnerSolver};
    use crate::mdp::{exact_density, rollout, rollout_batch, validate_mdp, write_mdp};
    use crate::solvers::value_iteration;

    #[test]
    fn express_graph_is_seeded_and_well_formed() {
        let a = make_express_delivery(10, 0.1, 7).unwrap();
        let b = make_express_delivery(10, 0.1, 7).unwrap();
        assert_eq!(write_mdp(&a.mdp), write_mdp(&b.mdp));
        let c = make_express_delivery(10, 0.1, 8).unwrap();
        assert_ne!(write_mdp(&a.mdp), write_mdp(&c.mdp));

        assert_eq!(a.mdp.n_states, 11);
        assert!(validate_mdp(&a.mdp).is_empty());
        // Lower bounds only: every upper entry is infinite.
        for s in 0..11 {
            assert!(a.constraint.upper.at_id(s).unwrap().is_infinite());
        }
        assert_eq!(a.constraint.lower.at_id(3).unwrap(), 0.1);
        assert_eq!(a.constraint.lower.at_id(10).unwrap(), 0.0);
        assert!(make_express_delivery(2, 0.1, 0).is_err());
        assert!(make_express_delivery(10, -0.1, 0).is_err());
    }

    #[test]
    fn express_shortest_path_reaches_the_center_from_every_start() {
        let bundle = make_express_delivery(10, 0.0, 42).unwrap();
        let (_, policy) = value_iteration(&bundle.mdp, None, 1e-10).unwrap();
        let episodes = rollout_batch(&bundle.mdp, &policy, 64, 2_000, 3);
        assert!(episodes.iter().all(|ep| ep.terminated));
        let bonus = bundle.meta.constant("goal_bonus").unwrap();
        let cost = delivery_cost(&episodes, bonus);
        // Costs are travel distances inside the unit square: a handful of
        // hops, each well under the diagonal.
        assert!(cost > 0.0 && cost < 5.0, "cost {cost}");
    }

    #[test]
    fn express_visit_floor_is_free_for_start_states() {
        // Every service point carries at least its own start mass, so a
        // floor at 1/n binds nothing even for the shortest-path policy.
        let bundle = make_express_delivery(10, 0.1, 11).unwrap();
        let (_, policy) = value_iteration(&bundle.mdp, None, 1e-10).unwrap();
        let rho = exact_density(&bundle.mdp, &policy).unwrap();
        for s in 0..10 {
            assert!(rho[s] >= 0.1 - 1e-12, "rho[{s}] = {}", rho[s]);
        }
    }

    #[test]
    fn ev_grid_charging_clamps_at_full() {
        let b = make_ev_grid(4, 4, 3, 5, 2.0, 1.0, 9).unwrap();
        assert!(validate_mdp(&b.mdp).is_empty());
        let station_states = b.meta.region("stations").unwrap();
        // Pick a station at full charge; the tau = 1 action must loop.
        let full_state = *station_states.iter().find(|&&s| s % 5 == 4).unwrap();
        let full_charge_action = 4 + 4;
        let mut rng = substream(0, 0);
        let (next, _, done) = b.mdp.step(&full_state, &full_charge_action, &mut rng);
        assert_eq!(next, full_state);
        assert!(!done);
        // And tau = 1 from half charge jumps straight to full.
        let half_state = full_state - 2;
        let (next, _, _) = b.mdp.step(&half_state, &full_charge_action, &mut rng);
        assert_eq!(next, full_state);
    }

    #[test]
    fn ev_grid_moves_burn_energy_and_flat_is_terminal() {
        let b = make_ev_grid(4, 4, 2, 3, 2.0, 1.0, 1).unwrap();
        // Start state: cell 0 at full (e = 2). Move east: e drops to 1.
        let mut rng = substream(0, 0);
        let start = b.mdp.reset(&mut rng);
        assert_eq!(start % 3, 2);
        let (s1, _, done) = b.mdp.step(&start, &1, &mut rng);
        assert_eq!(s1 % 3, 1);
        assert!(!done);
        let (s2, _, done) = b.mdp.step(&s1, &1, &mut rng);
        assert_eq!(s2 % 3, 0);
        assert!(done, "flat battery should end the episode");
        // Terminal states carry no caps.
        assert!(b.constraint.upper.at_id(s2).unwrap().is_infinite());
    }

    #[test]
    fn ev_grid_rejects_bad_shapes() {
        assert!(make_ev_grid(2, 2, 4, 5, 1.0, 1.0, 0).is_err());
        assert!(make_ev_grid(4, 4, 2, 1, 1.0, 1.0, 0).is_err());
        assert!(make_ev_grid(4, 4, 2, 5, 0.0, 1.0, 0).is_err());
        assert!(make_ev_grid(1, 1, 0, 5, 1.0, 1.0, 0).is_err());
    }

    #[test]
    fn ev_station_cap_holds_in_a_constrained_run() {
        // Unconstrained first, to size a cap that actually binds. Eight
        // energy levels: crossing takes 10 moves, so the route must pass
        // a charger but does not live at one.
        let free = make_ev_grid(6, 6, 3, 8, 1e9, 1e9, 4).unwrap();
        let (_, baseline) = value_iteration(&free.mdp, None, 1e-10).unwrap();
        let rho0 = exact_density(&free.mdp, &baseline).unwrap();
        let stations = free.meta.region("stations").unwrap().to_vec();
        let peak = stations.iter().map(|&s| rho0[s]).fold(0.0, f64::max);
        assert!(peak > 0.05, "baseline never charges (peak {peak})");

        let cap = 0.6 * peak;
        let bundle = make_ev_grid(6, 6, 3, 8, cap, 1e9, 4).unwrap();
        let config = DcrlConfig {
            max_iters: 120,
            alpha: 0.05,
            episodes_per_iter: 2000,
            tol_feas: 2e-2,
            tol_cs: 5e-2,
            inner: InnerSolver::ExactVi {
                tol: 1e-8,
                temperature: 0.0,
                regularization: Some(crate::dcrl::Regularization { mu: 0.05, fw_iters: 60 }),
            },
            seed: 2,
            ..Default::default()
        };
        let res = run_dcrl_discrete(&bundle.mdp, &bundle.constraint, &config).unwrap();
        let rho = exact_density(&bundle.mdp, &res.policy).unwrap();
        let worst = stations
            .iter()
            .map(|&s| rho[s] - cap)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(
            worst <= 0.05,
            "station density exceeds the cap by {worst} (termination {:?})",
            res.termination
        );
    }

    #[test]
    fn mars_default_layout_shapes() {
        let layout = MarsLayout::default();
        let b = make_mars_rover(&layout).unwrap();
        assert_eq!(b.mdp.n_states, 64);
        assert!(validate_mdp(&b.mdp).is_empty());
        // Start mass is uniform on the bottom row.
        for c in 0..8 {
            assert!((b.mdp.initial_dist[c] - 0.125).abs() < 1e-12);
        }
        // Area-2 cells share the budget; everything else is uncapped.
        let cap = layout.time_budget / 7.0;
        for c in 0..64 {
            let u = b.constraint.upper.at_id(c).unwrap();
            if layout.area2.contains(&c) {
                assert!((u - cap).abs() < 1e-12);
            } else {
                assert!(u.is_infinite());
            }
        }
        // Goal arrival pays out.
        let goal = 63;
        let below = goal - 8;
        assert!((b.mdp.expected_reward(below, 0) - 9.8).abs() < 1e-9);
    }

    #[test]
    fn mars_walls_block_and_can_disconnect() {
        // Wall off the goal corner entirely: construction must refuse.
        let mut layout = MarsLayout::default();
        layout.walls = vec![7 * 8 + 6, 6 * 8 + 7];
        assert!(make_mars_rover(&layout).is_err());

        // A single wall cell just deflects movement.
        let mut layout = MarsLayout::default();
        layout.walls = vec![2 * 8 + 3];
        let b = make_mars_rover(&layout).unwrap();
        let mut rng = substream(0, 0);
        // From the cell south of the wall, moving north bumps and stays.
        let below_wall = 8 + 3;
        let (next, _, _) = b.mdp.step(&below_wall, &0, &mut rng);
        assert_eq!(next, below_wall);
    }

    #[test]
    fn mars_empty_restricted_band_is_unconstrained() {
        let mut layout = MarsLayout::default();
        layout.area2 = vec![];
        let b = make_mars_rover(&layout).unwrap();
        for c in 0..64 {
            assert!(b.constraint.upper.at_id(c).unwrap().is_infinite());
        }
    }

    #[test]
    fn mars_rejects_overlapping_goal() {
        let mut layout = MarsLayout::default();
        layout.area3 = vec![0];
        assert!(make_mars_rover(&layout).is_err());
    }

    #[test]
    fn thermal_heat_decays_without_effort_and_saturates_under_it() {
        let bundle = make_thermal_motor(&ThermalParams::default()).unwrap();
        let mut rng = substream(0, 0);
        let mut s = vec![0.0, 1.5, 0.0];
        for _ in 0..200 {
            s = bundle.env.step(&s, &vec![0.0], &mut rng).0;
        }
        assert!(s[1] < 1e-4, "heat should decay to zero, got {}", s[1]);

        let mut s = vec![0.0, 0.0, 0.0];
        for _ in 0..400 {
            s = bundle.env.step(&s, &vec![1.0], &mut rng).0;
        }
        let equilibrium = 0.2 / 0.1;
        assert!(
            (s[1] - equilibrium).abs() < 1e-6,
            "heat should saturate at {equilibrium}, got {}",
            s[1]
        );
    }

    #[test]
    fn thermal_bundle_wires_the_hot_halfspace() {
        let bundle = make_thermal_motor(&ThermalParams::default()).unwrap();
        assert_eq!(bundle.grid.dim(), 3);
        let hot = bundle.constraint.upper.at_point(&[0.0, 0.9, 0.0]).unwrap();
        let cool = bundle.constraint.upper.at_point(&[0.0, 0.1, 0.0]).unwrap();
        assert_eq!(hot, 0.6);
        assert!(cool.is_infinite());

        let mut bad = ThermalParams::default();
        bad.heat_decay = 0.0;
        assert!(make_thermal_motor(&bad).is_err());
        let mut bad = ThermalParams::default();
        bad.heat_threshold = 5.0;
        assert!(make_thermal_motor(&bad).is_err());
    }

    #[test]
    fn thermal_rollouts_stay_inside_bounds() {
        let bundle = make_thermal_motor(&ThermalParams::default()).unwrap();
        let policy = crate::mdp::LinearGaussianPolicy::new(
            3,
            1,
            vec![0.0, 0.0, 1.0],
            vec![0.0],
            vec![0.3],
            vec![(-1.0, 1.0)],
        )
        .unwrap();
        let mut rng = substream(5, 0);
        let ep = rollout(&bundle.env, &policy, 300, &mut rng);
        let bounds = bundle.env.state_bounds();
        for s in &ep.states {
            for (d, &(lo, hi)) in bounds.iter().enumerate() {
                assert!(s[d] >= lo - 1e-12 && s[d] <= hi + 1e-12);
            }
        }
    }
}
