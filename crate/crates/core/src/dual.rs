//! Lagrange-multiplier machinery for the density constraints: bound
//! descriptions, multiplier fields (tabular or grid-interpolated), the
//! projected dual-ascent updates, reward adjustment, KKT residuals, and
//! the ascent residual used as a convergence signal.

use crate::density::{DensityField, StateQuery};
use crate::{DcrlError, Result};

/// One side of a density bound. `PerState` addresses discrete state ids;
/// `HalfSpace` splits a continuous state box along one coordinate and
/// applies a different level on each side. Infinite upper bounds mean
/// "unconstrained here".
#[derive(Debug, Clone, PartialEq)]
pub enum Bound {
    Uniform(f64),
    PerState(Vec<f64>),
    HalfSpace {
        dim: usize,
        threshold: f64,
        /// Level where state[dim] >= threshold.
        above: f64,
        /// Level where state[dim] < threshold.
        below: f64,
    },
}

impl Bound {
    pub fn at_id(&self, s: usize) -> Result<f64> {
        match self {
            Bound::Uniform(v) => Ok(*v),
            Bound::PerState(vs) => vs.get(s).copied().ok_or_else(|| {
                DcrlError::invalid_argument(format!(
                    "state id {s} out of range for bound over {} states",
                    vs.len()
                ))
            }),
            Bound::HalfSpace { .. } => Err(DcrlError::invalid_argument(
                "half-space bounds apply to coordinate states, not ids",
            )),
        }
    }

    pub fn at_point(&self, x: &[f64]) -> Result<f64> {
        match self {
            Bound::Uniform(v) => Ok(*v),
            Bound::PerState(_) => Err(DcrlError::invalid_argument(
                "per-state bounds apply to state ids, not coordinates",
            )),
            Bound::HalfSpace { dim, threshold, above, below } => {
                let xi = x.get(*dim).copied().ok_or_else(|| {
                    DcrlError::invalid_argument(format!(
                        "state has no dimension {dim} for half-space bound"
                    ))
                })?;
                if xi.is_nan() {
                    return Err(DcrlError::invalid_argument(
                        "NaN state component in bound evaluation",
                    ));
                }
                Ok(if xi >= *threshold { *above } else { *below })
            }
        }
    }

    /// Smallest value the bound can take (over its domain).
    pub fn min_value(&self) -> f64 {
        match self {
            Bound::Uniform(v) => *v,
            Bound::PerState(vs) => vs.iter().copied().fold(f64::INFINITY, f64::min),
            Bound::HalfSpace { above, below, .. } => above.min(*below),
        }
    }

    /// Largest value the bound can take.
    pub fn max_value(&self) -> f64 {
        match self {
            Bound::Uniform(v) => *v,
            Bound::PerState(vs) => vs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Bound::HalfSpace { above, below, .. } => above.max(*below),
        }
    }

    /// Largest finite value, if any entry is finite.
    pub fn max_finite(&self) -> Option<f64> {
        let m = match self {
            Bound::Uniform(v) => (v.is_finite()).then_some(*v),
            Bound::PerState(vs) => vs
                .iter()
                .copied()
                .filter(|v| v.is_finite())
                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v)))),
            Bound::HalfSpace { above, below, .. } => [*above, *below]
                .into_iter()
                .filter(|v| v.is_finite())
                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v)))),
        };
        m
    }
}

/// Pointwise density corridor rho_min <= rho <= rho_max.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityConstraint {
    pub lower: Bound,
    pub upper: Bound,
}

impl DensityConstraint {
    /// Validates nonnegativity of the lower bound and lower <= upper
    /// wherever the pair can be compared exactly (same indexing scheme);
    /// mixed shapes fall back to a conservative extremal check.
    pub fn new(lower: Bound, upper: Bound) -> Result<Self> {
        if lower.min_value() < 0.0 {
            return Err(DcrlError::invalid_argument(
                "lower density bound must be nonnegative",
            ));
        }
        if upper.min_value() < 0.0 {
            return Err(DcrlError::invalid_argument(
                "upper density bound must be nonnegative",
            ));
        }
        let ok = match (&lower, &upper) {
            (Bound::PerState(lo), Bound::PerState(hi)) => {
                if lo.len() != hi.len() {
                    return Err(DcrlError::invalid_argument(
                        "lower and upper per-state bounds differ in length",
                    ));
                }
                lo.iter().zip(hi).all(|(l, h)| l <= h)
            }
            (Bound::Uniform(lo), hi) => *lo <= hi.min_value(),
            (lo, Bound::Uniform(hi)) => lo.max_value() <= *hi,
            (Bound::PerState(lo), Bound::HalfSpace { .. })
            | (Bound::HalfSpace { .. }, Bound::PerState(lo)) => {
                let _ = lo;
                lower.max_value() <= upper.min_value()
            }
            (
                Bound::HalfSpace { dim: d1, threshold: t1, above: a1, below: b1 },
                Bound::HalfSpace { dim: d2, threshold: t2, above: a2, below: b2 },
            ) => {
                if d1 == d2 && t1 == t2 {
                    a1 <= a2 && b1 <= b2
                } else {
                    lower.max_value() <= upper.min_value()
                }
            }
        };
        if !ok {
            return Err(DcrlError::invalid_argument(
                "lower density bound exceeds upper bound somewhere",
            ));
        }
        Ok(DensityConstraint { lower, upper })
    }

    /// No constraint at all: [0, +inf) everywhere.
    pub fn unconstrained() -> Self {
        DensityConstraint {
            lower: Bound::Uniform(0.0),
            upper: Bound::Uniform(f64::INFINITY),
        }
    }

    pub fn upper_only(upper: Bound) -> Result<Self> {
        DensityConstraint::new(Bound::Uniform(0.0), upper)
    }

    pub fn lower_only(lower: Bound) -> Result<Self> {
        DensityConstraint::new(lower, Bound::Uniform(f64::INFINITY))
    }

    /// Scale used to make the KKT tolerances relative: the largest finite
    /// bound magnitude, floored at 1.
    pub fn tolerance_scale(&self) -> f64 {
        let up = self.upper.max_finite().unwrap_or(0.0);
        let lo = self.lower.max_finite().unwrap_or(0.0);
        up.abs().max(lo.abs()).max(1.0)
    }
}

/// Rectilinear support grid for interpolated multiplier fields. Axes are
/// sorted coordinate lists, one per state dimension; a single-point axis
/// makes the field constant along that dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportGrid {
    pub axes: Vec<Vec<f64>>,
}

impl SupportGrid {
    pub fn new(axes: Vec<Vec<f64>>) -> Result<Self> {
        if axes.is_empty() {
            return Err(DcrlError::invalid_argument("support grid needs >= 1 axis"));
        }
        for axis in &axes {
            if axis.is_empty() {
                return Err(DcrlError::invalid_argument("support axis is empty"));
            }
            if axis.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(DcrlError::invalid_argument(
                    "support axis must be strictly increasing",
                ));
            }
        }
        Ok(SupportGrid { axes })
    }

    /// Evenly spaced grid over a state box. `points_per_dim[i] == 1`
    /// collapses dimension i to its box midpoint.
    pub fn uniform(bounds: &[(f64, f64)], points_per_dim: &[usize]) -> Result<Self> {
        if bounds.len() != points_per_dim.len() {
            return Err(DcrlError::invalid_argument(
                "one point count per state dimension required",
            ));
        }
        let mut axes = Vec::with_capacity(bounds.len());
        for (&(lo, hi), &m) in bounds.iter().zip(points_per_dim) {
            if m == 0 {
                return Err(DcrlError::invalid_argument("point count must be positive"));
            }
            if !(lo < hi) && m > 1 {
                return Err(DcrlError::invalid_argument(format!(
                    "degenerate box dimension [{lo}, {hi}] needs a single point"
                )));
            }
            if m == 1 {
                axes.push(vec![0.5 * (lo + hi)]);
            } else {
                let step = (hi - lo) / (m - 1) as f64;
                axes.push((0..m).map(|i| lo + i as f64 * step).collect());
            }
        }
        SupportGrid::new(axes)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn n_points(&self) -> usize {
        self.axes.iter().map(|a| a.len()).product()
    }

    /// Coordinates of the flat-indexed point; the first axis varies
    /// slowest (row-major).
    pub fn point(&self, mut flat: usize) -> Vec<f64> {
        let mut coords = vec![0.0; self.dim()];
        for i in (0..self.dim()).rev() {
            let len = self.axes[i].len();
            coords[i] = self.axes[i][flat % len];
            flat /= len;
        }
        coords
    }

    /// Multilinear interpolation of `values` (one per grid point, flat
    /// row-major order) at `query`, clamping each coordinate into the
    /// grid range first (constant extrapolation outside the hull).
    pub fn interpolate(&self, values: &[f64], query: &[f64]) -> Result<f64> {
        if query.len() != self.dim() {
            return Err(DcrlError::invalid_argument(format!(
                "query has dimension {}, grid has {}",
                query.len(),
                self.dim()
            )));
        }
        if values.len() != self.n_points() {
            return Err(DcrlError::invalid_argument(format!(
                "value table has {} entries, grid has {} points",
                values.len(),
                self.n_points()
            )));
        }
        if query.iter().any(|x| x.is_nan()) {
            return Err(DcrlError::invalid_argument("NaN query coordinate"));
        }
        let d = self.dim();
        // Per-dimension bracketing cell and interpolation fraction.
        let mut lo_idx = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for i in 0..d {
            let axis = &self.axes[i];
            let x = query[i].clamp(axis[0], axis[axis.len() - 1]);
            if axis.len() == 1 {
                continue;
            }
            let j = match axis.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
                Ok(j) => j.min(axis.len() - 2),
                Err(j) => j.saturating_sub(1).min(axis.len() - 2),
            };
            lo_idx[i] = j;
            frac[i] = (x - axis[j]) / (axis[j + 1] - axis[j]);
        }
        // Accumulate over the 2^d cell corners.
        let mut total = 0.0;
        for corner in 0..(1usize << d) {
            let mut weight = 1.0;
            let mut flat = 0;
            for i in 0..d {
                let hi = (corner >> i) & 1 == 1;
                let axis_len = self.axes[i].len();
                let idx = if axis_len == 1 {
                    if hi {
                        weight = 0.0;
                        break;
                    }
                    0
                } else if hi {
                    weight *= frac[i];
                    lo_idx[i] + 1
                } else {
                    weight *= 1.0 - frac[i];
                    lo_idx[i]
                };
                flat = flat * axis_len + idx;
            }
            if weight != 0.0 {
                total += weight * values[flat];
            }
        }
        Ok(total)
    }
}

/// Grid-backed multiplier values, evaluated by interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledField {
    pub grid: SupportGrid,
    pub values: Vec<f64>,
}

/// A Lagrange-multiplier field over states; values stay nonnegative
/// through every update.
#[derive(Debug, Clone, PartialEq)]
pub enum MultiplierField {
    Tabular(Vec<f64>),
    Sampled(SampledField),
}

impl MultiplierField {
    pub fn zeros_tabular(n_states: usize) -> Self {
        MultiplierField::Tabular(vec![0.0; n_states])
    }

    pub fn zeros_sampled(grid: SupportGrid) -> Self {
        let n = grid.n_points();
        MultiplierField::Sampled(SampledField { grid, values: vec![0.0; n] })
    }

    /// Raw entry slice: tabular entries or support-point values.
    pub fn values(&self) -> &[f64] {
        match self {
            MultiplierField::Tabular(v) => v,
            MultiplierField::Sampled(f) => &f.values,
        }
    }

    pub fn max_value(&self) -> f64 {
        self.values().iter().copied().fold(0.0, f64::max)
    }

    pub fn as_tabular(&self) -> Result<&[f64]> {
        match self {
            MultiplierField::Tabular(v) => Ok(v),
            MultiplierField::Sampled(_) => Err(DcrlError::invalid_argument(
                "expected a tabular multiplier field",
            )),
        }
    }
}

/// Evaluate a multiplier field at a state.
pub fn eval_multiplier(field: &MultiplierField, state: StateQuery<'_>) -> Result<f64> {
    match (field, state) {
        (MultiplierField::Tabular(v), StateQuery::Id(s)) => v.get(s).copied().ok_or_else(|| {
            DcrlError::invalid_argument(format!(
                "state id {s} out of range for multiplier over {} states",
                v.len()
            ))
        }),
        (MultiplierField::Sampled(f), StateQuery::Point(x)) => f.grid.interpolate(&f.values, x),
        (MultiplierField::Tabular(_), StateQuery::Point(_)) => Err(DcrlError::invalid_argument(
            "tabular multiplier queried with a coordinate point",
        )),
        (MultiplierField::Sampled(_), StateQuery::Id(_)) => Err(DcrlError::invalid_argument(
            "sampled multiplier queried with a state id",
        )),
    }
}

/// Density evaluated at each entry of a multiplier field's domain:
/// tabular -> the tabular density entries, sampled -> the kernel density
/// at every support point.
fn density_on_domain(field: &MultiplierField, rho: &DensityField) -> Result<Vec<f64>> {
    match (field, rho) {
        (MultiplierField::Tabular(v), DensityField::Tabular(r)) => {
            if v.len() != r.len() {
                return Err(DcrlError::invalid_argument(format!(
                    "multiplier has {} states, density has {}",
                    v.len(),
                    r.len()
                )));
            }
            Ok(r.clone())
        }
        (MultiplierField::Sampled(f), DensityField::KernelSampled(k)) => (0..f.grid.n_points())
            .map(|i| k.eval(&f.grid.point(i)))
            .collect(),
        _ => Err(DcrlError::invalid_argument(
            "multiplier field and density field live on different state spaces",
        )),
    }
}

/// Bound evaluated at each entry of a multiplier field's domain.
fn bound_on_domain(field: &MultiplierField, bound: &Bound) -> Result<Vec<f64>> {
    match field {
        MultiplierField::Tabular(v) => (0..v.len()).map(|s| bound.at_id(s)).collect(),
        MultiplierField::Sampled(f) => (0..f.grid.n_points())
            .map(|i| bound.at_point(&f.grid.point(i)))
            .collect(),
    }
}

/// Projected ascent on the upper-bound multiplier:
/// sigma' = max(0, sigma + alpha * (rho - rho_max)). Entries with an
/// infinite bound stay at zero (nothing to enforce there).
pub fn ascend_upper(
    sigma_plus: &MultiplierField,
    rho: &DensityField,
    rho_max: &Bound,
    alpha: f64,
) -> Result<MultiplierField> {
    ascend(sigma_plus, rho, rho_max, alpha, true)
}

/// Projected ascent on the lower-bound multiplier:
/// sigma' = max(0, sigma + alpha * (rho_min - rho)).
pub fn ascend_lower(
    sigma_minus: &MultiplierField,
    rho: &DensityField,
    rho_min: &Bound,
    alpha: f64,
) -> Result<MultiplierField> {
    ascend(sigma_minus, rho, rho_min, alpha, false)
}

fn ascend(
    sigma: &MultiplierField,
    rho: &DensityField,
    bound: &Bound,
    alpha: f64,
    upper: bool,
) -> Result<MultiplierField> {
    if !(alpha > 0.0) {
        return Err(DcrlError::invalid_argument(format!(
            "ascent step size must be positive, got {alpha}"
        )));
    }
    let rho_vals = density_on_domain(sigma, rho)?;
    let bound_vals = bound_on_domain(sigma, bound)?;
    let updated: Vec<f64> = sigma
        .values()
        .iter()
        .zip(rho_vals.iter().zip(&bound_vals))
        .map(|(&s, (&r, &b))| {
            if !b.is_finite() {
                // +inf upper bound (or -inf lower, which construction
                // forbids anyway) can never be violated.
                return 0.0;
            }
            let grad = if upper { r - b } else { b - r };
            (s + alpha * grad).max(0.0)
        })
        .collect();
    Ok(match sigma {
        MultiplierField::Tabular(_) => MultiplierField::Tabular(updated),
        MultiplierField::Sampled(f) => {
            MultiplierField::Sampled(SampledField { grid: f.grid.clone(), values: updated })
        }
    })
}

/// Reward seen by the inner solver: raw + sigma_minus(s) - sigma_plus(s).
pub fn adjusted_reward(
    raw_reward: f64,
    state: StateQuery<'_>,
    sigma_plus: &MultiplierField,
    sigma_minus: &MultiplierField,
) -> Result<f64> {
    Ok(raw_reward + eval_multiplier(sigma_minus, state)? - eval_multiplier(sigma_plus, state)?)
}

/// Per-state reward offsets sigma_minus - sigma_plus for tabular fields,
/// the form the discrete inner solvers consume.
pub fn adjustment_vector(
    sigma_plus: &MultiplierField,
    sigma_minus: &MultiplierField,
) -> Result<Vec<f64>> {
    let sp = sigma_plus.as_tabular()?;
    let sm = sigma_minus.as_tabular()?;
    if sp.len() != sm.len() {
        return Err(DcrlError::invalid_argument(
            "multiplier fields differ in length",
        ));
    }
    Ok(sp.iter().zip(sm).map(|(p, m)| m - p).collect())
}

/// KKT residuals of a (density, multipliers) pair against a constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct KktReport {
    /// max over the domain of max(rho - rho_max, rho_min - rho, 0).
    pub feasibility_violation: f64,
    /// max of sigma_plus * |rho - rho_max| over entries with sigma_plus > 0.
    pub comp_slack_upper: f64,
    /// max of sigma_minus * |rho_min - rho| over entries with sigma_minus > 0.
    pub comp_slack_lower: f64,
    pub satisfied: bool,
}

/// Check feasibility and complementary slackness at the given absolute
/// tolerances. Callers wanting bound-relative tolerances should scale by
/// [`DensityConstraint::tolerance_scale`] first.
pub fn kkt_check(
    rho: &DensityField,
    constraint: &DensityConstraint,
    sigma_plus: &MultiplierField,
    sigma_minus: &MultiplierField,
    tol_feas: f64,
    tol_cs: f64,
) -> Result<KktReport> {
    if !(tol_feas > 0.0) || !(tol_cs > 0.0) {
        return Err(DcrlError::invalid_argument("tolerances must be positive"));
    }
    let rho_up = density_on_domain(sigma_plus, rho)?;
    let rho_lo = density_on_domain(sigma_minus, rho)?;
    let upper = bound_on_domain(sigma_plus, &constraint.upper)?;
    let lower = bound_on_domain(sigma_minus, &constraint.lower)?;

    let mut feas = 0.0_f64;
    let mut cs_up = 0.0_f64;
    for ((&r, &b), &s) in rho_up.iter().zip(&upper).zip(sigma_plus.values()) {
        if b.is_finite() {
            feas = feas.max(r - b);
            if s > 0.0 {
                cs_up = cs_up.max(s * (r - b).abs());
            }
        } else if s > 0.0 {
            // A multiplier on an unbounded entry is spurious; surface it.
            cs_up = f64::INFINITY;
        }
    }
    let mut cs_lo = 0.0_f64;
    for ((&r, &b), &s) in rho_lo.iter().zip(&lower).zip(sigma_minus.values()) {
        feas = feas.max(b - r);
        if s > 0.0 {
            cs_lo = cs_lo.max(s * (b - r).abs());
        }
    }
    Ok(KktReport {
        feasibility_violation: feas,
        comp_slack_upper: cs_up,
        comp_slack_lower: cs_lo,
        satisfied: feas <= tol_feas && cs_up <= tol_cs && cs_lo <= tol_cs,
    })
}

/// L2 norm of the implicit ascent direction g = (sigma_after -
/// sigma_before) / alpha. Near-zero norm means the multipliers have
/// stopped moving.
pub fn residual_norm(
    sigma_before: &MultiplierField,
    sigma_after: &MultiplierField,
    alpha: f64,
) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(DcrlError::invalid_argument("alpha must be positive"));
    }
    let a = sigma_before.values();
    let b = sigma_after.values();
    if a.len() != b.len() {
        return Err(DcrlError::invalid_argument(
            "multiplier fields differ in length",
        ));
    }
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum();
    Ok(ss.sqrt() / alpha)
}

/// One row per state (or support point) with the density, bounds, and
/// both multipliers — the per-iteration constraint snapshot.
pub fn constraint_state_csv(
    rho: &DensityField,
    constraint: &DensityConstraint,
    sigma_plus: &MultiplierField,
    sigma_minus: &MultiplierField,
) -> Result<String> {
    let rho_vals = density_on_domain(sigma_plus, rho)?;
    let upper = bound_on_domain(sigma_plus, &constraint.upper)?;
    let lower = bound_on_domain(sigma_plus, &constraint.lower)?;
    let sp = sigma_plus.values();
    let sm = sigma_minus.values();
    if sm.len() != sp.len() {
        return Err(DcrlError::invalid_argument(
            "multiplier fields differ in length",
        ));
    }
    let mut out = String::from("state_id,sigma_plus,sigma_minus,rho,rho_min,rho_max\n");
    for i in 0..sp.len() {
        out.push_str(&format!(
            "{i},{},{},{},{},{}\n",
            sp[i], sm[i], rho_vals[i], lower[i], upper[i]
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{KdeField, KernelKind, KernelSpec};
    use proptest::prelude::*;

    fn tab(v: Vec<f64>) -> MultiplierField {
        MultiplierField::Tabular(v)
    }

    #[test]
    fn ascend_upper_formula_and_clamp() {
        let rho = DensityField::Tabular(vec![0.5]);
        let out = ascend_upper(&tab(vec![0.0]), &rho, &Bound::Uniform(0.3), 1.0).unwrap();
        assert!((out.values()[0] - 0.2).abs() < 1e-15);

        let rho = DensityField::Tabular(vec![0.0]);
        let out = ascend_upper(&tab(vec![0.1]), &rho, &Bound::Uniform(1.0), 1.0).unwrap();
        assert_eq!(out.values()[0], 0.0);
    }

    #[test]
    fn ascend_is_identity_at_the_bound() {
        let rho = DensityField::Tabular(vec![0.3, 0.3]);
        let sigma = tab(vec![0.4, 0.0]);
        let out = ascend_upper(&sigma, &rho, &Bound::Uniform(0.3), 0.7).unwrap();
        assert_eq!(out.values(), sigma.values());
    }

    #[test]
    fn ascend_lower_examples() {
        let rho = DensityField::Tabular(vec![0.05]);
        let out = ascend_lower(&tab(vec![0.0]), &rho, &Bound::Uniform(0.1), 2.0).unwrap();
        assert!((out.values()[0] - 0.1).abs() < 1e-15);

        // No violation, sigma stays at zero.
        let rho = DensityField::Tabular(vec![0.5, 0.9]);
        let out = ascend_lower(&tab(vec![0.0, 0.0]), &rho, &Bound::Uniform(0.1), 1.0).unwrap();
        assert_eq!(out.values(), &[0.0, 0.0]);

        // Exact cancellation then clamp.
        let rho = DensityField::Tabular(vec![0.4]);
        let out = ascend_lower(&tab(vec![0.3]), &rho, &Bound::Uniform(0.1), 1.0).unwrap();
        assert_eq!(out.values()[0], 0.0);
    }

    #[test]
    fn infinite_upper_bound_keeps_sigma_zero() {
        let rho = DensityField::Tabular(vec![5.0]);
        let out =
            ascend_upper(&tab(vec![0.0]), &rho, &Bound::Uniform(f64::INFINITY), 1.0).unwrap();
        assert_eq!(out.values()[0], 0.0);
    }

    #[test]
    fn mismatched_spaces_are_rejected() {
        let rho = DensityField::Tabular(vec![0.5, 0.5]);
        assert!(ascend_upper(&tab(vec![0.0]), &rho, &Bound::Uniform(1.0), 1.0).is_err());
        assert!(ascend_upper(&tab(vec![0.0]), &rho, &Bound::Uniform(1.0), 0.0).is_err());
    }

    #[test]
    fn adjusted_reward_examples() {
        let sp = tab(vec![0.0, 0.2]);
        let sm = tab(vec![0.0, 0.5]);
        let id = |s| StateQuery::Id(s);
        assert_eq!(adjusted_reward(1.0, id(0), &sp, &sm).unwrap(), 1.0);
        assert!((adjusted_reward(1.0, id(1), &sp, &sm).unwrap() - 1.3).abs() < 1e-15);
        // Adding the same constant to both multipliers changes nothing.
        let sp2 = tab(vec![1.0, 1.2]);
        let sm2 = tab(vec![1.0, 1.5]);
        assert!(
            (adjusted_reward(1.0, id(1), &sp2, &sm2).unwrap()
                - adjusted_reward(1.0, id(1), &sp, &sm).unwrap())
            .abs()
                < 1e-15
        );
    }

    #[test]
    fn kkt_all_zero_is_satisfied() {
        let rho = DensityField::Tabular(vec![0.5, 0.5]);
        let c = DensityConstraint::new(Bound::Uniform(0.1), Bound::Uniform(1.0)).unwrap();
        let z = tab(vec![0.0, 0.0]);
        let rep = kkt_check(&rho, &c, &z, &z, 0.01, 0.01).unwrap();
        assert!(rep.satisfied);
        assert_eq!(rep.feasibility_violation, 0.0);
        assert_eq!(rep.comp_slack_upper, 0.0);
    }

    #[test]
    fn kkt_flags_feasibility_violation() {
        let rho = DensityField::Tabular(vec![1.1]);
        let c = DensityConstraint::upper_only(Bound::Uniform(1.0)).unwrap();
        let z = tab(vec![0.0]);
        let rep = kkt_check(&rho, &c, &z, &z, 0.01, 0.01).unwrap();
        assert!(!rep.satisfied);
        assert!((rep.feasibility_violation - 0.1).abs() < 1e-12);
    }

    #[test]
    fn kkt_flags_slack_multiplier_on_interior_state() {
        let rho = DensityField::Tabular(vec![0.2]);
        let c = DensityConstraint::upper_only(Bound::Uniform(1.0)).unwrap();
        let sp = tab(vec![1.0]);
        let sm = tab(vec![0.0]);
        let rep = kkt_check(&rho, &c, &sp, &sm, 0.01, 0.01).unwrap();
        assert!(!rep.satisfied);
        assert!((rep.comp_slack_upper - 0.8).abs() < 1e-12);
    }

    #[test]
    fn residual_norm_examples() {
        let a = tab(vec![0.5, 0.2]);
        assert_eq!(residual_norm(&a, &a, 0.3).unwrap(), 0.0);

        let b = tab(vec![0.5 + 0.5 * 0.2, 0.2]);
        assert!((residual_norm(&a, &b, 0.5).unwrap() - 0.2).abs() < 1e-12);

        // Same violation, different alpha: g is alpha-normalized.
        let rho = DensityField::Tabular(vec![0.9]);
        let bound = Bound::Uniform(0.5);
        let s0 = tab(vec![0.1]);
        for &alpha in &[0.1, 1.0, 3.0] {
            let s1 = ascend_upper(&s0, &rho, &bound, alpha).unwrap();
            let g = residual_norm(&s0, &s1, alpha).unwrap();
            assert!((g - 0.4).abs() < 1e-12, "alpha {alpha} gave {g}");
        }
    }

    #[test]
    fn interpolation_examples() {
        let grid = SupportGrid::new(vec![vec![0.0, 1.0]]).unwrap();
        let field = MultiplierField::Sampled(SampledField {
            grid,
            values: vec![0.0, 2.0],
        });
        let at = |x: f64| eval_multiplier(&field, StateQuery::Point(&[x])).unwrap();
        assert!((at(0.5) - 1.0).abs() < 1e-15);
        assert_eq!(at(1.0), 2.0);
        assert_eq!(at(0.0), 0.0);
        // Constant extrapolation outside the hull.
        assert_eq!(at(5.0), 2.0);
        assert_eq!(at(-3.0), 0.0);
        assert!(eval_multiplier(&field, StateQuery::Point(&[f64::NAN])).is_err());
    }

    #[test]
    fn bilinear_interpolation_hand_check() {
        let grid = SupportGrid::new(vec![vec![0.0, 1.0], vec![0.0, 2.0]]).unwrap();
        // Values in row-major order: (0,0), (0,2), (1,0), (1,2).
        let values = vec![1.0, 3.0, 5.0, 7.0];
        // Query (0.25, 0.5): tx = 0.25, ty = 0.25.
        // (1-tx)(1-ty)*1 + (1-tx)ty*3 + tx(1-ty)*5 + tx*ty*7 = 2.5.
        let v = grid.interpolate(&values, &[0.25, 0.5]).unwrap();
        assert!((v - 2.5).abs() < 1e-14);
    }

    #[test]
    fn single_point_axis_is_constant_dimension() {
        let grid = SupportGrid::uniform(&[(0.0, 1.0), (-1.0, 1.0)], &[1, 3]).unwrap();
        assert_eq!(grid.n_points(), 3);
        let values = vec![1.0, 2.0, 3.0];
        let a = grid.interpolate(&values, &[0.2, 0.0]).unwrap();
        let b = grid.interpolate(&values, &[0.9, 0.0]).unwrap();
        assert_eq!(a, b);
        assert!((a - 2.0).abs() < 1e-14);
    }

    #[test]
    fn grid_points_enumerate_row_major() {
        let grid = SupportGrid::new(vec![vec![0.0, 1.0], vec![5.0, 6.0, 7.0]]).unwrap();
        assert_eq!(grid.n_points(), 6);
        assert_eq!(grid.point(0), vec![0.0, 5.0]);
        assert_eq!(grid.point(2), vec![0.0, 7.0]);
        assert_eq!(grid.point(3), vec![1.0, 5.0]);
        assert_eq!(grid.point(5), vec![1.0, 7.0]);
    }

    #[test]
    fn sampled_ascent_updates_support_points() {
        let grid = SupportGrid::new(vec![vec![0.0, 1.0, 2.0]]).unwrap();
        let sigma = MultiplierField::zeros_sampled(grid.clone());
        // Single unit-weight sample at x = 1 with a narrow kernel.
        let kde = KdeField {
            kernel: KernelSpec::new(KernelKind::Gaussian, vec![0.25]).unwrap(),
            samples: vec![1.0],
            weights: vec![1.0],
        };
        let rho = DensityField::KernelSampled(kde.clone());
        let bound = Bound::Uniform(0.5);
        let out = ascend_upper(&sigma, &rho, &bound, 1.0).unwrap();
        for (i, &v) in out.values().iter().enumerate() {
            let expect = (kde.eval(&grid.point(i)).unwrap() - 0.5).max(0.0);
            assert!((v - expect).abs() < 1e-14, "support point {i}");
        }
        // Only the middle point sits above the bound.
        assert_eq!(out.values()[0], 0.0);
        assert!(out.values()[1] > 0.0);
        assert_eq!(out.values()[2], 0.0);
    }

    #[test]
    fn half_space_bound_levels() {
        let b = Bound::HalfSpace { dim: 1, threshold: 0.5, above: 0.1, below: f64::INFINITY };
        assert_eq!(b.at_point(&[9.0, 0.6]).unwrap(), 0.1);
        assert_eq!(b.at_point(&[9.0, 0.4]).unwrap(), f64::INFINITY);
        assert!(b.at_point(&[0.0]).is_err());
        assert!(b.at_id(0).is_err());
    }

    #[test]
    fn constraint_validation() {
        assert!(DensityConstraint::new(Bound::Uniform(0.5), Bound::Uniform(0.3)).is_err());
        assert!(DensityConstraint::new(Bound::Uniform(-0.1), Bound::Uniform(1.0)).is_err());
        assert!(DensityConstraint::new(
            Bound::PerState(vec![0.0, 0.5]),
            Bound::PerState(vec![1.0, 0.4])
        )
        .is_err());
        assert!(DensityConstraint::new(
            Bound::PerState(vec![0.0, 0.5]),
            Bound::PerState(vec![1.0, 0.6])
        )
        .is_ok());
        let c = DensityConstraint::unconstrained();
        assert_eq!(c.tolerance_scale(), 1.0);
        let c2 = DensityConstraint::upper_only(Bound::PerState(vec![3.0, f64::INFINITY]))
            .unwrap();
        assert_eq!(c2.tolerance_scale(), 3.0);
    }

    #[test]
    fn constraint_snapshot_csv_has_expected_rows() {
        let rho = DensityField::Tabular(vec![0.4, 0.6]);
        let c = DensityConstraint::new(
            Bound::Uniform(0.1),
            Bound::PerState(vec![0.5, f64::INFINITY]),
        )
        .unwrap();
        let sp = tab(vec![0.0, 0.2]);
        let sm = tab(vec![0.1, 0.0]);
        let csv = constraint_state_csv(&rho, &c, &sp, &sm).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "state_id,sigma_plus,sigma_minus,rho,rho_min,rho_max");
        assert_eq!(lines[1], "0,0,0.1,0.4,0.1,0.5");
        assert_eq!(lines[2], "1,0.2,0,0.6,0.1,inf");
    }

    proptest! {
        #[test]
        fn ascent_output_is_always_nonnegative(
            sigma in proptest::collection::vec(0.0_f64..2.0, 4),
            rho in proptest::collection::vec(0.0_f64..2.0, 4),
            bound in proptest::collection::vec(0.0_f64..2.0, 4),
            alpha in 0.01_f64..5.0,
        ) {
            let s = tab(sigma);
            let r = DensityField::Tabular(rho);
            let b = Bound::PerState(bound);
            let up = ascend_upper(&s, &r, &b, alpha).unwrap();
            let lo = ascend_lower(&s, &r, &b, alpha).unwrap();
            prop_assert!(up.values().iter().all(|&v| v >= 0.0));
            prop_assert!(lo.values().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn ascend_upper_is_monotone_in_rho(
            sigma in 0.0_f64..2.0,
            rho in 0.0_f64..2.0,
            bump in 0.0_f64..1.0,
            bound in 0.0_f64..2.0,
            alpha in 0.01_f64..5.0,
        ) {
            let base = ascend_upper(
                &tab(vec![sigma]),
                &DensityField::Tabular(vec![rho]),
                &Bound::Uniform(bound),
                alpha,
            ).unwrap();
            let bumped = ascend_upper(
                &tab(vec![sigma]),
                &DensityField::Tabular(vec![rho + bump]),
                &Bound::Uniform(bound),
                alpha,
            ).unwrap();
            prop_assert!(bumped.values()[0] >= base.values()[0]);
        }

        #[test]
        fn interpolation_passes_through_knots(
            vals in proptest::collection::vec(0.0_f64..5.0, 4),
        ) {
            let grid = SupportGrid::new(vec![vec![-1.0, 0.0, 2.0, 3.5]]).unwrap();
            for (i, &v) in vals.iter().enumerate() {
                let x = grid.axes[0][i];
                let got = grid.interpolate(&vals, &[x]).unwrap();
                prop_assert!((got - v).abs() < 1e-12);
            }
        }
    }
}
