//! Discounted state-visitation density estimators: a tabular counter for
//! discrete states and a weighted kernel density estimate for continuous
//! ones. Both attach weight gamma^j to the j-th state of each episode
//! (arrival states included) and average over episodes.

use crate::mdp::ExperienceBuffer;
use crate::{DcrlError, Result};
use rayon::prelude::*;

/// Episodes per parallel partial sum. Fixed (not thread-count dependent)
/// so the merge order, and therefore the result, never changes.
const EPISODE_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Gaussian,
    Epanechnikov,
    Spheric,
}

impl KernelKind {
    pub fn name(&self) -> &'static str {
        match self {
            KernelKind::Gaussian => "gaussian",
            KernelKind::Epanechnikov => "epanechnikov",
            KernelKind::Spheric => "spheric",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "gaussian" => Ok(KernelKind::Gaussian),
            "epanechnikov" => Ok(KernelKind::Epanechnikov),
            "spheric" => Ok(KernelKind::Spheric),
            other => Err(DcrlError::invalid_argument(format!(
                "unknown kernel {other:?} (expected gaussian, epanechnikov, or spheric)"
            ))),
        }
    }
}

/// Kernel family plus a per-dimension bandwidth. Every kernel integrates
/// to one over the state space.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub bandwidth: Vec<f64>,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, bandwidth: Vec<f64>) -> Result<Self> {
        if bandwidth.is_empty() {
            return Err(DcrlError::invalid_argument("bandwidth must be non-empty"));
        }
        if bandwidth.iter().any(|&h| !(h > 0.0)) {
            return Err(DcrlError::invalid_argument(format!(
                "bandwidths must be positive, got {bandwidth:?}"
            )));
        }
        Ok(KernelSpec { kind, bandwidth })
    }

    pub fn dim(&self) -> usize {
        self.bandwidth.len()
    }
}

/// Volume of the unit ball in `d` dimensions (V_0 = 1, V_1 = 2,
/// V_d = V_{d-2} * 2 pi / d).
pub fn unit_ball_volume(d: usize) -> f64 {
    match d {
        0 => 1.0,
        1 => 2.0,
        _ => unit_ball_volume(d - 2) * 2.0 * std::f64::consts::PI / d as f64,
    }
}

/// K_h(offset): the kernel density at a displacement from a sample.
pub fn kernel_value(spec: &KernelSpec, offset: &[f64]) -> Result<f64> {
    if offset.len() != spec.bandwidth.len() {
        return Err(DcrlError::invalid_argument(format!(
            "offset has dimension {}, bandwidth has {}",
            offset.len(),
            spec.bandwidth.len()
        )));
    }
    Ok(kernel_value_unchecked(spec, offset))
}

fn kernel_value_unchecked(spec: &KernelSpec, offset: &[f64]) -> f64 {
    match spec.kind {
        KernelKind::Gaussian => {
            let mut v = 1.0;
            for (u, &h) in offset.iter().zip(&spec.bandwidth) {
                let z = u / h;
                v *= (-0.5 * z * z).exp() / (h * (2.0 * std::f64::consts::PI).sqrt());
            }
            v
        }
        KernelKind::Epanechnikov => {
            let mut v = 1.0;
            for (u, &h) in offset.iter().zip(&spec.bandwidth) {
                let z = u / h;
                if z.abs() >= 1.0 {
                    return 0.0;
                }
                v *= 0.75 * (1.0 - z * z) / h;
            }
            v
        }
        KernelKind::Spheric => {
            let r2: f64 = offset
                .iter()
                .zip(&spec.bandwidth)
                .map(|(u, &h)| (u / h) * (u / h))
                .sum();
            if r2 > 1.0 {
                return 0.0;
            }
            let vol: f64 =
                unit_ball_volume(offset.len()) * spec.bandwidth.iter().product::<f64>();
            1.0 / vol
        }
    }
}

/// Weighted kernel sample set. Weights already include the 1/N episode
/// average, so evaluation is a plain weighted kernel sum.
#[derive(Debug, Clone)]
pub struct KdeField {
    pub kernel: KernelSpec,
    /// Flattened samples, `dim` entries each.
    pub samples: Vec<f64>,
    pub weights: Vec<f64>,
}

impl KdeField {
    pub fn dim(&self) -> usize {
        self.kernel.dim()
    }

    pub fn n_samples(&self) -> usize {
        self.weights.len()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn eval(&self, point: &[f64]) -> Result<f64> {
        let d = self.dim();
        if point.len() != d {
            return Err(DcrlError::invalid_argument(format!(
                "query has dimension {}, field has {}",
                point.len(),
                d
            )));
        }
        let mut offset = vec![0.0; d];
        let mut total = 0.0;
        for (k, &w) in self.weights.iter().enumerate() {
            let sample = &self.samples[k * d..(k + 1) * d];
            for i in 0..d {
                offset[i] = point[i] - sample[i];
            }
            total += w * kernel_value_unchecked(&self.kernel, &offset);
        }
        Ok(total)
    }

    /// Deterministic stride thinning down to at most `cap` samples,
    /// rescaling weights so the total mass is preserved.
    pub fn thin_to(&self, cap: usize) -> Result<KdeField> {
        if cap == 0 {
            return Err(DcrlError::invalid_argument("sample cap must be positive"));
        }
        if self.n_samples() <= cap {
            return Ok(self.clone());
        }
        let d = self.dim();
        let stride = self.n_samples().div_ceil(cap);
        let mut samples = Vec::new();
        let mut weights = Vec::new();
        let mut k = 0;
        while k < self.n_samples() {
            samples.extend_from_slice(&self.samples[k * d..(k + 1) * d]);
            weights.push(self.weights[k]);
            k += stride;
        }
        let kept: f64 = weights.iter().sum();
        if kept > 0.0 {
            let scale = self.total_weight() / kept;
            for w in &mut weights {
                *w *= scale;
            }
        }
        Ok(KdeField { kernel: self.kernel.clone(), samples, weights })
    }
}

/// A state-density estimate: a vector over state ids or a kernel field
/// over box-valued states.
#[derive(Debug, Clone)]
pub enum DensityField {
    Tabular(Vec<f64>),
    KernelSampled(KdeField),
}

/// Query point for [`eval_density`]: a discrete state id or a coordinate
/// vector, matching the field variant.
#[derive(Debug, Clone, Copy)]
pub enum StateQuery<'a> {
    Id(usize),
    Point(&'a [f64]),
}

impl DensityField {
    pub fn total_mass(&self) -> f64 {
        match self {
            DensityField::Tabular(rho) => rho.iter().sum(),
            DensityField::KernelSampled(f) => f.total_weight(),
        }
    }

    pub fn as_tabular(&self) -> Result<&[f64]> {
        match self {
            DensityField::Tabular(rho) => Ok(rho),
            DensityField::KernelSampled(_) => Err(DcrlError::invalid_argument(
                "expected a tabular density field",
            )),
        }
    }

    pub fn as_kernel(&self) -> Result<&KdeField> {
        match self {
            DensityField::KernelSampled(f) => Ok(f),
            DensityField::Tabular(_) => Err(DcrlError::invalid_argument(
                "expected a kernel-sampled density field",
            )),
        }
    }
}

/// Evaluate a density field at a state.
pub fn eval_density(field: &DensityField, query: StateQuery<'_>) -> Result<f64> {
    match (field, query) {
        (DensityField::Tabular(rho), StateQuery::Id(s)) => rho.get(s).copied().ok_or_else(|| {
            DcrlError::invalid_argument(format!(
                "state id {s} out of range for {} states",
                rho.len()
            ))
        }),
        (DensityField::KernelSampled(f), StateQuery::Point(x)) => f.eval(x),
        (DensityField::Tabular(_), StateQuery::Point(_)) => Err(DcrlError::invalid_argument(
            "tabular field queried with a coordinate point",
        )),
        (DensityField::KernelSampled(_), StateQuery::Id(_)) => Err(DcrlError::invalid_argument(
            "kernel field queried with a state id",
        )),
    }
}

/// Monte-Carlo tabular density: rho(s) = (1/N) sum_i sum_j gamma^j
/// 1[s^{ij} = s]. Partial sums run per episode chunk and merge in index
/// order, so the output does not depend on thread count.
pub fn tabular_density<A: Sync>(
    buffer: &ExperienceBuffer<usize, A>,
    gamma: f64,
    n_states: usize,
) -> Result<DensityField> {
    if buffer.is_empty() {
        return Err(DcrlError::invalid_argument(
            "cannot estimate a density from an empty buffer",
        ));
    }
    let partials: Vec<Result<Vec<f64>>> = buffer
        .episodes
        .par_chunks(EPISODE_CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; n_states];
            for ep in chunk {
                let mut w = 1.0;
                for &s in &ep.states {
                    if s >= n_states {
                        return Err(DcrlError::invalid_argument(format!(
                            "state id {s} out of range for {n_states} states"
                        )));
                    }
                    acc[s] += w;
                    w *= gamma;
                }
            }
            Ok(acc)
        })
        .collect();
    let mut rho = vec![0.0; n_states];
    for part in partials {
        for (a, b) in rho.iter_mut().zip(part?) {
            *a += b;
        }
    }
    let n = buffer.n_episodes() as f64;
    for v in &mut rho {
        *v /= n;
    }
    Ok(DensityField::Tabular(rho))
}

/// Weighted KDE over all visited states: rho(x) = (1/N) sum_i sum_j
/// gamma^j K_h(x - s^{ij}).
pub fn kde_density<A: Sync>(
    buffer: &ExperienceBuffer<Vec<f64>, A>,
    gamma: f64,
    kernel: KernelSpec,
) -> Result<DensityField> {
    if buffer.is_empty() {
        return Err(DcrlError::invalid_argument(
            "cannot estimate a density from an empty buffer",
        ));
    }
    let d = kernel.dim();
    let n = buffer.n_episodes() as f64;
    let mut samples = Vec::new();
    let mut weights = Vec::new();
    for (s, w) in buffer.weighted_states(gamma) {
        if s.len() != d {
            return Err(DcrlError::invalid_argument(format!(
                "state has dimension {}, bandwidth has {d}",
                s.len()
            )));
        }
        samples.extend_from_slice(s);
        weights.push(w / n);
    }
    Ok(DensityField::KernelSampled(KdeField { kernel, samples, weights }))
}

/// Scott-style bandwidth: h_d = sigma_d * M^(-1/(d+4)) with sigma_d the
/// per-dimension standard deviation of the M points. Dimensions with no
/// spread get a small floor so the bandwidth stays positive.
pub fn scott_bandwidth(points: &[Vec<f64>]) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(DcrlError::invalid_argument(
            "bandwidth selection needs at least one point",
        ));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(DcrlError::invalid_argument("points have mixed dimensions"));
    }
    let m = points.len() as f64;
    let factor = m.powf(-1.0 / (d as f64 + 4.0));
    let mut out = Vec::with_capacity(d);
    for i in 0..d {
        let mean: f64 = points.iter().map(|p| p[i]).sum::<f64>() / m;
        let var: f64 = points.iter().map(|p| (p[i] - mean) * (p[i] - mean)).sum::<f64>() / m;
        out.push(var.sqrt().max(1e-6) * factor);
    }
    Ok(out)
}

/// Blend two density estimates: beta * previous + (1 - beta) * current.
/// beta = 0 returns the current field unchanged (smoothing off). Kernel
/// fields blend by concatenating their samples with scaled weights, which
/// is the same convex combination since evaluation is linear in weights.
pub fn ema_blend(previous: &DensityField, current: &DensityField, beta: f64) -> Result<DensityField> {
    if !(0.0..1.0).contains(&beta) {
        return Err(DcrlError::invalid_argument(format!(
            "smoothing decay must be in [0, 1), got {beta}"
        )));
    }
    if beta == 0.0 {
        return Ok(current.clone());
    }
    match (previous, current) {
        (DensityField::Tabular(a), DensityField::Tabular(b)) => {
            if a.len() != b.len() {
                return Err(DcrlError::invalid_argument(
                    "cannot blend tabular fields of different lengths",
                ));
            }
            Ok(DensityField::Tabular(
                a.iter().zip(b).map(|(x, y)| beta * x + (1.0 - beta) * y).collect(),
            ))
        }
        (DensityField::KernelSampled(a), DensityField::KernelSampled(b)) => {
            if a.kernel != b.kernel {
                return Err(DcrlError::invalid_argument(
                    "cannot blend kernel fields with different kernels",
                ));
            }
            let mut samples = a.samples.clone();
            samples.extend_from_slice(&b.samples);
            let mut weights: Vec<f64> = a.weights.iter().map(|w| beta * w).collect();
            weights.extend(b.weights.iter().map(|w| (1.0 - beta) * w));
            Ok(DensityField::KernelSampled(KdeField {
                kernel: a.kernel.clone(),
                samples,
                weights,
            }))
        }
        _ => Err(DcrlError::invalid_argument(
            "cannot blend tabular and kernel density fields",
        )),
    }
}

/// Serialize a density field. Tabular fields become `state_id,density`
/// rows; kernel fields become a kernel header plus one row per weighted
/// sample.
pub fn density_to_csv(field: &DensityField) -> String {
    let mut out = String::new();
    match field {
        DensityField::Tabular(rho) => {
            out.push_str("state_id,density\n");
            for (s, v) in rho.iter().enumerate() {
                out.push_str(&format!("{s},{v}\n"));
            }
        }
        DensityField::KernelSampled(f) => {
            out.push_str(&format!("# kernel {}\n", f.kernel.kind.name()));
            let hs: Vec<String> = f.kernel.bandwidth.iter().map(|h| h.to_string()).collect();
            out.push_str(&format!("# bandwidth {}\n", hs.join(" ")));
            let d = f.dim();
            let cols: Vec<String> = (0..d).map(|i| format!("s{i}")).collect();
            out.push_str(&format!("{},weight\n", cols.join(",")));
            for (k, w) in f.weights.iter().enumerate() {
                let coords: Vec<String> =
                    f.samples[k * d..(k + 1) * d].iter().map(|x| x.to_string()).collect();
                out.push_str(&format!("{},{w}\n", coords.join(",")));
            }
        }
    }
    out
}

/// Parse either CSV form produced by [`density_to_csv`].
pub fn density_from_csv(text: &str) -> Result<DensityField> {
    let mut kernel_kind: Option<KernelKind> = None;
    let mut bandwidth: Option<Vec<f64>> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut header: Option<Vec<String>> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let toks: Vec<&str> = rest.split_whitespace().collect();
            match toks.first() {
                Some(&"kernel") if toks.len() == 2 => {
                    kernel_kind = Some(KernelKind::parse(toks[1])?);
                }
                Some(&"bandwidth") if toks.len() >= 2 => {
                    let hs: Result<Vec<f64>> = toks[1..]
                        .iter()
                        .map(|t| {
                            t.parse().map_err(|_| {
                                DcrlError::invalid_argument(format!(
                                    "line {}: bad bandwidth {t:?}",
                                    i + 1
                                ))
                            })
                        })
                        .collect();
                    bandwidth = Some(hs?);
                }
                _ => {
                    return Err(DcrlError::invalid_argument(format!(
                        "line {}: unknown header {line:?}",
                        i + 1
                    )))
                }
            }
            continue;
        }
        if header.is_none() {
            header = Some(line.split(',').map(|s| s.to_string()).collect());
            continue;
        }
        let vals: Result<Vec<f64>> = line
            .split(',')
            .map(|t| {
                t.parse().map_err(|_| {
                    DcrlError::invalid_argument(format!("line {}: bad number {t:?}", i + 1))
                })
            })
            .collect();
        rows.push(vals?);
    }
    let header =
        header.ok_or_else(|| DcrlError::invalid_argument("density CSV has no header row"))?;
    match (kernel_kind, bandwidth) {
        (None, None) => {
            if header != ["state_id", "density"] {
                return Err(DcrlError::invalid_argument(format!(
                    "unexpected tabular density header {header:?}"
                )));
            }
            let mut rho = vec![0.0; rows.len()];
            for row in rows {
                if row.len() != 2 {
                    return Err(DcrlError::invalid_argument("tabular rows need 2 columns"));
                }
                let s = row[0] as usize;
                if s >= rho.len() {
                    return Err(DcrlError::invalid_argument(format!(
                        "state id {s} out of range"
                    )));
                }
                rho[s] = row[1];
            }
            Ok(DensityField::Tabular(rho))
        }
        (Some(kind), Some(hs)) => {
            let kernel = KernelSpec::new(kind, hs)?;
            let d = kernel.dim();
            let mut samples = Vec::new();
            let mut weights = Vec::new();
            for row in rows {
                if row.len() != d + 1 {
                    return Err(DcrlError::invalid_argument(format!(
                        "sample rows need {} columns, got {}",
                        d + 1,
                        row.len()
                    )));
                }
                samples.extend_from_slice(&row[..d]);
                weights.push(row[d]);
            }
            Ok(DensityField::KernelSampled(KdeField { kernel, samples, weights }))
        }
        _ => Err(DcrlError::invalid_argument(
            "kernel density CSV needs both kernel and bandwidth headers",
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{
        exact_density, rollout_batch, Episode, ExperienceBuffer, TabularPolicy,
    };
    use proptest::prelude::*;

    fn episode(states: Vec<usize>) -> Episode<usize, usize> {
        let n = states.len() - 1;
        Episode {
            states,
            actions: vec![0; n],
            rewards: vec![0.0; n],
            terminated: false,
        }
    }

    #[test]
    fn three_state_episode_gets_geometric_weights() {
        let buf = ExperienceBuffer::from_episodes(vec![episode(vec![0, 1, 2])]);
        let field = tabular_density(&buf, 0.9, 3).unwrap();
        let rho = field.as_tabular().unwrap();
        assert_eq!(rho, &[1.0, 0.9, 0.81]);
    }

    #[test]
    fn gamma_zero_gives_initial_state_frequencies() {
        let buf = ExperienceBuffer::from_episodes(vec![
            episode(vec![0, 1]),
            episode(vec![0, 2]),
            episode(vec![1, 2]),
            episode(vec![0, 0]),
        ]);
        let field = tabular_density(&buf, 0.0, 3).unwrap();
        assert_eq!(field.as_tabular().unwrap(), &[0.75, 0.25, 0.0]);
    }

    #[test]
    fn empty_buffer_is_rejected() {
        let buf: ExperienceBuffer<usize, usize> = ExperienceBuffer::new();
        assert!(tabular_density(&buf, 0.9, 2).is_err());
    }

    #[test]
    fn out_of_range_state_is_rejected() {
        let buf = ExperienceBuffer::from_episodes(vec![episode(vec![0, 5])]);
        assert!(tabular_density(&buf, 0.9, 3).is_err());
    }

    #[test]
    fn mass_identity_holds() {
        let buf = ExperienceBuffer::from_episodes(vec![
            episode(vec![0, 1, 2, 1]),
            episode(vec![2, 2]),
            episode(vec![1]),
        ]);
        let gamma = 0.93;
        let field = tabular_density(&buf, gamma, 3).unwrap();
        let expect = buf.total_weight(gamma) / 3.0;
        assert!((field.total_mass() - expect).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_density_tracks_exact_solution() {
        // Stochastic 5-state MDP: mass spreads, so the comparison is not
        // a trivially deterministic replay.
        let n = 5;
        let mut p = vec![0.0; n * n];
        for s in 0..n {
            p[s * n + (s + 1) % n] = 0.6;
            p[s * n + s] = 0.3;
            p[s * n + (s + 2) % n] = 0.1;
        }
        let r = vec![0.0; n * n];
        let mdp = crate::mdp::DiscreteMdp::new(
            n,
            1,
            p,
            r,
            0.9,
            vec![1.0, 0.0, 0.0, 0.0, 0.0],
            vec![],
        )
        .unwrap();
        let pi = TabularPolicy::uniform(n, 1);
        let exact = exact_density(&mdp, &pi).unwrap();
        let horizon = mdp.horizon_for_tail(1e-4);
        let eps = rollout_batch(&mdp, &pi, 10_000, horizon, 123);
        let buf = ExperienceBuffer::from_episodes(eps);
        let field = tabular_density(&buf, mdp.gamma, n).unwrap();
        let rho = field.as_tabular().unwrap();
        let linf = rho
            .iter()
            .zip(&exact)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        assert!(linf <= 0.05, "L-inf error {linf}");
    }

    #[test]
    fn parallel_estimate_is_deterministic() {
        let eps: Vec<_> = (0..500)
            .map(|i| episode(vec![i % 3, (i + 1) % 3, (i + 2) % 3]))
            .collect();
        let buf = ExperienceBuffer::from_episodes(eps);
        let a = tabular_density(&buf, 0.9, 3).unwrap();
        let b = tabular_density(&buf, 0.9, 3).unwrap();
        assert_eq!(a.as_tabular().unwrap(), b.as_tabular().unwrap());
    }

    #[test]
    fn gaussian_kernel_peak_value() {
        let spec = KernelSpec::new(KernelKind::Gaussian, vec![1.0]).unwrap();
        let v = kernel_value(&spec, &[0.0]).unwrap();
        assert!((v - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn epanechnikov_peak_and_support() {
        let spec = KernelSpec::new(KernelKind::Epanechnikov, vec![1.0]).unwrap();
        assert!((kernel_value(&spec, &[0.0]).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(kernel_value(&spec, &[1.0]).unwrap(), 0.0);
        assert_eq!(kernel_value(&spec, &[2.5]).unwrap(), 0.0);
    }

    #[test]
    fn spheric_kernel_is_normalized_indicator() {
        let spec = KernelSpec::new(KernelKind::Spheric, vec![2.0, 0.5]).unwrap();
        // V_2 = pi; density inside the ellipse is 1 / (pi * 2 * 0.5).
        let inside = kernel_value(&spec, &[0.1, 0.1]).unwrap();
        assert!((inside - 1.0 / std::f64::consts::PI).abs() < 1e-12);
        assert_eq!(kernel_value(&spec, &[2.1, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn unit_ball_volumes_match_closed_forms() {
        assert_eq!(unit_ball_volume(0), 1.0);
        assert_eq!(unit_ball_volume(1), 2.0);
        assert!((unit_ball_volume(2) - std::f64::consts::PI).abs() < 1e-12);
        assert!((unit_ball_volume(3) - 4.0 * std::f64::consts::PI / 3.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_dimension_mismatch_is_rejected() {
        let spec = KernelSpec::new(KernelKind::Gaussian, vec![1.0, 1.0]).unwrap();
        assert!(kernel_value(&spec, &[0.0]).is_err());
    }

    #[test]
    fn bad_bandwidth_is_rejected() {
        assert!(KernelSpec::new(KernelKind::Gaussian, vec![0.0]).is_err());
        assert!(KernelSpec::new(KernelKind::Gaussian, vec![-1.0]).is_err());
        assert!(KernelSpec::new(KernelKind::Gaussian, vec![]).is_err());
    }

    fn continuous_episode(points: Vec<Vec<f64>>) -> Episode<Vec<f64>, Vec<f64>> {
        let n = points.len() - 1;
        Episode {
            states: points,
            actions: vec![vec![0.0]; n],
            rewards: vec![0.0; n],
            terminated: false,
        }
    }

    #[test]
    fn single_sample_kde_evaluates_to_kernel_peak() {
        let buf = ExperienceBuffer::from_episodes(vec![continuous_episode(vec![vec![0.0]])]);
        let spec = KernelSpec::new(KernelKind::Gaussian, vec![1.0]).unwrap();
        let field = kde_density(&buf, 0.9, spec.clone()).unwrap();
        let at_zero = eval_density(&field, StateQuery::Point(&[0.0])).unwrap();
        assert!((at_zero - kernel_value(&spec, &[0.0]).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn kde_mass_matches_weighted_sample_mass_by_quadrature() {
        let eps = vec![
            continuous_episode(vec![vec![0.0], vec![0.4], vec![0.9]]),
            continuous_episode(vec![vec![-0.5], vec![0.2]]),
        ];
        let buf = ExperienceBuffer::from_episodes(eps);
        let gamma = 0.9;
        let expected_mass = buf.total_weight(gamma) / 2.0;
        for kind in [KernelKind::Gaussian, KernelKind::Epanechnikov, KernelKind::Spheric] {
            let spec = KernelSpec::new(kind, vec![0.3]).unwrap();
            let field = kde_density(&buf, gamma, spec).unwrap();
            // Trapezoid rule over a box wide enough to hold all the mass.
            let (lo, hi, steps) = (-6.0, 6.0, 4800);
            let dx = (hi - lo) / steps as f64;
            let mut integral = 0.0;
            for i in 0..=steps {
                let x = lo + i as f64 * dx;
                let v = eval_density(&field, StateQuery::Point(&[x])).unwrap();
                let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
                integral += w * v * dx;
            }
            assert!(
                (integral - expected_mass).abs() < 1e-2,
                "{kind:?}: integral {integral} vs mass {expected_mass}"
            );
        }
    }

    #[test]
    fn kde_eval_matches_direct_recomputation() {
        let eps = vec![continuous_episode(vec![vec![0.1, -0.2], vec![0.5, 0.3]])];
        let buf = ExperienceBuffer::from_episodes(eps);
        let spec = KernelSpec::new(KernelKind::Gaussian, vec![0.4, 0.7]).unwrap();
        let field = kde_density(&buf, 0.8, spec.clone()).unwrap();
        let q = [0.25, 0.0];
        let direct = kernel_value(&spec, &[q[0] - 0.1, q[1] + 0.2]).unwrap()
            + 0.8 * kernel_value(&spec, &[q[0] - 0.5, q[1] - 0.3]).unwrap();
        let got = eval_density(&field, StateQuery::Point(&q)).unwrap();
        assert!((got - direct).abs() < 1e-12);
    }

    #[test]
    fn eval_density_checks_variant_and_range() {
        let tab = DensityField::Tabular(vec![1.0, 0.9]);
        assert_eq!(eval_density(&tab, StateQuery::Id(1)).unwrap(), 0.9);
        assert!(eval_density(&tab, StateQuery::Id(2)).is_err());
        assert!(eval_density(&tab, StateQuery::Point(&[0.0])).is_err());
    }

    #[test]
    fn scott_bandwidth_hand_check() {
        // Four 1-D points with mean 0 and population variance 2.5.
        let pts = vec![vec![-2.0], vec![-1.0], vec![1.0], vec![2.0]];
        let h = scott_bandwidth(&pts).unwrap();
        let expect = 2.5_f64.sqrt() * 4.0_f64.powf(-1.0 / 5.0);
        assert!((h[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn scott_bandwidth_floors_degenerate_dims() {
        let pts = vec![vec![1.0, 0.0], vec![1.0, 2.0]];
        let h = scott_bandwidth(&pts).unwrap();
        assert!(h[0] > 0.0 && h[0] < 1e-5);
        assert!(h[1] > 0.5);
    }

    #[test]
    fn thinning_preserves_total_mass() {
        let eps = vec![continuous_episode(
            (0..40).map(|i| vec![i as f64 * 0.1]).collect(),
        )];
        let buf = ExperienceBuffer::from_episodes(eps);
        let spec = KernelSpec::new(KernelKind::Gaussian, vec![0.5]).unwrap();
        let field = kde_density(&buf, 0.95, spec).unwrap();
        let kde = field.as_kernel().unwrap();
        let thinned = kde.thin_to(10).unwrap();
        assert!(thinned.n_samples() <= 10);
        assert!((thinned.total_weight() - kde.total_weight()).abs() < 1e-12);
    }

    #[test]
    fn ema_blend_mixes_tabular_fields() {
        let a = DensityField::Tabular(vec![1.0, 0.0]);
        let b = DensityField::Tabular(vec![0.0, 1.0]);
        let out = ema_blend(&a, &b, 0.25).unwrap();
        assert_eq!(out.as_tabular().unwrap(), &[0.25, 0.75]);
        // beta = 0 means smoothing off: current field passes through.
        let off = ema_blend(&a, &b, 0.0).unwrap();
        assert_eq!(off.as_tabular().unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn ema_blend_on_kernel_fields_is_pointwise_convex() {
        let b1 = ExperienceBuffer::from_episodes(vec![continuous_episode(vec![vec![0.0]])]);
        let b2 = ExperienceBuffer::from_episodes(vec![continuous_episode(vec![vec![1.0]])]);
        let spec = KernelSpec::new(KernelKind::Gaussian, vec![0.5]).unwrap();
        let f1 = kde_density(&b1, 0.9, spec.clone()).unwrap();
        let f2 = kde_density(&b2, 0.9, spec).unwrap();
        let mix = ema_blend(&f1, &f2, 0.3).unwrap();
        for q in [-0.5, 0.0, 0.7, 1.3] {
            let v1 = eval_density(&f1, StateQuery::Point(&[q])).unwrap();
            let v2 = eval_density(&f2, StateQuery::Point(&[q])).unwrap();
            let vm = eval_density(&mix, StateQuery::Point(&[q])).unwrap();
            assert!((vm - (0.3 * v1 + 0.7 * v2)).abs() < 1e-12);
        }
    }

    #[test]
    fn tabular_csv_roundtrip() {
        let field = DensityField::Tabular(vec![1.0, 0.9, 0.0, 0.25]);
        let text = density_to_csv(&field);
        assert!(text.starts_with("state_id,density\n"));
        let back = density_from_csv(&text).unwrap();
        assert_eq!(back.as_tabular().unwrap(), field.as_tabular().unwrap());
    }

    #[test]
    fn kernel_csv_roundtrip() {
        let kde = KdeField {
            kernel: KernelSpec::new(KernelKind::Epanechnikov, vec![0.5, 0.25]).unwrap(),
            samples: vec![0.1, 0.2, -0.3, 0.4],
            weights: vec![1.0, 0.9],
        };
        let text = density_to_csv(&DensityField::KernelSampled(kde.clone()));
        let back = density_from_csv(&text).unwrap();
        let back = back.as_kernel().unwrap();
        assert_eq!(back.kernel, kde.kernel);
        assert_eq!(back.samples, kde.samples);
        assert_eq!(back.weights, kde.weights);
    }

    proptest! {
        #[test]
        fn kernels_integrate_to_one(
            h in 0.2_f64..3.0,
            kind_idx in 0_usize..3,
        ) {
            let kind = [KernelKind::Gaussian, KernelKind::Epanechnikov, KernelKind::Spheric][kind_idx];
            let spec = KernelSpec::new(kind, vec![h]).unwrap();
            let (lo, hi, steps) = (-8.0 * h, 8.0 * h, 2000);
            let dx = (hi - lo) / steps as f64;
            let mut integral = 0.0;
            for i in 0..=steps {
                let x = lo + i as f64 * dx;
                let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
                integral += w * kernel_value(&spec, &[x]).unwrap() * dx;
            }
            prop_assert!((integral - 1.0).abs() < 1e-2, "kind {:?} h {} integral {}", kind, h, integral);
        }

        #[test]
        fn kernel_values_are_nonnegative(
            u in -10.0_f64..10.0,
            h in 0.1_f64..4.0,
            kind_idx in 0_usize..3,
        ) {
            let kind = [KernelKind::Gaussian, KernelKind::Epanechnikov, KernelKind::Spheric][kind_idx];
            let spec = KernelSpec::new(kind, vec![h]).unwrap();
            prop_assert!(kernel_value(&spec, &[u]).unwrap() >= 0.0);
        }
    }
}
