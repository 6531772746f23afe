//! Measurements backing the physics claims: order-parameter sweeps, the
//! largest Lyapunov exponent, loopback fidelity versus protection time,
//! single-site detuning, and domain statistics of sign fields.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::glyphs::{imprint_conserving, layout_text, Deformation, GlyphMask};
use crate::lattice::{thermalize, Dynamics, LatticeState, SignField, SimParams};

/// Mask fidelity a loopback must reach to count as a recovery.
pub const RECOVERY_THRESHOLD: f64 = 0.99;

/// Fraction of sites (optionally restricted to the mask strokes) where the two
/// fields agree.
pub fn recovery_fidelity(a: &SignField, b: &SignField, region: Option<&GlyphMask>) -> Result<f64> {
    if a.n != b.n || a.bits.len() != b.bits.len() {
        return Err(Error::DimMismatch {
            expected: a.bits.len(),
            got: b.bits.len(),
        });
    }
    let (agree, total) = match region {
        Some(mask) => {
            if mask.bits.len() != a.bits.len() {
                return Err(Error::DimMismatch {
                    expected: a.bits.len(),
                    got: mask.bits.len(),
                });
            }
            a.bits
                .iter()
                .zip(&b.bits)
                .zip(&mask.bits)
                .filter(|(_, &m)| m)
                .fold((0usize, 0usize), |(ok, n), ((x, y), _)| (ok + (x == y) as usize, n + 1))
        }
        None => (
            a.bits.iter().zip(&b.bits).filter(|(x, y)| x == y).count(),
            a.bits.len(),
        ),
    };
    if total == 0 {
        return Ok(1.0);
    }
    Ok(agree as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub temperature: f64,
    pub m_mean: f64,
    pub m_std: f64,
    pub replicas: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// Lowest temperature whose mean order parameter falls below `level`.
    pub fn crossing(&self, level: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.m_mean < level).map(|r| r.temperature)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("T,M_mean,M_std,replicas\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.6},{:.6},{}", r.temperature, r.m_mean, r.m_std, r.replicas);
        }
        out
    }
}

/// Time-averaging window after burn-in, in time units, sampled every 1 t.u.
pub const SWEEP_AVERAGE_TIME: u64 = 100;

/// Thermalizes `replicas` states per temperature and averages M over a
/// further 100 t.u. Replica `r` at grid index `k` uses seed
/// `seed + 1000 * k + r`.
pub fn sweep_order_parameter(
    params: SimParams,
    temperatures: &[f64],
    replicas: usize,
    seed: u64,
) -> Result<SweepResult> {
    if replicas < 3 {
        return Err(Error::InvalidParams(format!("{replicas} replicas; need at least 3")));
    }
    if temperatures.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidParams("temperatures must increase".into()));
    }
    let sample_steps = params.steps_for(1.0)?;
    let jobs: Vec<(usize, usize)> = (0..temperatures.len())
        .flat_map(|k| (0..replicas).map(move |r| (k, r)))
        .collect();
    let averages = jobs
        .par_iter()
        .map(|&(k, r)| {
            let run = params.with_temperature(temperatures[k]);
            let mut state = thermalize(run, seed + 1000 * k as u64 + r as u64)?;
            let mut acc = 0.0;
            for _ in 0..SWEEP_AVERAGE_TIME {
                state.integrate(sample_steps)?;
                acc += state.order_parameter();
            }
            Ok(acc / SWEEP_AVERAGE_TIME as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let rows = temperatures
        .iter()
        .enumerate()
        .map(|(k, &temperature)| {
            let ms = &averages[k * replicas..(k + 1) * replicas];
            let mean = ms.iter().sum::<f64>() / replicas as f64;
            let var = ms.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (replicas - 1) as f64;
            SweepRow {
                temperature,
                m_mean: mean,
                m_std: var.sqrt(),
                replicas,
            }
        })
        .collect();
    Ok(SweepResult { rows })
}

fn phase_distance(a: &LatticeState, b: &LatticeState) -> f64 {
    let mut sum = 0.0;
    for (x, y) in a.u.iter().zip(&b.u).chain(a.p.iter().zip(&b.p)) {
        let d = y - x;
        sum += d * d;
    }
    sum.sqrt()
}

/// Largest Lyapunov exponent of a given starting state, by the two-trajectory
/// method: a copy displaced by `delta0` in one coordinate is evolved
/// alongside, and the separation is rescaled to `delta0` every time unit.
pub fn lyapunov_from_state(
    start: &LatticeState,
    dynamics: Dynamics,
    horizon: f64,
    delta0: f64,
) -> Result<f64> {
    if !(horizon >= 1.0) {
        return Err(Error::InvalidParams(format!("horizon {horizon} too short")));
    }
    if !(delta0 > 0.0 && delta0 <= 1e-8) {
        return Err(Error::InvalidParams(format!("delta0 {delta0} outside (0, 1e-8]")));
    }
    let params = start.params;
    let interval = params.steps_for(1.0)?;
    let periods = horizon.floor() as u64;
    let mut base = start.clone();
    let mut shadow = start.clone();
    let centre = shadow.index(params.n / 2, params.n / 2);
    shadow.u[centre] += delta0;
    let mut log_sum = 0.0;
    for _ in 0..periods {
        base.integrate_with(dynamics, interval)?;
        shadow.integrate_with(dynamics, interval)?;
        let d = phase_distance(&base, &shadow);
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::DegenerateSeparation);
        }
        log_sum += (d / delta0).ln();
        let scale = delta0 / d;
        for (s, b) in shadow.u.iter_mut().zip(&base.u) {
            *s = b + (*s - b) * scale;
        }
        for (s, b) in shadow.p.iter_mut().zip(&base.p) {
            *s = b + (*s - b) * scale;
        }
    }
    Ok(log_sum / (periods as f64 * interval as f64 * params.h))
}

/// Thermalizes with `seed` and measures the largest Lyapunov exponent over
/// `horizon` time units (at least 100).
pub fn estimate_lyapunov(params: SimParams, seed: u64, horizon: f64, delta0: f64) -> Result<f64> {
    if !(horizon >= 100.0) {
        return Err(Error::InvalidParams(format!("horizon {horizon} below 100 t.u.")));
    }
    let start = thermalize(params, seed)?;
    lyapunov_from_state(&start, Dynamics::DoubleWell, horizon, delta0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopbackRow {
    pub tau: f64,
    pub fidelity_mask: f64,
    pub fidelity_full: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoopbackProfile {
    pub rows: Vec<LoopbackRow>,
    /// Largest grid τ such that it and every smaller grid point recover the
    /// mask at [`RECOVERY_THRESHOLD`]; zero if even the first fails.
    pub tau_star: f64,
}

impl LoopbackProfile {
    pub fn from_rows(rows: Vec<LoopbackRow>) -> Self {
        let tau_star = rows
            .iter()
            .take_while(|r| r.fidelity_mask >= RECOVERY_THRESHOLD)
            .last()
            .map_or(0.0, |r| r.tau);
        Self { rows, tau_star }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,fidelity_mask,fidelity_full\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.6},{:.6}", r.tau, r.fidelity_mask, r.fidelity_full);
        }
        out
    }
}

/// Builds the imprinted state used by the loopback and detuning experiments.
pub fn prepare_isk(
    params: SimParams,
    seed: u64,
    text: &str,
    deformation: Deformation,
) -> Result<(LatticeState, GlyphMask)> {
    let state = thermalize(params, seed)?;
    let mask = layout_text(text, params.n, deformation)?;
    let (isk, _) = imprint_conserving(&state, &mask)?;
    Ok((isk, mask))
}

/// Loopback fidelity of an imprinted state over a grid of protection times
/// (in time units, increasing).
pub fn loopback_profile(isk: &LatticeState, mask: &GlyphMask, tau_grid: &[f64]) -> Result<LoopbackProfile> {
    if tau_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidParams("tau grid must increase".into()));
    }
    let origin = isk.sign_field();
    let steps = tau_grid
        .iter()
        .map(|&t| isk.params.steps_for(t))
        .collect::<Result<Vec<u64>>>()?;
    // The forward leg is shared: integration composes bitwise.
    let mut forward = isk.clone();
    let mut done = 0;
    let mut finals = Vec::with_capacity(steps.len());
    for &s in &steps {
        forward.integrate(s - done)?;
        done = s;
        finals.push(forward.clone());
    }
    let rows = finals
        .into_par_iter()
        .zip(tau_grid.par_iter().zip(steps.par_iter()))
        .map(|(mut state, (&tau, &s))| {
            state.time_reverse();
            state.integrate(s)?;
            let restored = state.sign_field();
            Ok(LoopbackRow {
                tau,
                fidelity_mask: recovery_fidelity(&restored, &origin, Some(mask))?,
                fidelity_full: recovery_fidelity(&restored, &origin, None)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoopbackProfile::from_rows(rows))
}

pub fn estimate_loopback(
    params: SimParams,
    seed: u64,
    tau_grid: &[f64],
    text: &str,
    deformation: Deformation,
) -> Result<LoopbackProfile> {
    let (isk, mask) = prepare_isk(params, seed, text, deformation)?;
    loopback_profile(&isk, &mask, tau_grid)
}

/// Adds `delta` to u at `site` of a copy of the final state, then integrates
/// back over the protection time and returns the recovered signs.
pub fn detune_experiment(fs: &LatticeState, site: (usize, usize), delta: f64) -> Result<SignField> {
    let n = fs.n();
    if site.0 >= n || site.1 >= n {
        return Err(Error::InvalidParams(format!("site {site:?} outside {n}x{n}")));
    }
    let mut state = fs.clone();
    let k = state.index(site.0, site.1);
    state.u[k] += delta;
    state.time_reverse();
    state.integrate(fs.params.tau_steps)?;
    Ok(state.sign_field())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DomainStats {
    /// Cluster size -> number of clusters of that size.
    pub histogram: BTreeMap<usize, usize>,
    pub cluster_count: usize,
    pub mean_size: f64,
    /// Sign correlation at lags 1..=N/2, averaged over both lattice axes.
    pub correlations: Vec<f64>,
}

impl DomainStats {
    pub fn sizes(&self) -> Vec<usize> {
        self.histogram
            .iter()
            .flat_map(|(&size, &count)| std::iter::repeat_n(size, count))
            .collect()
    }

    pub fn largest(&self) -> usize {
        self.histogram.keys().next_back().copied().unwrap_or(0)
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Same-sign cluster labels under 4-connectivity with periodic wrapping.
pub fn label_domains(field: &SignField) -> Vec<usize> {
    let n = field.n;
    let mut parent: Vec<usize> = (0..n * n).collect();
    let union = |parent: &mut Vec<usize>, a: usize, b: usize| {
        let (ra, rb) = (find(parent, a), find(parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    };
    for i in 0..n {
        for j in 0..n {
            let here = i * n + j;
            let right = i * n + (j + 1) % n;
            let down = ((i + 1) % n) * n + j;
            if field.bits[here] == field.bits[right] {
                union(&mut parent, here, right);
            }
            if field.bits[here] == field.bits[down] {
                union(&mut parent, here, down);
            }
        }
    }
    (0..n * n).map(|k| find(&mut parent, k)).collect()
}

pub fn domain_size_stats(field: &SignField) -> DomainStats {
    let n = field.n;
    if n == 0 {
        return DomainStats::default();
    }
    let labels = label_domains(field);
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in &labels {
        *sizes.entry(l).or_default() += 1;
    }
    let mut histogram = BTreeMap::new();
    for &size in sizes.values() {
        *histogram.entry(size).or_default() += 1;
    }
    let cluster_count = sizes.len();
    let spin = |k: usize| if field.bits[k] { 1.0 } else { -1.0 };
    let correlations = (1..=n / 2)
        .map(|lag| {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let s = spin(i * n + j);
                    acc += s * spin(i * n + (j + lag) % n) + s * spin(((i + lag) % n) * n + j);
                }
            }
            acc / (2 * n * n) as f64
        })
        .collect();
    DomainStats {
        histogram,
        cluster_count,
        mean_size: (n * n) as f64 / cluster_count as f64,
        correlations,
    }
}

/// Two-sample Kolmogorov-Smirnov statistic and its asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    if a.is_empty() || b.is_empty() {
        return (0.0, 1.0);
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / x.len() as f64 - j as f64 / y.len() as f64).abs());
    }
    let ne = (x.len() * y.len()) as f64 / (x.len() + y.len()) as f64;
    let sq = ne.sqrt();
    let lambda = (sq + 0.12 + 0.11 / sq) * d;
    (d, kolmogorov_q(lambda))
}

/// Survival function of the Kolmogorov distribution.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let term = sign * (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
