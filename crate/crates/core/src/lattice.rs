//! Square lattice of coupled double-well oscillators.
//!
//! The Hamiltonian is
//!
//! ```text
//! H = sum_ij [ p_ij^2/2 - u_ij^2/2 + u_ij^4/4 + 1/4 + F_ij ]
//! F_ij = sum_{k=+-1} 1/4 [ (u_{i+k,j} - u_ij)^2 + (u_{i,j+k} - u_ij)^2 ]
//! ```
//!
//! with periodic wrapping of the neighbor indices. Each bond (a, b) shows up
//! in both F_a and F_b with weight 1/4, so it contributes (u_a - u_b)^2 / 2 to
//! H in total. Differentiating that bond term by u_a gives (u_a - u_b), which
//! is why the force carries the plain lattice Laplacian with unit coefficient:
//!
//! ```text
//! -dH/du_ij = u_ij - u_ij^3 + sum_{nb} (u_nb - u_ij)
//! ```
//!
//! # Floating-point contract
//!
//! Backward integration only recovers the imprinted image when the decrypting
//! machine reproduces the encrypting machine's arithmetic bit for bit. The
//! integration path therefore uses plain binary64 `+ - *` in a fixed
//! row-major order, with a fixed association of every sum. Rust never
//! contracts `a * b + c` into a fused multiply-add on its own and does not
//! reassociate float arithmetic, so nothing here may call `mul_add` or use
//! iterator sums whose order could change. The conformance vectors in
//! `data/conformance_v1.txt` pin the resulting bit patterns.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// Any |u| beyond this is treated as a corrupted state.
pub const BLOWUP_LIMIT: f64 = 1e6;

/// Physical and numerical parameters of a lattice run.
///
/// Times are stored as step counts so that `tau` and `burn_in` never depend on
/// how `h * steps` rounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimParams {
    pub n: usize,
    pub h: f64,
    pub temperature: f64,
    pub burn_in_steps: u64,
    pub tau_steps: u64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            n: 69,
            h: 0.01,
            temperature: 0.9,
            burn_in_steps: 20_000,
            tau_steps: 35_000,
        }
    }
}

impl SimParams {
    /// Builds parameters from times in time units. Both times must be integer
    /// multiples of `h`.
    pub fn from_times(n: usize, h: f64, temperature: f64, burn_in: f64, tau: f64) -> Result<Self> {
        let params = Self {
            n,
            h,
            temperature,
            burn_in_steps: time_to_steps(burn_in, h)?,
            tau_steps: time_to_steps(tau, h)?,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 8 {
            return Err(Error::InvalidParams(format!("N = {} is below 8", self.n)));
        }
        if self.n > u16::MAX as usize {
            return Err(Error::InvalidParams(format!("N = {} is too large", self.n)));
        }
        if !(self.h > 0.0 && self.h <= 0.05) {
            return Err(Error::InvalidParams(format!("h = {} outside (0, 0.05]", self.h)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "T = {} must be positive",
                self.temperature
            )));
        }
        if self.burn_in_steps == 0 {
            return Err(Error::InvalidParams("burn-in must be positive".into()));
        }
        Ok(())
    }

    pub fn beta(&self) -> f64 {
        1.0 / self.temperature
    }

    pub fn sites(&self) -> usize {
        self.n * self.n
    }

    pub fn burn_in_time(&self) -> f64 {
        self.burn_in_steps as f64 * self.h
    }

    pub fn tau_time(&self) -> f64 {
        self.tau_steps as f64 * self.h
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn with_tau_steps(mut self, tau_steps: u64) -> Self {
        self.tau_steps = tau_steps;
        self
    }

    pub fn with_burn_in_steps(mut self, burn_in_steps: u64) -> Self {
        self.burn_in_steps = burn_in_steps;
        self
    }

    /// Number of steps covering `time` time units, rejecting non-multiples of h.
    pub fn steps_for(&self, time: f64) -> Result<u64> {
        time_to_steps(time, self.h)
    }
}

fn time_to_steps(time: f64, h: f64) -> Result<u64> {
    if !(time >= 0.0 && time.is_finite()) || !(h > 0.0) {
        return Err(Error::InvalidParams(format!("time {time} with step {h}")));
    }
    let ratio = time / h;
    let steps = ratio.round();
    if (ratio - steps).abs() > 1e-6 {
        return Err(Error::InvalidParams(format!(
            "time {time} is not a multiple of h = {h}"
        )));
    }
    Ok(steps as u64)
}

/// Which force law drives the integrator.
///
/// `UncoupledHarmonic` (force = -u, no coupling) exists as an integrable
/// control for the Lyapunov estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dynamics {
    #[default]
    DoubleWell,
    UncoupledHarmonic,
}

/// Coordinates and momenta of every site, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeState {
    pub u: Vec<f64>,
    pub p: Vec<f64>,
    /// Net number of Verlet steps applied since construction.
    pub steps: u64,
    pub params: SimParams,
}

impl LatticeState {
    pub fn uniform(params: SimParams, u: f64, p: f64) -> Self {
        let sites = params.sites();
        Self {
            u: vec![u; sites],
            p: vec![p; sites],
            steps: 0,
            params,
        }
    }

    pub fn from_planes(params: SimParams, u: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        let sites = params.sites();
        for plane in [&u, &p] {
            if plane.len() != sites {
                return Err(Error::DimMismatch {
                    expected: sites,
                    got: plane.len(),
                });
            }
        }
        Ok(Self {
            u,
            p,
            steps: 0,
            params,
        })
    }

    pub fn n(&self) -> usize {
        self.params.n
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.params.n + j
    }

    /// Simulation time in time units.
    pub fn time(&self) -> f64 {
        self.steps as f64 * self.params.h
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.p).all(|x| x.is_finite())
    }

    pub fn total_energy(&self) -> f64 {
        let n = self.params.n;
        let mut energy = 0.0;
        for i in 0..n {
            let up = (i + n - 1) % n;
            let down = (i + 1) % n;
            for j in 0..n {
                let left = (j + n - 1) % n;
                let right = (j + 1) % n;
                let x = self.u[i * n + j];
                let mom = self.p[i * n + j];
                let x2 = x * x;
                let onsite = 0.5 * mom * mom - 0.5 * x2 + 0.25 * x2 * x2 + 0.25;
                let d_up = self.u[up * n + j] - x;
                let d_down = self.u[down * n + j] - x;
                let d_left = self.u[i * n + left] - x;
                let d_right = self.u[i * n + right] - x;
                let coupling =
                    0.25 * (d_up * d_up + d_down * d_down + d_left * d_left + d_right * d_right);
                energy += onsite + coupling;
            }
        }
        energy
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.p.iter().map(|p| 0.5 * p * p).sum()
    }

    /// -dH/du at every site.
    pub fn compute_forces(&self) -> Vec<f64> {
        let mut force = vec![0.0; self.u.len()];
        fill_forces(Dynamics::DoubleWell, self.params.n, &self.u, &mut force);
        force
    }

    /// One velocity-Verlet step of length h.
    pub fn verlet_step(&mut self) -> Result<()> {
        self.integrate(1)
    }

    pub fn integrate(&mut self, steps: u64) -> Result<()> {
        self.integrate_with(Dynamics::DoubleWell, steps)
    }

    /// Applies `steps` velocity-Verlet steps under the given force law.
    ///
    /// The force at the end of one step is reused as the force at the start of
    /// the next; it is the same deterministic function of `u`, so the result is
    /// bitwise identical to calling [`verlet_step`](Self::verlet_step) repeatedly.
    pub fn integrate_with(&mut self, dynamics: Dynamics, steps: u64) -> Result<()> {
        if steps == 0 {
            return Ok(());
        }
        let n = self.params.n;
        let half_h = 0.5 * self.params.h;
        let h = self.params.h;
        let mut force = vec![0.0; self.u.len()];
        fill_forces(dynamics, n, &self.u, &mut force);
        for _ in 0..steps {
            let mut out_of_range = false;
            for ((u, p), f) in self.u.iter_mut().zip(self.p.iter_mut()).zip(&force) {
                *p += half_h * f;
                *u += h * *p;
                // NaN fails the comparison too.
                out_of_range |= !(u.abs() <= BLOWUP_LIMIT);
            }
            self.steps += 1;
            if out_of_range {
                return Err(Error::NumericalBlowup {
                    step: self.steps,
                    limit: BLOWUP_LIMIT,
                });
            }
            fill_forces(dynamics, n, &self.u, &mut force);
            for (p, f) in self.p.iter_mut().zip(&force) {
                *p += half_h * f;
            }
        }
        Ok(())
    }

    /// Flips every momentum. Time bookkeeping is left to the caller.
    pub fn time_reverse(&mut self) {
        for p in &mut self.p {
            *p = -*p;
        }
    }

    /// Evolves forward by `steps`, reverses momenta, evolves back by `steps`
    /// and reverses again, returning to the original direction of motion.
    pub fn loopback(&mut self, steps: u64) -> Result<()> {
        self.integrate(steps)?;
        self.time_reverse();
        self.integrate(steps)?;
        self.time_reverse();
        Ok(())
    }

    pub fn order_parameter(&self) -> f64 {
        order_parameter_of(&self.u)
    }

    pub fn sign_field(&self) -> SignField {
        SignField::from_coordinates(self.params.n, &self.u)
    }

    /// Cyclic shift of both planes by (di, dj) sites.
    pub fn shifted(&self, di: usize, dj: usize) -> Self {
        let n = self.params.n;
        let mut out = self.clone();
        for i in 0..n {
            for j in 0..n {
                let dst = ((i + di) % n) * n + (j + dj) % n;
                out.u[dst] = self.u[i * n + j];
                out.p[dst] = self.p[i * n + j];
            }
        }
        out
    }
}

fn order_parameter_of(u: &[f64]) -> f64 {
    if u.is_empty() {
        return 0.0;
    }
    let sum: i64 = u.iter().map(|&x| if x >= 0.0 { 1i64 } else { -1 }).sum();
    sum.unsigned_abs() as f64 / u.len() as f64
}

fn fill_forces(dynamics: Dynamics, n: usize, u: &[f64], force: &mut [f64]) {
    match dynamics {
        Dynamics::DoubleWell => double_well_forces(n, u, force),
        Dynamics::UncoupledHarmonic => {
            for (f, x) in force.iter_mut().zip(u) {
                *f = -*x;
            }
        }
    }
}

fn double_well_forces(n: usize, u: &[f64], force: &mut [f64]) {
    debug_assert_eq!(u.len(), n * n);
    for i in 0..n {
        let row = i * n;
        let up = ((i + n - 1) % n) * n;
        let down = ((i + 1) % n) * n;
        for j in 0..n {
            let left = if j == 0 { n - 1 } else { j - 1 };
            let right = if j + 1 == n { 0 } else { j + 1 };
            let x = u[row + j];
            let coupling = (u[up + j] - x) + (u[down + j] - x) + (u[row + left] - x)
                + (u[row + right] - x);
            force[row + j] = x - x * x * x + coupling;
        }
    }
}

/// Momentum variance of the initial draw, in units of T.
///
/// Starting from `u = 1` the lattice shares the injected kinetic energy with
/// the potential and coupling terms, so the equilibrium temperature lands
/// below the nominal one. A factor of 1.7 puts the order-parameter crossover
/// near T = 1 and gives T = 0.9 its critical mix of domains; with a factor of
/// 1 the lattice stays ordered at 0.9, with 2 it is disordered and the
/// loopback horizon falls under 300 time units.
pub const MOMENTUM_VARIANCE_FACTOR: f64 = 1.7;

/// Draws Gaussian momenta with variance `MOMENTUM_VARIANCE_FACTOR * T` on top
/// of `u = 1` at every site.
///
/// Box-Muller over a ChaCha20 stream seeded from the 64-bit seed. The
/// generator only has to be reproducible on the encrypting machine; decryption
/// never replays it.
pub fn initial_state(params: SimParams, seed: u64) -> Result<LatticeState> {
    initial_state_scaled(params, seed, MOMENTUM_VARIANCE_FACTOR)
}

/// As [`initial_state`] with an explicit variance factor.
pub fn initial_state_scaled(params: SimParams, seed: u64, factor: f64) -> Result<LatticeState> {
    params.validate()?;
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::InvalidParams(format!("momentum variance factor {factor}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let sigma = (factor * params.temperature).sqrt();
    let sites = params.sites();
    let mut p = Vec::with_capacity(sites + 1);
    while p.len() < sites {
        let (a, b) = box_muller(&mut rng);
        p.push(sigma * a);
        p.push(sigma * b);
    }
    p.truncate(sites);
    LatticeState::from_planes(params, vec![1.0; sites], p)
}

/// Initial state followed by `burn_in_steps` of free evolution.
pub fn thermalize(params: SimParams, seed: u64) -> Result<LatticeState> {
    let mut state = initial_state(params, seed)?;
    state.integrate(params.burn_in_steps)?;
    Ok(state)
}

pub(crate) fn box_muller<R: Rng>(rng: &mut R) -> (f64, f64) {
    // u1 in (0, 1] keeps ln finite.
    let u1 = 1.0 - rng.gen::<f64>();
    let u2 = rng.gen::<f64>();
    let radius = (-2.0 * u1.ln()).sqrt();
    let angle = std::f64::consts::TAU * u2;
    (radius * angle.cos(), radius * angle.sin())
}

/// Signs of the coordinates; `true` is '+', with u = 0 counted as '+'.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SignField {
    pub n: usize,
    pub bits: Vec<bool>,
}

impl SignField {
    pub fn from_coordinates(n: usize, u: &[f64]) -> Self {
        Self {
            n,
            bits: u.iter().map(|&x| x >= 0.0).collect(),
        }
    }

    pub fn from_bits(n: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != n * n {
            return Err(Error::DimMismatch {
                expected: n * n,
                got: bits.len(),
            });
        }
        Ok(Self { n, bits })
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn complement(&self) -> Self {
        Self {
            n: self.n,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn positive_fraction(&self) -> f64 {
        self.bits.iter().filter(|&&b| b).count() as f64 / self.bits.len() as f64
    }

    pub fn order_parameter(&self) -> f64 {
        let plus = self.bits.iter().filter(|&&b| b).count() as i64;
        let minus = self.bits.len() as i64 - plus;
        (plus - minus).unsigned_abs() as f64 / self.bits.len() as f64
    }
}

/// Parsed integrator conformance vectors.
///
/// The initial state is built from raw generator bits with exact dyadic
/// arithmetic only, so the whole check exercises nothing but the integrator.
#[derive(Debug, Clone, PartialEq)]
pub struct ConformanceVectors {
    pub seed: u64,
    pub params: SimParams,
    pub steps: u64,
    pub sites: Vec<(usize, usize)>,
    pub expected: Vec<u64>,
}

/// Site list whose u bit patterns are recorded in the conformance file.
pub fn conformance_sites(n: usize) -> Vec<(usize, usize)> {
    (0..16).map(|k| ((k * 17 + 3) % n, (k * 29 + 11) % n)).collect()
}

/// Deterministic non-thermal start used by the conformance check.
pub fn conformance_state(params: SimParams, seed: u64) -> LatticeState {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let sites = params.sites();
    let mut unit = || (rng.gen::<u64>() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    let u: Vec<f64> = (0..sites).map(|_| 1.0 + (unit() - 0.5)).collect();
    let p: Vec<f64> = (0..sites).map(|_| 2.0 * (unit() - 0.5)).collect();
    LatticeState {
        u,
        p,
        steps: 0,
        params,
    }
}

impl ConformanceVectors {
    pub fn compute(params: SimParams, seed: u64, steps: u64) -> Result<Self> {
        let mut state = conformance_state(params, seed);
        state.integrate(steps)?;
        let sites = conformance_sites(params.n);
        let expected = sites
            .iter()
            .map(|&(i, j)| state.u[state.index(i, j)].to_bits())
            .collect();
        Ok(Self {
            seed,
            params,
            steps,
            sites,
            expected,
        })
    }

    /// Recomputes the trajectory and lists the sites whose bits differ.
    pub fn verify(&self) -> Result<Vec<(usize, usize)>> {
        let fresh = Self::compute(self.params, self.seed, self.steps)?;
        Ok(self
            .sites
            .iter()
            .zip(self.expected.iter().zip(&fresh.expected))
            .filter(|(_, (a, b))| a != b)
            .map(|(site, _)| *site)
            .collect())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# pcv integrator conformance vectors, format 1\n");
        out.push_str("# header: seed, N, h bits, steps; then u bits at the designated sites\n");
        out.push_str(&format!("{:016x}\n", self.seed));
        out.push_str(&format!("{:016x}\n", self.params.n as u64));
        out.push_str(&format!("{:016x}\n", self.params.h.to_bits()));
        out.push_str(&format!("{:016x}\n", self.steps));
        for bits in &self.expected {
            out.push_str(&format!("{bits:016x}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let values = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                u64::from_str_radix(l, 16)
                    .map_err(|e| Error::InvalidParams(format!("bad conformance line {l:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != 20 {
            return Err(Error::InvalidParams(format!(
                "conformance file has {} values, expected 20",
                values.len()
            )));
        }
        let params = SimParams {
            n: values[1] as usize,
            h: f64::from_bits(values[2]),
            ..SimParams::default()
        };
        params.validate()?;
        Ok(Self {
            seed: values[0],
            params,
            steps: values[3],
            sites: conformance_sites(params.n),
            expected: values[4..].to_vec(),
        })
    }
}

/// Shipped reference vectors.
pub const CONFORMANCE_V1: &str = include_str!("../data/conformance_v1.txt");
