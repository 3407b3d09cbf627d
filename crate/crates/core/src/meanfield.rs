//! Limiting occupation-probability equations on a uniform torus grid.
//!
//! Torus integrals are left Riemann sums over `u_j = (j+1)/M`, so every
//! column of the right-hand side sums to zero and the grid mass functional is
//! an exact invariant of the semi-discrete system (up to truncation for
//! infinite capacity).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Capacity, RatePolicy};
use crate::torus::{site_coordinate, TorusFn};

pub const MIN_GRID: usize = 8;
/// Largest Poisson tail beyond `kmax` accepted by [`init_profile`].
pub const TRUNCATION_TAIL: f64 = 1e-12;
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;
pub const NEGATIVITY_TOLERANCE: f64 = 1e-6;
/// `tail_check` flags a first-moment tail above this at `kmax/2`.
pub const TAIL_FLAG: f64 = 1e-8;
/// Stability precheck: `dt` times the largest total rate must stay below this.
pub const STABILITY_LIMIT: f64 = 0.5;

/// `values[k * M + j] = rho_k(u_j)` for `0 <= k <= kmax`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityProfile {
    pub grid: usize,
    pub kmax: usize,
    pub capacity: Capacity,
    pub time: f64,
    pub values: Vec<f64>,
    /// Largest pmf mass dropped at a grid point when the initial law was
    /// renormalized over `0..=kmax`.
    pub truncated_mass: f64,
}

impl DensityProfile {
    pub fn new(grid: usize, kmax: usize, capacity: Capacity, values: Vec<f64>) -> Result<Self> {
        if grid == 0 {
            return Err(Error::Domain("grid size must be positive".into()));
        }
        if let Capacity::Finite(k) = capacity {
            if kmax != k as usize {
                return Err(Error::Domain(format!(
                    "kmax {kmax} must equal the capacity {k}"
                )));
            }
        }
        if values.len() != (kmax + 1) * grid {
            return Err(Error::Domain(format!(
                "expected {} values, got {}",
                (kmax + 1) * grid,
                values.len()
            )));
        }
        Ok(Self {
            grid,
            kmax,
            capacity,
            time: 0.0,
            values,
            truncated_mass: 0.0,
        })
    }

    #[inline]
    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.values[k * self.grid + j]
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.grid..(k + 1) * self.grid]
    }

    pub fn coordinates(&self) -> Vec<f64> {
        (0..self.grid)
            .map(|j| site_coordinate(j, self.grid))
            .collect()
    }

    /// `max_j |sum_k rho_k(u_j) - 1|`.
    pub fn normalization_error(&self) -> f64 {
        (0..self.grid)
            .map(|j| ((0..=self.kmax).map(|k| self.get(k, j)).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// `(1/M) sum_j sum_k k rho_k(u_j)`.
    pub fn mass(&self) -> f64 {
        (0..=self.kmax)
            .map(|k| k as f64 * self.row(k).iter().sum::<f64>())
            .sum::<f64>()
            / self.grid as f64
    }

    /// `(1/M) sum_j rho_k(u_j) f(u_j)`.
    pub fn integrate_against(&self, k: usize, f: &TorusFn) -> f64 {
        if k > self.kmax {
            return 0.0;
        }
        self.row(k)
            .iter()
            .enumerate()
            .map(|(j, r)| r * f.eval(site_coordinate(j, self.grid)))
            .sum::<f64>()
            / self.grid as f64
    }

    /// Pointwise linear interpolation towards `other` with weight `w`.
    pub fn lerp(&self, other: &DensityProfile, w: f64) -> DensityProfile {
        let mut out = self.clone();
        for (a, b) in out.values.iter_mut().zip(&other.values) {
            *a += w * (b - *a);
        }
        out.time = self.time + w * (other.time - self.time);
        out
    }
}

/// Default truncation level `4 max psi + 30`.
pub fn default_kmax(psi_max: f64) -> usize {
    (4.0 * psi_max).ceil() as usize + 30
}

/// Binomial(K, psi/K) pmf for finite capacity, Poisson(psi) pmf truncated at
/// `kmax` and renormalized for infinite capacity.
pub fn init_profile(
    psi: &TorusFn,
    capacity: Capacity,
    kmax: Option<usize>,
    grid: usize,
) -> Result<DensityProfile> {
    if grid < MIN_GRID {
        return Err(Error::Domain(format!(
            "grid size {grid} is below {MIN_GRID}"
        )));
    }
    let psi_values: Vec<f64> = (0..grid)
        .map(|j| psi.eval(site_coordinate(j, grid)))
        .collect();
    for (j, &p) in psi_values.iter().enumerate() {
        let ok = match capacity {
            Capacity::Finite(k) => p > 0.0 && p < f64::from(k),
            Capacity::Infinite => p > 0.0 && p.is_finite(),
        };
        if !ok {
            return Err(Error::Validation(format!(
                "psi({}) = {p} is not admissible for capacity {capacity}",
                site_coordinate(j, grid)
            )));
        }
    }
    let psi_max = psi_values.iter().cloned().fold(0.0, f64::max);
    let kmax = match capacity {
        Capacity::Finite(k) => {
            if let Some(km) = kmax {
                if km != k as usize {
                    return Err(Error::Domain(format!(
                        "kmax {km} must equal the capacity {k}"
                    )));
                }
            }
            k as usize
        }
        Capacity::Infinite => kmax.unwrap_or_else(|| default_kmax(psi_max)),
    };
    let mut values = vec![0.0; (kmax + 1) * grid];
    let mut truncated: f64 = 0.0;
    for (j, &p) in psi_values.iter().enumerate() {
        let pmf = match capacity {
            Capacity::Finite(k) => binomial_pmf(k as usize, p / f64::from(k)),
            Capacity::Infinite => poisson_pmf(p, kmax),
        };
        let total: f64 = pmf.iter().sum();
        if !capacity.is_finite() {
            let tail = 1.0 - total;
            if tail > TRUNCATION_TAIL {
                return Err(Error::Validation(format!(
                    "Poisson({p}) mass {tail:e} beyond kmax = {kmax} exceeds {TRUNCATION_TAIL:e}; raise kmax"
                )));
            }
            truncated = truncated.max(tail.max(0.0));
        }
        for (k, q) in pmf.iter().enumerate() {
            values[k * grid + j] = q / total;
        }
    }
    let mut profile = DensityProfile::new(grid, kmax, capacity, values)?;
    profile.truncated_mass = truncated;
    Ok(profile)
}

pub(crate) fn binomial_pmf(n: usize, p: f64) -> Vec<f64> {
    let mut out = vec![0.0; n + 1];
    if p <= 0.0 {
        out[0] = 1.0;
        return out;
    }
    if p >= 1.0 {
        out[n] = 1.0;
        return out;
    }
    out[0] = (1.0 - p).powi(n as i32);
    let odds = p / (1.0 - p);
    for k in 0..n {
        out[k + 1] = out[k] * (n - k) as f64 / (k + 1) as f64 * odds;
    }
    out
}

pub(crate) fn poisson_pmf(lambda: f64, kmax: usize) -> Vec<f64> {
    let mut out = vec![0.0; kmax + 1];
    out[0] = (-lambda).exp();
    for k in 0..kmax {
        out[k + 1] = out[k] * lambda / (k + 1) as f64;
    }
    out
}

/// Rates sampled on the grid, either as an occupancy table times a kernel
/// matrix or as a full tensor.
#[derive(Debug, Clone)]
enum GridRates {
    Separable {
        /// `g[k * (kmax+1) + l]` with the forced zeros applied.
        g: Vec<f64>,
        /// `w[i * M + j] = kernel(u_i, u_j)`.
        w: Vec<f64>,
    },
    /// `phi[((k * (kmax+1) + l) * M + i) * M + j]`.
    Tensor(Vec<f64>),
}

/// A policy sampled on an `M`-point grid for occupancies `0..=kmax`.
#[derive(Debug, Clone)]
pub struct MeanField {
    grid: usize,
    kmax: usize,
    capacity: Capacity,
    rates: GridRates,
}

/// Largest tensor (in entries) built for policies without a factorisation.
const MAX_TENSOR: usize = 1 << 27;

impl MeanField {
    pub fn new(policy: &RatePolicy, grid: usize, kmax: usize) -> Result<Self> {
        let capacity = policy.capacity();
        if let Capacity::Finite(k) = capacity {
            if kmax != k as usize {
                return Err(Error::Domain(format!(
                    "kmax {kmax} must equal the capacity {k}"
                )));
            }
        }
        let coords: Vec<f64> = (0..grid).map(|j| site_coordinate(j, grid)).collect();
        let levels = kmax + 1;
        let rates = if let Some((law, kernel)) = policy.factors() {
            // rate(k, l, u, v) = g(k, l) * kernel(u, v) with the forced zeros in g
            let mut g = vec![0.0; levels * levels];
            for k in 1..levels {
                for l in 0..levels {
                    let forced = matches!(capacity, Capacity::Finite(c) if l >= c as usize);
                    if !forced {
                        g[k * levels + l] = law.eval(k as u32, l as u32);
                    }
                }
            }
            let mut w = vec![0.0; grid * grid];
            for i in 0..grid {
                for j in 0..grid {
                    w[i * grid + j] = kernel.eval(coords[i], coords[j]);
                }
            }
            GridRates::Separable { g, w }
        } else {
            let size = levels * levels * grid * grid;
            if size > MAX_TENSOR {
                return Err(Error::Resource(format!(
                    "rate tensor with {size} entries is too large; reduce kmax or M"
                )));
            }
            let mut phi = vec![0.0; size];
            for k in 0..levels {
                for l in 0..levels {
                    let base = (k * levels + l) * grid * grid;
                    for i in 0..grid {
                        for j in 0..grid {
                            phi[base + i * grid + j] =
                                policy.rate(k as u32, l as u32, coords[i], coords[j]);
                        }
                    }
                }
            }
            GridRates::Tensor(phi)
        };
        Ok(Self {
            grid,
            kmax,
            capacity,
            rates,
        })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn kmax(&self) -> usize {
        self.kmax
    }

    /// `phi_{k,l}(u_i, u_j)` on the grid.
    #[inline]
    pub fn rate(&self, k: usize, l: usize, i: usize, j: usize) -> f64 {
        let levels = self.kmax + 1;
        match &self.rates {
            GridRates::Separable { g, w } => g[k * levels + l] * w[i * self.grid + j],
            GridRates::Tensor(phi) => phi[((k * levels + l) * self.grid + i) * self.grid + j],
        }
    }

    fn check(&self, profile: &DensityProfile) -> Result<()> {
        if profile.grid != self.grid
            || profile.kmax != self.kmax
            || profile.capacity != self.capacity
        {
            return Err(Error::Domain(format!(
                "profile (M = {}, kmax = {}, K = {}) does not match operator (M = {}, kmax = {}, K = {})",
                profile.grid, profile.kmax, profile.capacity, self.grid, self.kmax, self.capacity
            )));
        }
        Ok(())
    }

    /// Outgoing and incoming rate fields:
    /// `out_k(u_i) = sum_l (1/M) sum_j phi_{k,l}(u_i, u_j) rho_l(u_j)`,
    /// `in_k(u_i) = sum_{l>=1} (1/M) sum_j phi_{l,k}(u_j, u_i) rho_l(u_j)`.
    pub fn flows(&self, rho: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = self.grid;
        let levels = self.kmax + 1;
        let inv_m = 1.0 / m as f64;
        let mut out = vec![0.0; levels * m];
        let mut inn = vec![0.0; levels * m];
        match &self.rates {
            GridRates::Separable { g, w } => {
                // a_l(i) = (1/M) sum_j w(i, j) rho_l(j); b_l(i) = (1/M) sum_j w(j, i) rho_l(j)
                let mut a = vec![0.0; levels * m];
                let mut b = vec![0.0; levels * m];
                for l in 0..levels {
                    let r = &rho[l * m..(l + 1) * m];
                    if r.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let (al, bl) = (&mut a[l * m..(l + 1) * m], &mut b[l * m..(l + 1) * m]);
                    for i in 0..m {
                        let wi = &w[i * m..(i + 1) * m];
                        al[i] = wi.iter().zip(r).map(|(x, y)| x * y).sum::<f64>() * inv_m;
                        let ri = r[i] * inv_m;
                        for (bj, x) in bl.iter_mut().zip(wi) {
                            *bj += x * ri;
                        }
                    }
                }
                for k in 0..levels {
                    for l in 0..levels {
                        let gkl = g[k * levels + l];
                        if gkl != 0.0 {
                            let (ok, al) = (&mut out[k * m..(k + 1) * m], &a[l * m..(l + 1) * m]);
                            ok.iter_mut().zip(al).for_each(|(o, x)| *o += gkl * x);
                        }
                        let glk = g[l * levels + k];
                        if glk != 0.0 {
                            let (ik, bl) = (&mut inn[k * m..(k + 1) * m], &b[l * m..(l + 1) * m]);
                            ik.iter_mut().zip(bl).for_each(|(o, x)| *o += glk * x);
                        }
                    }
                }
            }
            GridRates::Tensor(_) => {
                for k in 0..levels {
                    for l in 0..levels {
                        let rl = &rho[l * m..(l + 1) * m];
                        for i in 0..m {
                            let mut so = 0.0;
                            let mut si = 0.0;
                            for (j, &r) in rl.iter().enumerate() {
                                so += self.rate(k, l, i, j) * r;
                                si += self.rate(l, k, j, i) * r;
                            }
                            out[k * m + i] += so * inv_m;
                            inn[k * m + i] += si * inv_m;
                        }
                    }
                }
            }
        }
        (out, inn)
    }

    /// Time derivative of the profile values. For infinite capacity the loss
    /// `rho_kmax * in_kmax` into the untracked level is dropped.
    pub fn rhs_values(&self, rho: &[f64]) -> Vec<f64> {
        let m = self.grid;
        let kmax = self.kmax;
        let (out, inn) = self.flows(rho);
        let mut d = vec![0.0; rho.len()];
        for k in 0..=kmax {
            for i in 0..m {
                let idx = k * m + i;
                let mut v = -rho[idx] * out[idx];
                if k < kmax || self.capacity.is_finite() {
                    v -= rho[idx] * inn[idx];
                }
                if k >= 1 {
                    v += rho[idx - m] * inn[idx - m];
                }
                if k < kmax {
                    v += rho[idx + m] * out[idx + m];
                }
                d[idx] = v;
            }
        }
        d
    }

    pub fn rhs(&self, profile: &DensityProfile) -> Result<Vec<f64>> {
        self.check(profile)?;
        Ok(self.rhs_values(&profile.values))
    }

    /// `max_{k,i} (out_k + in_k)` for the given values.
    pub fn max_total_rate(&self, rho: &[f64]) -> f64 {
        let (out, inn) = self.flows(rho);
        out.iter().zip(&inn).map(|(a, b)| a + b).fold(0.0, f64::max)
    }

    fn rk4_step(&self, rho: &[f64], h: f64) -> Vec<f64> {
        let k1 = self.rhs_values(rho);
        let stage = |base: &[f64], k: &[f64], c: f64| -> Vec<f64> {
            base.iter().zip(k).map(|(a, b)| a + c * b).collect()
        };
        let k2 = self.rhs_values(&stage(rho, &k1, h / 2.0));
        let k3 = self.rhs_values(&stage(rho, &k2, h / 2.0));
        let k4 = self.rhs_values(&stage(rho, &k3, h));
        rho.iter()
            .enumerate()
            .map(|(i, r)| r + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect()
    }

    /// Fixed-step RK4 over `[profile0.time, profile0.time + horizon]`.
    pub fn integrate(
        &self,
        profile0: &DensityProfile,
        horizon: f64,
        dt: f64,
    ) -> Result<MeanFieldRun> {
        self.check(profile0)?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Domain(format!("dt {dt} must be positive")));
        }
        if !(horizon >= 0.0 && horizon.is_finite()) {
            return Err(Error::Domain(format!(
                "horizon {horizon} must be finite and >= 0"
            )));
        }
        let steps = ((horizon / dt) - 1e-9).ceil().max(0.0) as usize;
        let h = if steps == 0 {
            0.0
        } else {
            horizon / steps as f64
        };
        let lambda = self.max_total_rate(&profile0.values);
        if h * lambda >= STABILITY_LIMIT {
            return Err(Error::IntegratorFailure {
                step: 0,
                time: profile0.time,
                reason: format!(
                    "dt * max rate = {} is not below {STABILITY_LIMIT}; reduce dt",
                    h * lambda
                ),
            });
        }
        let t0 = profile0.time;
        let mass0 = profile0.mass();
        let mut profiles = Vec::with_capacity(steps + 1);
        let mut diagnostics = Vec::with_capacity(steps + 1);
        diagnostics.push(StepDiagnostic::of(profile0, mass0));
        profiles.push(profile0.clone());
        let mut current = profile0.clone();
        for step in 1..=steps {
            let next = self.rk4_step(&current.values, h);
            current.values = next;
            current.time = t0 + step as f64 * h;
            let diag = StepDiagnostic::of(&current, mass0);
            if diag.normalization_drift > NORMALIZATION_TOLERANCE {
                return Err(Error::IntegratorFailure {
                    step,
                    time: current.time,
                    reason: format!("normalization drift {:e}", diag.normalization_drift),
                });
            }
            if diag.min_value < -NEGATIVITY_TOLERANCE {
                return Err(Error::IntegratorFailure {
                    step,
                    time: current.time,
                    reason: format!("negative density {:e}", diag.min_value),
                });
            }
            diagnostics.push(diag);
            profiles.push(current.clone());
        }
        Ok(MeanFieldRun {
            dt: h,
            profiles,
            diagnostics,
        })
    }
}

/// Monitors recorded after every step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepDiagnostic {
    pub time: f64,
    pub normalization_drift: f64,
    pub min_value: f64,
    pub mass: f64,
    pub mass_drift: f64,
}

impl StepDiagnostic {
    fn of(p: &DensityProfile, mass0: f64) -> Self {
        let mass = p.mass();
        Self {
            time: p.time,
            normalization_drift: p.normalization_error(),
            min_value: p.min_value(),
            mass,
            mass_drift: (mass - mass0).abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanFieldRun {
    /// Step actually used (the horizon divided into equal steps).
    pub dt: f64,
    pub profiles: Vec<DensityProfile>,
    pub diagnostics: Vec<StepDiagnostic>,
}

impl MeanFieldRun {
    pub fn last(&self) -> &DensityProfile {
        self.profiles
            .last()
            .expect("a run holds at least the initial profile")
    }

    pub fn start_time(&self) -> f64 {
        self.profiles[0].time
    }

    pub fn end_time(&self) -> f64 {
        self.last().time
    }

    /// Profile at time `t`, linearly interpolated between steps.
    pub fn at(&self, t: f64) -> Result<DensityProfile> {
        let (t0, t1) = (self.start_time(), self.end_time());
        let slack = 1e-9 * (1.0 + t1.abs());
        if t < t0 - slack || t > t1 + slack {
            return Err(Error::UnobservedTime(t));
        }
        if self.profiles.len() == 1 || self.dt == 0.0 {
            return Ok(self.profiles[0].clone());
        }
        let pos = ((t - t0) / self.dt).clamp(0.0, (self.profiles.len() - 1) as f64);
        let i = (pos.floor() as usize).min(self.profiles.len() - 2);
        let w = pos - i as f64;
        if w.abs() < 1e-12 {
            return Ok(self.profiles[i].clone());
        }
        if (1.0 - w).abs() < 1e-12 {
            return Ok(self.profiles[i + 1].clone());
        }
        Ok(self.profiles[i].lerp(&self.profiles[i + 1], w))
    }

    pub fn max_normalization_drift(&self) -> f64 {
        self.diagnostics
            .iter()
            .map(|d| d.normalization_drift)
            .fold(0.0, f64::max)
    }

    pub fn max_mass_drift(&self) -> f64 {
        self.diagnostics
            .iter()
            .map(|d| d.mass_drift)
            .fold(0.0, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.diagnostics
            .iter()
            .map(|d| d.min_value)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            dt: self.dt,
            steps: self.profiles.len() - 1,
            start_time: self.start_time(),
            end_time: self.end_time(),
            max_normalization_drift: self.max_normalization_drift(),
            max_mass_drift: self.max_mass_drift(),
            min_value: self.min_value(),
            initial_mass: self.profiles[0].mass(),
            final_mass: self.last().mass(),
            truncated_mass: self.profiles[0].truncated_mass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub dt: f64,
    pub steps: usize,
    pub start_time: f64,
    pub end_time: f64,
    pub max_normalization_drift: f64,
    pub max_mass_drift: f64,
    pub min_value: f64,
    pub initial_mass: f64,
    pub final_mass: f64,
    pub truncated_mass: f64,
}

/// Right-hand side for a single profile.
pub fn rhs(profile: &DensityProfile, policy: &RatePolicy) -> Result<Vec<f64>> {
    MeanField::new(policy, profile.grid, profile.kmax)?.rhs(profile)
}

pub fn integrate(
    profile0: &DensityProfile,
    policy: &RatePolicy,
    horizon: f64,
    dt: f64,
) -> Result<MeanFieldRun> {
    MeanField::new(policy, profile0.grid, profile0.kmax)?.integrate(profile0, horizon, dt)
}

/// Self-convergence of the time stepping at steps `dt`, `dt/2`, `dt/4`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RichardsonReport {
    pub dt: f64,
    /// `max |rho(dt) - rho(dt/2)|` at the horizon.
    pub coarse_difference: f64,
    /// `max |rho(dt/2) - rho(dt/4)|` at the horizon.
    pub fine_difference: f64,
    /// `log2(coarse / fine)`; close to 4 for RK4.
    pub observed_order: f64,
}

pub fn step_halving(
    profile0: &DensityProfile,
    policy: &RatePolicy,
    horizon: f64,
    dt: f64,
) -> Result<RichardsonReport> {
    let mf = MeanField::new(policy, profile0.grid, profile0.kmax)?;
    let finals: Vec<Vec<f64>> = [dt, dt / 2.0, dt / 4.0]
        .iter()
        .map(|&h| {
            mf.integrate(profile0, horizon, h)
                .map(|r| r.last().values.clone())
        })
        .collect::<Result<_>>()?;
    let diff = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    let coarse = diff(&finals[0], &finals[1]);
    let fine = diff(&finals[1], &finals[2]);
    Ok(RichardsonReport {
        dt,
        coarse_difference: coarse,
        fine_difference: fine,
        observed_order: (coarse / fine).log2(),
    })
}

/// First-moment tails `sum_{l >= L} l rho_l` at `L in {kmax/2, 3kmax/4, kmax}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailReport {
    pub time: f64,
    pub levels: Vec<usize>,
    /// `tails[a][j]`: tail from `levels[a]` at grid point `j`.
    pub tails: Vec<Vec<f64>>,
    /// Supremum over the grid for each level.
    pub sup_tails: Vec<f64>,
    /// Fitted slope of `log sup_tail` against the level; `None` when fewer
    /// than two tails are positive.
    pub log_slope: Option<f64>,
    pub flagged: bool,
}

pub fn tail_check(profile: &DensityProfile) -> Result<TailReport> {
    if profile.capacity.is_finite() {
        return Err(Error::Unsupported(
            "tail check applies to infinite capacity".into(),
        ));
    }
    let kmax = profile.kmax;
    let levels = vec![kmax / 2, 3 * kmax / 4, kmax];
    let tails: Vec<Vec<f64>> = levels
        .iter()
        .map(|&from| {
            (0..profile.grid)
                .map(|j| {
                    (from..=kmax)
                        .map(|l| l as f64 * profile.get(l, j).max(0.0))
                        .sum()
                })
                .collect()
        })
        .collect();
    let sup_tails: Vec<f64> = tails
        .iter()
        .map(|t| t.iter().cloned().fold(0.0, f64::max))
        .collect();
    let pts: Vec<(f64, f64)> = levels
        .iter()
        .zip(&sup_tails)
        .filter(|(_, &s)| s > 0.0)
        .map(|(&l, &s)| (l as f64, s.ln()))
        .collect();
    let log_slope = if pts.len() >= 2 {
        let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
        crate::stats::line_fit(&x, &y).map(|f| f.slope)
    } else {
        None
    };
    Ok(TailReport {
        time: profile.time,
        flagged: sup_tails[0] > TAIL_FLAG,
        levels,
        tails,
        sup_tails,
        log_slope,
    })
}

/// Mean occupancy `sum_l l rho_l(u_j)` on the grid.
pub fn theta(profile: &DensityProfile) -> Vec<f64> {
    (0..profile.grid)
        .map(|j| {
            (0..=profile.kmax)
                .map(|l| l as f64 * profile.get(l, j))
                .sum()
        })
        .collect()
}
