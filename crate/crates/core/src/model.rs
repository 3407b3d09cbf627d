//! Rate families `phi_{k,l}(u, v)` and the named model presets.
//!
//! A particle leaves a site at coordinate `u` holding `k` particles for a site at
//! coordinate `v` holding `l` particles at rate `phi_{k,l}(u, v) / N`. Two zeros
//! are forced regardless of the supplied family: `phi_{0,l} = 0` (nothing to
//! move) and `phi_{k,K} = 0` when the capacity `K` is finite (target full).

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::torus::{site_coordinate, wrap, Kernel};

/// Coordinate resolution used when validating a policy.
pub const VALIDATION_GRID: usize = 64;
/// Highest occupancy sampled during validation.
pub const VALIDATION_MAX_OCCUPANCY: u32 = 64;
/// Inflation applied to a grid maximum to obtain a thinning envelope.
pub const SUP_INFLATION: f64 = 1.05;

/// Maximum number of particles per site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Capacity {
    Finite(u32),
    Infinite,
}

impl Capacity {
    pub fn finite(k: u32) -> Result<Self> {
        if k == 0 {
            return Err(Error::Validation(
                "finite capacity must be at least 1".into(),
            ));
        }
        Ok(Capacity::Finite(k))
    }

    pub fn as_finite(self) -> Option<u32> {
        match self {
            Capacity::Finite(k) => Some(k),
            Capacity::Infinite => None,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Capacity::Finite(_))
    }

    pub fn admits(self, k: u32) -> bool {
        match self {
            Capacity::Finite(cap) => k <= cap,
            Capacity::Infinite => true,
        }
    }
}

impl fmt::Display for Capacity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Capacity::Finite(k) => write!(f, "{k}"),
            Capacity::Infinite => f.write_str("infinite"),
        }
    }
}

/// Occupancy dependence `g(k, l)` of a separable rate `g(k, l) * kernel(u, v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccupancyLaw {
    /// `1` whenever the source is occupied.
    Indicator,
    /// `k`: every particle jumps independently.
    Linear,
    /// `min(k, cap)`.
    Saturating { cap: u32 },
    /// `k / (1 + l)`.
    Ratio,
    /// Explicit table `g[k][l]`; finite capacity only.
    Table(Vec<Vec<f64>>),
}

impl OccupancyLaw {
    pub fn eval(&self, k: u32, l: u32) -> f64 {
        match self {
            OccupancyLaw::Indicator => f64::from(u8::from(k > 0)),
            OccupancyLaw::Linear => f64::from(k),
            OccupancyLaw::Saturating { cap } => f64::from(k.min(*cap)),
            OccupancyLaw::Ratio => f64::from(k) / (1.0 + f64::from(l)),
            OccupancyLaw::Table(t) => t
                .get(k as usize)
                .and_then(|row| row.get(l as usize))
                .copied()
                .unwrap_or(0.0),
        }
    }

    pub fn depends_on_target(&self) -> bool {
        matches!(self, OccupancyLaw::Ratio | OccupancyLaw::Table(_))
    }

    /// `sup_{k >= 1, l} g(k, l) / k`, when finite.
    fn per_particle_bound(&self) -> Option<f64> {
        match self {
            OccupancyLaw::Indicator
            | OccupancyLaw::Linear
            | OccupancyLaw::Saturating { .. }
            | OccupancyLaw::Ratio => Some(1.0),
            OccupancyLaw::Table(_) => None,
        }
    }

    fn max_over(&self, cap: u32) -> f64 {
        let mut best = 0.0_f64;
        for k in 1..=cap {
            for l in 0..cap {
                best = best.max(self.eval(k, l));
            }
        }
        best
    }
}

type RateClosure = Arc<dyn Fn(u32, u32, f64, f64) -> f64 + Send + Sync>;

#[derive(Clone)]
enum RateForm {
    Separable { law: OccupancyLaw, kernel: Kernel },
    Custom(RateClosure),
}

/// An immutable jump-rate family with its capacity.
#[derive(Clone)]
pub struct RatePolicy {
    name: String,
    capacity: Capacity,
    form: RateForm,
    infinite_bound: Option<f64>,
}

impl fmt::Debug for RatePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("RatePolicy");
        d.field("name", &self.name)
            .field("capacity", &self.capacity);
        match &self.form {
            RateForm::Separable { law, kernel } => {
                d.field("law", law).field("kernel", kernel);
            }
            RateForm::Custom(_) => {
                d.field("rate", &"custom");
            }
        }
        d.field("infinite_bound", &self.infinite_bound).finish()
    }
}

/// Minimum and maximum of the kernel on a square coordinate grid.
fn kernel_range(kernel: &Kernel, grid: usize) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..grid {
        let u = i as f64 / grid as f64;
        for j in 0..grid {
            let x = kernel.eval(u, j as f64 / grid as f64);
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    (lo, hi)
}

impl RatePolicy {
    /// `g(k, l) * kernel(u, v)`. For infinite capacity the per-particle bound
    /// `C_1` is derived from the law and the kernel's analytic bound.
    pub fn separable(
        name: impl Into<String>,
        capacity: Capacity,
        law: OccupancyLaw,
        kernel: Kernel,
    ) -> Result<Self> {
        if kernel.lower_bound() < 0.0 {
            // analytic bound is loose; fall back to sampling before rejecting
            let grid = VALIDATION_GRID;
            for i in 0..grid {
                for j in 0..grid {
                    let v = kernel.eval(site_coordinate(i, grid), site_coordinate(j, grid));
                    if v < 0.0 {
                        return Err(Error::Validation(format!(
                            "kernel is negative ({v}) at sampled point ({}, {})",
                            site_coordinate(i, grid),
                            site_coordinate(j, grid)
                        )));
                    }
                }
            }
        }
        let infinite_bound = match capacity {
            Capacity::Finite(k) => {
                if k == 0 {
                    return Err(Error::Validation(
                        "finite capacity must be at least 1".into(),
                    ));
                }
                None
            }
            Capacity::Infinite => {
                let per = law.per_particle_bound().ok_or_else(|| {
                    Error::Validation("a tabulated occupancy law needs a finite capacity".into())
                })?;
                Some(per * kernel.abs_bound())
            }
        };
        let policy = Self {
            name: name.into(),
            capacity,
            form: RateForm::Separable { law, kernel },
            infinite_bound,
        };
        policy.validate()?;
        Ok(policy)
    }

    /// Arbitrary closed-form evaluator. `infinite_bound` is required iff the
    /// capacity is infinite.
    pub fn from_fn(
        name: impl Into<String>,
        capacity: Capacity,
        infinite_bound: Option<f64>,
        rate: impl Fn(u32, u32, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        match (capacity, infinite_bound) {
            (Capacity::Infinite, None) => {
                return Err(Error::Validation(
                    "infinite capacity requires a per-particle bound C_1".into(),
                ))
            }
            (Capacity::Finite(0), _) => {
                return Err(Error::Validation(
                    "finite capacity must be at least 1".into(),
                ))
            }
            _ => {}
        }
        let policy = Self {
            name: name.into(),
            capacity,
            form: RateForm::Custom(Arc::new(rate)),
            infinite_bound: if capacity.is_finite() {
                None
            } else {
                infinite_bound
            },
        };
        policy.validate()?;
        Ok(policy)
    }

    /// A policy with all rates zero.
    pub fn zero(capacity: Capacity) -> Self {
        Self {
            name: "zero".into(),
            capacity,
            form: RateForm::Separable {
                law: OccupancyLaw::Indicator,
                kernel: Kernel::constant(0.0),
            },
            infinite_bound: if capacity.is_finite() {
                None
            } else {
                Some(0.0)
            },
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn capacity(&self) -> Capacity {
        self.capacity
    }

    /// `C_1` with `phi_{k,l} <= C_1 k`; present for infinite capacity.
    pub fn infinite_bound(&self) -> Option<f64> {
        self.infinite_bound
    }

    /// The `(law, kernel)` factorisation, when the policy has one.
    pub fn factors(&self) -> Option<(&OccupancyLaw, &Kernel)> {
        match &self.form {
            RateForm::Separable { law, kernel } => Some((law, kernel)),
            RateForm::Custom(_) => None,
        }
    }

    /// Rate with forced zeros, without range checks. Callers guarantee
    /// admissible occupancies.
    #[inline]
    pub fn rate(&self, k: u32, l: u32, u: f64, v: f64) -> f64 {
        if k == 0 {
            return 0.0;
        }
        if let Capacity::Finite(cap) = self.capacity {
            if l >= cap {
                return 0.0;
            }
        }
        match &self.form {
            RateForm::Separable { law, kernel } => {
                let g = law.eval(k, l);
                if g == 0.0 {
                    0.0
                } else {
                    g * kernel.eval(u, v)
                }
            }
            RateForm::Custom(f) => f(k, l, wrap(u), wrap(v)),
        }
    }

    /// Checked evaluation of `phi_{k,l}(u, v)`.
    pub fn eval_rate(&self, k: u32, l: u32, u: f64, v: f64) -> Result<f64> {
        if !self.capacity.admits(k) || !self.capacity.admits(l) {
            return Err(Error::Domain(format!(
                "occupancy ({k}, {l}) outside [0, {}]",
                self.capacity
            )));
        }
        Ok(self.rate(k, l, u, v))
    }

    /// Thinning envelope `K_1' >= sup phi` for finite capacity.
    ///
    /// The grid maximum over `grid_resolution^2` coordinates and all admissible
    /// occupancies is inflated by [`SUP_INFLATION`]; when an analytic bound is
    /// available and tighter, that bound is returned instead.
    pub fn sup_rate(&self, grid_resolution: usize) -> Result<f64> {
        let cap = self.capacity.as_finite().ok_or_else(|| {
            Error::Unsupported("sup_rate needs a finite capacity; use infinite_bound".into())
        })?;
        if grid_resolution == 0 {
            return Err(Error::Domain("grid resolution must be positive".into()));
        }
        let grid_max = self.grid_max(cap, grid_resolution);
        let inflated = grid_max * SUP_INFLATION;
        Ok(match self.analytic_sup(cap) {
            Some(a) => inflated.min(a),
            None => inflated,
        })
    }

    /// Largest sampled rate over a square coordinate grid.
    pub fn grid_max(&self, cap: u32, grid_resolution: usize) -> f64 {
        if let RateForm::Separable { law, kernel } = &self.form {
            let (_, kmax) = kernel_range(kernel, grid_resolution);
            let gmax = (1..=cap)
                .flat_map(|k| (0..cap).map(move |l| (k, l)))
                .map(|(k, l)| law.eval(k, l))
                .fold(0.0_f64, f64::max);
            return (gmax * kmax).max(0.0);
        }
        let mut best = 0.0_f64;
        for i in 0..grid_resolution {
            let u = i as f64 / grid_resolution as f64;
            for j in 0..grid_resolution {
                let v = j as f64 / grid_resolution as f64;
                for k in 1..=cap {
                    for l in 0..cap {
                        best = best.max(self.rate(k, l, u, v));
                    }
                }
            }
        }
        best
    }

    fn analytic_sup(&self, cap: u32) -> Option<f64> {
        match &self.form {
            RateForm::Separable { law, kernel } => Some(law.max_over(cap) * kernel.abs_bound()),
            RateForm::Custom(_) => None,
        }
    }

    /// Samples the invariants on a `64 x 64` grid with occupancies up to
    /// `min(K, 64)`.
    pub fn validate(&self) -> Result<()> {
        let top = match self.capacity {
            Capacity::Finite(k) => k.min(VALIDATION_MAX_OCCUPANCY),
            Capacity::Infinite => VALIDATION_MAX_OCCUPANCY,
        };
        let grid = VALIDATION_GRID;
        if let RateForm::Separable { law, kernel } = &self.form {
            return self.validate_separable(law, kernel, top, grid);
        }
        for i in 0..grid {
            let u = i as f64 / grid as f64;
            for j in 0..grid {
                let v = j as f64 / grid as f64;
                for k in 0..=top {
                    for l in 0..=top {
                        let r = self.rate(k, l, u, v);
                        if !r.is_finite() || r < 0.0 {
                            return Err(Error::Validation(format!(
                                "rate phi_{{{k},{l}}}({u}, {v}) = {r} is not a nonnegative number"
                            )));
                        }
                        if let Some(c1) = self.infinite_bound {
                            if r > c1 * f64::from(k) * (1.0 + 1e-12) {
                                return Err(Error::Validation(format!(
                                    "rate phi_{{{k},{l}}}({u}, {v}) = {r} exceeds C_1 k = {}",
                                    c1 * f64::from(k)
                                )));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Misanthrope lint: rates increasing in `k` and decreasing in `l` on
    /// sampled points.
    fn validate_separable(
        &self,
        law: &OccupancyLaw,
        kernel: &Kernel,
        top: u32,
        grid: usize,
    ) -> Result<()> {
        let (kmin, kmax) = kernel_range(kernel, grid);
        for k in 1..=top {
            for l in 0..=top {
                let forced_zero = matches!(self.capacity, Capacity::Finite(c) if l >= c);
                let g = if forced_zero { 0.0 } else { law.eval(k, l) };
                let (r_lo, r_hi) = if g == 0.0 {
                    (0.0, 0.0)
                } else {
                    (g * kmin, g * kmax)
                };
                for r in [r_lo, r_hi] {
                    if !r.is_finite() || r < 0.0 {
                        return Err(Error::Validation(format!(
                            "rate phi_{{{k},{l}}} = {r} is not a nonnegative number"
                        )));
                    }
                    if let Some(c1) = self.infinite_bound {
                        if r > c1 * f64::from(k) * (1.0 + 1e-12) {
                            return Err(Error::Validation(format!(
                                "rate phi_{{{k},{l}}} = {r} exceeds C_1 k = {}",
                                c1 * f64::from(k)
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn check_misanthrope(&self) -> Result<()> {
        let top = match self.capacity {
            Capacity::Finite(k) => k.min(32),
            Capacity::Infinite => 32,
        };
        let grid = 16;
        let tol = 1e-12;
        for i in 0..grid {
            let u = i as f64 / grid as f64;
            for j in 0..grid {
                let v = j as f64 / grid as f64;
                for k in 0..=top {
                    for l in 0..=top {
                        let r = self.rate(k, l, u, v);
                        if k < top && self.rate(k + 1, l, u, v) < r - tol {
                            return Err(Error::Validation(format!(
                                "misanthrope: rate decreases in k at k={k}, l={l}, u={u}, v={v}"
                            )));
                        }
                        if l < top && self.rate(k, l + 1, u, v) > r + tol {
                            return Err(Error::Validation(format!(
                                "misanthrope: rate increases in l at k={k}, l={l}, u={u}, v={v}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Named special cases of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum ModelPreset {
    GeneralizedExclusion {
        capacity: u32,
        law: OccupancyLaw,
        kernel: Kernel,
    },
    /// Capacity 1 with `phi_{1,0} = kernel`.
    Exclusion { kernel: Kernel },
    /// Infinite capacity with target-independent rates `g(k) * kernel`.
    ZeroRange { law: OccupancyLaw, kernel: Kernel },
    /// Infinite capacity with `phi_k = k * kernel`.
    Ehrenfest { kernel: Kernel },
    /// `capacity` absent means infinite.
    Misanthrope {
        #[serde(default)]
        capacity: Option<u32>,
        law: OccupancyLaw,
        kernel: Kernel,
    },
}

impl ModelPreset {
    pub fn name(&self) -> &'static str {
        match self {
            ModelPreset::GeneralizedExclusion { .. } => "generalized_exclusion",
            ModelPreset::Exclusion { .. } => "exclusion",
            ModelPreset::ZeroRange { .. } => "zero_range",
            ModelPreset::Ehrenfest { .. } => "ehrenfest",
            ModelPreset::Misanthrope { .. } => "misanthrope",
        }
    }
}

/// Builds and validates the policy for a preset.
pub fn make_preset(preset: &ModelPreset) -> Result<RatePolicy> {
    let name = preset.name();
    match preset {
        ModelPreset::GeneralizedExclusion {
            capacity,
            law,
            kernel,
        } => {
            if let OccupancyLaw::Table(t) = law {
                let need = *capacity as usize;
                if t.len() < need + 1 || t.iter().take(need + 1).any(|row| row.len() < need) {
                    return Err(Error::Validation(format!(
                        "occupancy table must cover k in 0..={need} and l in 0..{need}"
                    )));
                }
            }
            RatePolicy::separable(
                name,
                Capacity::finite(*capacity)?,
                law.clone(),
                kernel.clone(),
            )
        }
        ModelPreset::Exclusion { kernel } => RatePolicy::separable(
            name,
            Capacity::Finite(1),
            OccupancyLaw::Indicator,
            kernel.clone(),
        ),
        ModelPreset::ZeroRange { law, kernel } => {
            if law.depends_on_target() {
                return Err(Error::Validation(
                    "zero-range rates must not depend on the target occupancy".into(),
                ));
            }
            RatePolicy::separable(name, Capacity::Infinite, law.clone(), kernel.clone())
        }
        ModelPreset::Ehrenfest { kernel } => RatePolicy::separable(
            name,
            Capacity::Infinite,
            OccupancyLaw::Linear,
            kernel.clone(),
        ),
        ModelPreset::Misanthrope {
            capacity,
            law,
            kernel,
        } => {
            let cap = match capacity {
                Some(k) => Capacity::finite(*k)?,
                None => Capacity::Infinite,
            };
            let policy = RatePolicy::separable(name, cap, law.clone(), kernel.clone())?;
            policy.check_misanthrope()?;
            Ok(policy)
        }
    }
}
