//! Closed-form periodic functions on the torus `[0, 1)` and `[0, 1)^2`.
//!
//! Both the initial profiles, the test functions and the spatial part of the
//! jump rates are described by short trigonometric series. They are periodic by
//! construction and carry a cheap analytic bound on their absolute value.

use std::f64::consts::TAU;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Reduces a coordinate to `[0, 1)`.
#[inline]
pub fn wrap(u: f64) -> f64 {
    let r = u.rem_euclid(1.0);
    // rem_euclid can return 1.0 for tiny negative inputs
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Coordinate `(i + 1) / n` in `(0, 1]` of the 0-based site index `i` among
/// `n` sites. The last site sits at `1`, which the torus identifies with `0`.
#[inline]
pub fn site_coordinate(i: usize, n: usize) -> f64 {
    (i + 1) as f64 / n as f64
}

/// One harmonic `cos * cos(2 pi n u) + sin * sin(2 pi n u)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    pub n: i32,
    #[serde(default)]
    pub cos: f64,
    #[serde(default)]
    pub sin: f64,
}

/// `constant + sum_n (a_n cos(2 pi n u) + b_n sin(2 pi n u))`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FourierSeries {
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub terms: Vec<Harmonic>,
}

impl FourierSeries {
    pub fn constant(c: f64) -> Self {
        Self {
            constant: c,
            terms: Vec::new(),
        }
    }

    /// `base + amplitude * sin(2 pi u)`.
    pub fn sine(base: f64, amplitude: f64) -> Self {
        Self {
            constant: base,
            terms: vec![Harmonic {
                n: 1,
                cos: 0.0,
                sin: amplitude,
            }],
        }
    }

    /// `base + amplitude * cos(2 pi u)`.
    pub fn cosine(base: f64, amplitude: f64) -> Self {
        Self {
            constant: base,
            terms: vec![Harmonic {
                n: 1,
                cos: amplitude,
                sin: 0.0,
            }],
        }
    }

    pub fn eval(&self, u: f64) -> f64 {
        let u = wrap(u);
        self.terms.iter().fold(self.constant, |acc, h| {
            let x = TAU * f64::from(h.n) * u;
            acc + h.cos * x.cos() + h.sin * x.sin()
        })
    }

    /// Upper bound on `sup |f|`.
    pub fn abs_bound(&self) -> f64 {
        self.constant.abs() + self.terms.iter().map(|h| h.cos.hypot(h.sin)).sum::<f64>()
    }

    /// Lower bound on `inf f`.
    pub fn lower_bound(&self) -> f64 {
        self.constant - self.terms.iter().map(|h| h.cos.hypot(h.sin)).sum::<f64>()
    }
}

/// A real function on the torus, either closed-form or an arbitrary evaluator.
#[derive(Clone)]
pub enum TorusFn {
    Fourier(FourierSeries),
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl TorusFn {
    pub fn constant(c: f64) -> Self {
        TorusFn::Fourier(FourierSeries::constant(c))
    }

    pub fn from_fn(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        TorusFn::Custom(Arc::new(f))
    }

    /// Evaluates at `u`; custom evaluators receive `u` reduced to `[0, 1]`.
    pub fn eval(&self, u: f64) -> f64 {
        match self {
            TorusFn::Fourier(f) => f.eval(u),
            TorusFn::Custom(f) => f(if (0.0..=1.0).contains(&u) { u } else { wrap(u) }),
        }
    }

    /// Samples on the grid `u_j = (j + 1) / m`.
    pub fn sample(&self, m: usize) -> Vec<f64> {
        (0..m).map(|j| self.eval(site_coordinate(j, m))).collect()
    }
}

impl From<FourierSeries> for TorusFn {
    fn from(s: FourierSeries) -> Self {
        TorusFn::Fourier(s)
    }
}

impl fmt::Debug for TorusFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TorusFn::Fourier(s) => f.debug_tuple("Fourier").field(s).finish(),
            TorusFn::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// One mode `cos * cos(2 pi (p u + q v)) + sin * sin(2 pi (p u + q v))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub p: i32,
    pub q: i32,
    #[serde(default)]
    pub cos: f64,
    #[serde(default)]
    pub sin: f64,
}

/// Spatial kernel `phi(u, v)` as a two-dimensional trigonometric series.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Kernel {
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub modes: Vec<Mode>,
}

impl Kernel {
    pub fn constant(c: f64) -> Self {
        Self {
            constant: c,
            modes: Vec::new(),
        }
    }

    /// `base + amplitude * cos(2 pi (u - v))`, symmetric in `(u, v)`.
    pub fn cos_difference(base: f64, amplitude: f64) -> Self {
        Self {
            constant: base,
            modes: vec![Mode {
                p: 1,
                q: -1,
                cos: amplitude,
                sin: 0.0,
            }],
        }
    }

    /// `base + amplitude * sin(2 pi u)`, depending on the source coordinate only.
    pub fn source_sine(base: f64, amplitude: f64) -> Self {
        Self {
            constant: base,
            modes: vec![Mode {
                p: 1,
                q: 0,
                cos: 0.0,
                sin: amplitude,
            }],
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.modes.push(mode);
        self
    }

    pub fn eval(&self, u: f64, v: f64) -> f64 {
        let (u, v) = (wrap(u), wrap(v));
        self.modes.iter().fold(self.constant, |acc, m| {
            let x = TAU * (f64::from(m.p) * u + f64::from(m.q) * v);
            acc + m.cos * x.cos() + m.sin * x.sin()
        })
    }

    pub fn abs_bound(&self) -> f64 {
        self.constant.abs() + self.modes.iter().map(|m| m.cos.hypot(m.sin)).sum::<f64>()
    }

    pub fn lower_bound(&self) -> f64 {
        self.constant - self.modes.iter().map(|m| m.cos.hypot(m.sin)).sum::<f64>()
    }

    pub fn is_symmetric(&self) -> bool {
        // each mode must have a partner with (p, q) swapped and equal coefficients
        self.modes.iter().all(|m| {
            m.p == m.q
                || self
                    .modes
                    .iter()
                    .any(|o| o.p == m.q && o.q == m.p && o.cos == m.cos && o.sin == m.sin)
                || (m.p == -m.q && m.sin == 0.0)
        })
    }
}
