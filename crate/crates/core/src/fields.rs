//! Empirical density and fluctuation fields over replica ensembles, with
//! covariance estimators and convergence summaries.

use std::cmp::Ordering;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::meanfield::DensityProfile;
use crate::model::RatePolicy;
use crate::rng::derive_seed;
use crate::sim::{run_replicas, Configuration, EnsembleSpec, InitialProfile, ReplicaEnsemble};
use crate::stats::{weighted_line_fit, LineFit, Z95};
use crate::torus::{site_coordinate, TorusFn};

/// Test functions are periodic functions on the torus.
pub type TestFunction = TorusFn;

/// A replica average with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldEstimate {
    pub value: f64,
    pub std_error: f64,
    pub replicas: usize,
}

/// `(1/N) sum_i 1{eta(i) = k} f((i+1)/N)`.
pub fn empirical_density(config: &Configuration, k: u32, f: &TestFunction) -> f64 {
    let n = config.len();
    config
        .counts()
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == k)
        .map(|(i, _)| f.eval(site_coordinate(i, n)))
        .sum::<f64>()
        / n as f64
}

/// Per-site frequency of occupancy `k` across replicas, with binomial errors.
pub fn occupation_probabilities(
    ensemble: &ReplicaEnsemble,
    t: f64,
    k: u32,
) -> Result<Vec<FieldEstimate>> {
    let snaps = ensemble.snapshots_at(t)?;
    Ok(site_frequencies(&snaps, ensemble.n_sites, k)
        .into_iter()
        .map(|p| FieldEstimate {
            value: p,
            std_error: (p * (1.0 - p) / snaps.len() as f64).sqrt(),
            replicas: snaps.len(),
        })
        .collect())
}

fn site_frequencies(snaps: &[&Configuration], n: usize, k: u32) -> Vec<f64> {
    let mut freq = vec![0.0; n];
    for s in snaps {
        for (i, &c) in s.counts().iter().enumerate() {
            if c == k {
                freq[i] += 1.0;
            }
        }
    }
    let r = snaps.len().max(1) as f64;
    freq.iter_mut().for_each(|x| *x /= r);
    freq
}

/// `(1/sqrt N) sum_i (1{eta(i) = k} - p_i) f((i+1)/N)`.
pub fn fluctuation_field(
    config: &Configuration,
    site_probs: &[f64],
    k: u32,
    f: &TestFunction,
) -> Result<f64> {
    let n = config.len();
    if site_probs.len() != n {
        return Err(Error::Domain(format!(
            "{} site probabilities for {n} sites",
            site_probs.len()
        )));
    }
    let s: f64 = config
        .counts()
        .iter()
        .zip(site_probs)
        .enumerate()
        .map(|(i, (&c, &p))| {
            let ind = if c == k { 1.0 } else { 0.0 };
            (ind - p) * f.eval(site_coordinate(i, n))
        })
        .sum();
    Ok(s / (n as f64).sqrt())
}

/// Site probabilities taken from a mean-field profile on the same grid size
/// as the particle system.
pub fn meanfield_site_probs(profile: &DensityProfile, k: usize, n: usize) -> Result<Vec<f64>> {
    if profile.grid != n {
        return Err(Error::Domain(format!(
            "profile grid {} differs from N = {n}",
            profile.grid
        )));
    }
    if k > profile.kmax {
        return Ok(vec![0.0; n]);
    }
    Ok(profile.row(k).to_vec())
}

/// Sample covariance of `a` and `b` (denominator `R - 1`) with a jackknife
/// standard error from closed-form leave-one-out sums.
pub fn covariance_with_jackknife(a: &[f64], b: &[f64]) -> Result<FieldEstimate> {
    let n = a.len();
    if n != b.len() {
        return Err(Error::Domain("covariance inputs differ in length".into()));
    }
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "covariance needs at least 2 replicas, got {n}"
        )));
    }
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let nf = n as f64;
    let value = (sab - sa * sb / nf) / (nf - 1.0);
    if n < 3 {
        return Ok(FieldEstimate {
            value,
            std_error: f64::INFINITY,
            replicas: n,
        });
    }
    let m = nf - 1.0;
    let loo: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| ((sab - x * y) - (sa - x) * (sb - y) / m) / (m - 1.0))
        .collect();
    let mean_loo = loo.iter().sum::<f64>() / nf;
    let ss: f64 = loo.iter().map(|c| (c - mean_loo) * (c - mean_loo)).sum();
    Ok(FieldEstimate {
        value,
        std_error: ((nf - 1.0) / nf * ss).sqrt(),
        replicas: n,
    })
}

/// `Cov(1{eta_t(x) = k1}, 1{eta_t(y) = k2})` across replicas.
pub fn covariance_estimate(
    ensemble: &ReplicaEnsemble,
    t: f64,
    x: usize,
    y: usize,
    k1: u32,
    k2: u32,
) -> Result<FieldEstimate> {
    let n = ensemble.n_sites;
    if x >= n || y >= n {
        return Err(Error::Domain(format!("sites ({x}, {y}) outside 0..{n}")));
    }
    let snaps = ensemble.snapshots_at(t)?;
    let ind =
        |c: &Configuration, site: usize, k: u32| if c.counts()[site] == k { 1.0 } else { 0.0 };
    let a: Vec<f64> = snaps.iter().map(|c| ind(c, x, k1)).collect();
    let b: Vec<f64> = snaps.iter().map(|c| ind(c, y, k2)).collect();
    covariance_with_jackknife(&a, &b)
}

/// Variance of a sample with a jackknife error (closed form).
pub fn variance_with_jackknife(xs: &[f64]) -> Result<FieldEstimate> {
    covariance_with_jackknife(xs, xs)
}

/// `Var(V_{t,k}(f))` by split halves: each half is centred with site
/// probabilities from the other half, and the two half-sample variances are
/// averaged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FluctuationVariance {
    pub time: f64,
    pub k: u32,
    pub variance: f64,
    pub std_error: f64,
    /// Average field value over both halves (near zero).
    pub mean: f64,
    pub replicas: usize,
}

pub fn fluctuation_variance(
    ensemble: &ReplicaEnsemble,
    t: f64,
    k: u32,
    f: &TestFunction,
) -> Result<FluctuationVariance> {
    let snaps = ensemble.snapshots_at(t)?;
    let r = snaps.len();
    if r < 6 {
        return Err(Error::InsufficientData(format!(
            "split-half variance needs at least 6 replicas, got {r}"
        )));
    }
    let (first, second) = snaps.split_at(r / 2);
    let n = ensemble.n_sites;
    let half = |probs_from: &[&Configuration],
                fields_on: &[&Configuration]|
     -> Result<(FieldEstimate, f64)> {
        let probs = site_frequencies(probs_from, n, k);
        let v: Vec<f64> = fields_on
            .iter()
            .map(|c| fluctuation_field(c, &probs, k, f))
            .collect::<Result<_>>()?;
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        Ok((variance_with_jackknife(&v)?, mean))
    };
    let (va, ma) = half(first, second)?;
    let (vb, mb) = half(second, first)?;
    Ok(FluctuationVariance {
        time: t,
        k,
        variance: 0.5 * (va.value + vb.value),
        std_error: 0.5 * (va.std_error.powi(2) + vb.std_error.powi(2)).sqrt(),
        mean: 0.5 * (ma + mb),
        replicas: r,
    })
}

/// Occupancy pairs and macroscopic positions over which covariances are
/// maximized.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayPanel {
    /// Coordinates of the first site of each pair.
    pub anchors: Vec<f64>,
    /// Separation of the pair as a fraction of the circle.
    pub offset: f64,
    pub occupancies: Vec<(u32, u32)>,
}

impl DecayPanel {
    /// Four anchors a quarter circle apart, partner a quarter circle ahead,
    /// and all occupancy pairs up to `kmax`.
    pub fn quarter(kmax: u32) -> Self {
        Self {
            anchors: vec![0.125, 0.375, 0.625, 0.875],
            offset: 0.25,
            occupancies: (0..=kmax)
                .flat_map(|a| (0..=kmax).map(move |b| (a, b)))
                .collect(),
        }
    }

    /// Site pairs for `n` sites.
    pub fn sites(&self, n: usize) -> Vec<(usize, usize)> {
        let shift = (self.offset * n as f64).round() as usize;
        self.anchors
            .iter()
            .map(|&u| {
                let x = ((u * n as f64).round() as usize + n - 1) % n;
                (x, (x + shift) % n)
            })
            .collect()
    }
}

/// A panel maximum counts as nonzero above this many standard errors; the
/// threshold allows for taking a maximum over the panel.
pub const DEGENERACY_Z: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayRow {
    pub n_sites: usize,
    pub replicas: usize,
    /// Largest `|covariance|` over the panel.
    pub max_abs_covariance: f64,
    /// Standard error of the entry attaining the maximum.
    pub std_error: f64,
    pub argmax: (usize, usize, u32, u32),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayReport {
    pub time: f64,
    pub rows: Vec<DecayRow>,
    /// Log-log slope of the panel maximum against N, weighted by the
    /// standard errors; absent when degenerate or with a single N.
    pub slope: Option<LineFit>,
    /// No panel maximum exceeds [`DEGENERACY_Z`] standard errors.
    pub degenerate: bool,
}

/// Panel maxima of `|covariance|` for one ensemble per N.
pub fn decay_from_ensembles(
    ensembles: &[ReplicaEnsemble],
    t: f64,
    panel: &DecayPanel,
) -> Result<DecayReport> {
    let rows = ensembles
        .iter()
        .map(|ens| {
            let mut best: Option<(FieldEstimate, (usize, usize, u32, u32))> = None;
            for (x, y) in panel.sites(ens.n_sites) {
                for &(k1, k2) in &panel.occupancies {
                    let c = covariance_estimate(ens, t, x, y, k1, k2)?;
                    if best
                        .as_ref()
                        .is_none_or(|(b, _)| c.value.abs() > b.value.abs())
                    {
                        best = Some((c, (x, y, k1, k2)));
                    }
                }
            }
            let (c, argmax) = best.ok_or_else(|| Error::Domain("decay panel is empty".into()))?;
            Ok(DecayRow {
                n_sites: ens.n_sites,
                replicas: ens.replicas(),
                max_abs_covariance: c.value.abs(),
                std_error: c.std_error,
                argmax,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let degenerate = rows.iter().all(|r| {
        r.max_abs_covariance
            .partial_cmp(&(DEGENERACY_Z * r.std_error))
            != Some(Ordering::Greater)
    });
    let slope = if degenerate || rows.len() < 2 || rows.iter().any(|r| r.max_abs_covariance <= 0.0)
    {
        None
    } else {
        let x: Vec<f64> = rows.iter().map(|r| (r.n_sites as f64).ln()).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.max_abs_covariance.ln()).collect();
        let sd: Vec<f64> = rows
            .iter()
            .map(|r| r.std_error / r.max_abs_covariance)
            .collect();
        weighted_line_fit(&x, &y, &sd)
    };
    Ok(DecayReport {
        time: t,
        rows,
        slope,
        degenerate,
    })
}

/// Runs one ensemble per N (started from the product measure of `profile`)
/// and reports the covariance panel decay.
pub fn decay_study(
    policy: &RatePolicy,
    profile: &InitialProfile,
    t: f64,
    n_list: &[usize],
    replicas: usize,
    seed: u64,
    panel: &DecayPanel,
) -> Result<DecayReport> {
    let times = [t];
    let ensembles = n_list
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let spec = EnsembleSpec {
                profile,
                policy,
                n_sites: n,
                horizon: t,
                observation_times: &times,
            };
            run_replicas(&spec, replicas, derive_seed(seed, i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    decay_from_ensembles(&ensembles, t, panel)
}

/// `E[(X - reference)^2]` split into variance and squared bias.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct L2Error {
    pub reference: f64,
    pub mean: f64,
    /// Mean squared error; equals `variance + bias_squared` exactly.
    pub mse: f64,
    pub mse_std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Population variance (denominator R).
    pub variance: f64,
    pub variance_std_error: f64,
    pub bias_squared: f64,
    pub replicas: usize,
}

pub fn l2_error(values: &[f64], reference: f64) -> Result<L2Error> {
    let r = values.len();
    if r < 2 {
        return Err(Error::InsufficientData(format!(
            "L2 error needs at least 2 replicas, got {r}"
        )));
    }
    let rf = r as f64;
    let mean = values.iter().sum::<f64>() / rf;
    let variance = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / rf;
    let bias_squared = (mean - reference) * (mean - reference);
    let mse = variance + bias_squared;
    let sq: Vec<f64> = values
        .iter()
        .map(|x| (x - reference) * (x - reference))
        .collect();
    let sq_var = sq.iter().map(|s| (s - mse) * (s - mse)).sum::<f64>() / (rf - 1.0);
    let mse_std_error = (sq_var / rf).sqrt();
    let m4 = values.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / rf;
    let variance_std_error = ((m4 - variance * variance).max(0.0) / rf).sqrt();
    Ok(L2Error {
        reference,
        mean,
        mse,
        mse_std_error,
        ci_low: (mse - Z95 * mse_std_error).max(0.0),
        ci_high: mse + Z95 * mse_std_error,
        variance,
        variance_std_error,
        bias_squared,
        replicas: r,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub n_sites: usize,
    pub error: L2Error,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub time: f64,
    pub k: u32,
    pub rows: Vec<ConvergenceRow>,
    /// Log-log slope of the variance term against N.
    pub variance_slope: Option<LineFit>,
    /// Log-log slope of the mean squared error against N.
    pub mse_slope: Option<LineFit>,
    pub strictly_decreasing: bool,
}

/// Compares `mu^N_{t,k}(f)` across ensembles with `int rho_{t,k} f du` from
/// the reference profile.
pub fn convergence_report(
    ensembles: &[ReplicaEnsemble],
    reference: &DensityProfile,
    t: f64,
    k: u32,
    f: &TestFunction,
) -> Result<ConvergenceReport> {
    if (reference.time - t).abs() > 1e-9 * (1.0 + t.abs()) {
        return Err(Error::Domain(format!(
            "reference profile is at t = {}, requested t = {t}",
            reference.time
        )));
    }
    let target = reference.integrate_against(k as usize, f);
    let rows = ensembles
        .iter()
        .map(|ens| {
            let values: Vec<f64> = ens
                .snapshots_at(t)?
                .iter()
                .map(|c| empirical_density(c, k, f))
                .collect();
            Ok(ConvergenceRow {
                n_sites: ens.n_sites,
                error: l2_error(&values, target)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let fit = |val: &dyn Fn(&L2Error) -> (f64, f64)| -> Option<LineFit> {
        if rows.len() < 2 {
            return None;
        }
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| val(&r.error)).collect();
        if pts.iter().any(|&(v, se)| !(v > 0.0 && se > 0.0)) {
            return None;
        }
        let x: Vec<f64> = rows.iter().map(|r| (r.n_sites as f64).ln()).collect();
        let y: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
        let sd: Vec<f64> = pts.iter().map(|p| p.1 / p.0).collect();
        weighted_line_fit(&x, &y, &sd)
    };
    let variance_slope = fit(&|e| (e.variance, e.variance_std_error));
    let mse_slope = fit(&|e| (e.mse, e.mse_std_error));
    let strictly_decreasing = rows.windows(2).all(|w| w[1].error.mse < w[0].error.mse);
    Ok(ConvergenceReport {
        time: t,
        k,
        rows,
        variance_slope,
        mse_slope,
        strictly_decreasing,
    })
}
