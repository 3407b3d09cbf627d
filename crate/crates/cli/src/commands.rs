//! The five subcommands.

use conserva_core::fields::{
    convergence_report, decay_study, fluctuation_variance, ConvergenceReport, DecayPanel,
    DecayReport,
};
use conserva_core::graphical::{overlap_study, OverlapStudy};
use conserva_core::meanfield::{
    init_profile, integrate, step_halving, tail_check, theta, DensityProfile, MeanFieldRun,
    RichardsonReport, TailReport,
};
use conserva_core::model::{Capacity, VALIDATION_GRID};
use conserva_core::ou::{evolve_covariance, initial_covariance, project_fn};
use conserva_core::rng::derive_seed;
use conserva_core::sim::{EnsembleSpec, EnsembleSummary};
use conserva_core::torus::site_coordinate;
use conserva_core::{run_replicas, ReplicaEnsemble};
use serde::Serialize;
use serde_json::json;

use crate::config::Resolved;
use crate::output::Output;
use crate::Failure;

/// Thresholds of the `--check` gates.
pub mod gate {
    pub const DRIFT: f64 = 1e-8;
    pub const TAIL: f64 = 1e-8;
    pub const SLOPE: f64 = -0.8;
    pub const SLOPE_CI_EXCLUDES: f64 = -0.5;
    pub const OVERLAP_SPREAD: f64 = 0.5;
    pub const INITIAL_VARIANCE: f64 = 1e-6;
    pub const RELATIVE: f64 = 0.10;
    pub const STD_ERRORS: f64 = 3.0;
}

/// Result of a `--check` gate: the failed conditions, if any.
#[derive(Debug, Default, Serialize)]
pub struct Check {
    pub failures: Vec<String>,
}

impl Check {
    fn require(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failures.push(what.into());
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn numerical(e: conserva_core::Error) -> Failure {
    Failure::Numerical(e.to_string())
}

fn ensemble(
    res: &Resolved,
    n: usize,
    times: &[f64],
    replicas: usize,
    seed: u64,
) -> Result<ReplicaEnsemble, Failure> {
    let spec = EnsembleSpec {
        profile: &res.profile,
        policy: &res.policy,
        n_sites: n,
        horizon: times.iter().cloned().fold(0.0, f64::max),
        observation_times: times,
    };
    run_replicas(&spec, replicas, seed).map_err(numerical)
}

fn kmax(res: &Resolved) -> usize {
    match res.policy.capacity() {
        Capacity::Finite(k) => k as usize,
        Capacity::Infinite => res.config.meanfield.kmax.unwrap_or(0),
    }
}

fn meanfield_run(
    res: &Resolved,
    grid: usize,
    horizon: f64,
) -> Result<(DensityProfile, MeanFieldRun), Failure> {
    let cap = res.policy.capacity();
    let k = if cap.is_finite() {
        None
    } else {
        Some(kmax(res))
    };
    let p0 = init_profile(&res.f_psi(), cap, k, grid)
        .map_err(|e| Failure::Config(format!("psi: {e}")))?;
    let run = integrate(&p0, &res.policy, horizon, res.config.meanfield.dt).map_err(numerical)?;
    Ok((p0, run))
}

impl Resolved {
    fn f_psi(&self) -> conserva_core::TorusFn {
        self.config.psi.clone().into()
    }
}

#[derive(Serialize)]
struct SnapshotRow {
    replica: usize,
    time: f64,
    site: usize,
    count: u32,
}

pub fn simulate(res: &Resolved, out: &Output, check: bool) -> Result<Check, Failure> {
    let cfg = &res.config;
    let ens = ensemble(
        res,
        cfg.sim.n,
        &res.observation_times,
        cfg.sim.replicas,
        cfg.seed,
    )?;
    let mut rows = Vec::new();
    for (r, tr) in ens.trajectories.iter().enumerate() {
        for (t, snap) in tr.observation_times.iter().zip(&tr.snapshots) {
            rows.extend(
                snap.counts()
                    .iter()
                    .enumerate()
                    .map(|(site, &count)| SnapshotRow {
                        replica: r,
                        time: *t,
                        site,
                        count,
                    }),
            );
        }
    }
    out.csv("trajectories.csv", &rows)?;
    let summary: EnsembleSummary = ens.summary();
    let mut gate = Check::default();
    if check {
        gate.require(
            summary.totals_conserved,
            "particle totals changed along a trajectory",
        );
    }
    out.json(
        "ensemble.json",
        &json!({ "summary": summary, "check": check.then_some(&gate) }),
    )?;
    Ok(gate)
}

#[derive(Serialize)]
struct ProfileRow {
    time: f64,
    k: usize,
    j: usize,
    u: f64,
    value: f64,
}

#[derive(Serialize)]
struct MeanFieldReport {
    summary: conserva_core::meanfield::RunSummary,
    step_halving: RichardsonReport,
    tails: Vec<TailReport>,
    theta: Vec<(f64, Vec<f64>)>,
}

pub fn meanfield(res: &Resolved, out: &Output, check: bool) -> Result<Check, Failure> {
    let cfg = &res.config;
    let (p0, run) = meanfield_run(res, cfg.meanfield.grid, cfg.sim.horizon)?;
    let mut rows = Vec::new();
    let mut tails = Vec::new();
    let mut thetas = Vec::new();
    for &t in &res.observation_times {
        let p = run.at(t).map_err(numerical)?;
        for k in 0..=p.kmax {
            for j in 0..p.grid {
                rows.push(ProfileRow {
                    time: t,
                    k,
                    j,
                    u: site_coordinate(j, p.grid),
                    value: p.get(k, j),
                });
            }
        }
        if !p.capacity.is_finite() {
            tails.push(tail_check(&p).map_err(numerical)?);
            thetas.push((t, theta(&p)));
        }
    }
    out.csv("profiles.csv", &rows)?;
    out.csv("diagnostics.csv", &run.diagnostics)?;
    let halving =
        step_halving(&p0, &res.policy, cfg.sim.horizon, cfg.meanfield.dt).map_err(numerical)?;
    let report = MeanFieldReport {
        summary: run.summary(),
        step_halving: halving,
        tails,
        theta: thetas,
    };
    let mut gate = Check::default();
    if check {
        let s = &report.summary;
        gate.require(
            s.max_normalization_drift <= gate::DRIFT,
            format!(
                "normalization drift {:e} > {:e}",
                s.max_normalization_drift,
                gate::DRIFT
            ),
        );
        if res.policy.capacity().is_finite() {
            gate.require(
                s.max_mass_drift <= gate::DRIFT,
                format!("mass drift {:e} > {:e}", s.max_mass_drift, gate::DRIFT),
            );
        }
        for t in &report.tails {
            gate.require(
                t.sup_tails[0] <= gate::TAIL,
                format!(
                    "first-moment tail {:e} at t = {} exceeds {:e}",
                    t.sup_tails[0],
                    t.time,
                    gate::TAIL
                ),
            );
        }
    }
    out.json(
        "meanfield.json",
        &json!({ "report": report, "check": check.then_some(&gate) }),
    )?;
    Ok(gate)
}

#[derive(Serialize)]
struct HydroRow {
    n: usize,
    replicas: usize,
    mean: f64,
    reference: f64,
    mse: f64,
    mse_std_error: f64,
    ci_low: f64,
    ci_high: f64,
    variance: f64,
    variance_std_error: f64,
    bias_squared: f64,
}

pub fn hydro(res: &Resolved, out: &Output, check: bool) -> Result<Check, Failure> {
    let cfg = &res.config;
    let t = *res.observation_times.last().expect("validated non-empty");
    let (_, run) = meanfield_run(res, cfg.meanfield.grid, t)?;
    let reference = run.last().clone();
    let ensembles = res
        .n_list
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            ensemble(
                res,
                n,
                &[t],
                cfg.sim.replicas,
                derive_seed(cfg.seed, i as u64),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let rep: ConvergenceReport =
        convergence_report(&ensembles, &reference, t, cfg.observable.level, &res.f)
            .map_err(numerical)?;
    let rows: Vec<HydroRow> = rep
        .rows
        .iter()
        .map(|r| HydroRow {
            n: r.n_sites,
            replicas: r.error.replicas,
            mean: r.error.mean,
            reference: r.error.reference,
            mse: r.error.mse,
            mse_std_error: r.error.mse_std_error,
            ci_low: r.error.ci_low,
            ci_high: r.error.ci_high,
            variance: r.error.variance,
            variance_std_error: r.error.variance_std_error,
            bias_squared: r.error.bias_squared,
        })
        .collect();
    out.csv("hydro.csv", &rows)?;
    let mut gate = Check::default();
    if check {
        gate.require(
            rep.strictly_decreasing,
            "L2 error is not strictly decreasing in N",
        );
        match &rep.variance_slope {
            Some(s) => gate.require(
                s.slope <= gate::SLOPE,
                format!("variance slope {:.3} > {}", s.slope, gate::SLOPE),
            ),
            None => gate.require(false, "variance slope needs at least two sizes"),
        }
    }
    out.json(
        "hydro.json",
        &json!({ "report": rep, "check": check.then_some(&gate) }),
    )?;
    Ok(gate)
}

#[derive(Serialize)]
struct FluctRow {
    time: f64,
    k: u32,
    empirical: f64,
    std_error: f64,
    theory: f64,
}

#[derive(Serialize)]
struct ProjectionRow {
    t: f64,
    k: usize,
    m: usize,
    value: f64,
}

pub fn fluct(res: &Resolved, out: &Output, check: bool) -> Result<Check, Failure> {
    let cfg = &res.config;
    let cap = res
        .policy
        .capacity()
        .as_finite()
        .ok_or_else(|| Failure::Config("fluct needs a finite capacity".into()))?;
    for &t in &res.observation_times {
        let steps = t / cfg.ou.dt;
        if (steps - steps.round()).abs() > 1e-6 {
            return Err(Failure::Config(format!(
                "observation time {t} is not a multiple of ou.dt = {}",
                cfg.ou.dt
            )));
        }
    }
    let horizon = *res.observation_times.last().expect("validated non-empty");
    let m = cfg.ou.grid;
    let (_, run) = meanfield_run(res, m, horizon)?;
    let psi = res.f_psi();
    let s0 = initial_covariance(&psi, cap, m).map_err(numerical)?;
    let series = evolve_covariance(
        &s0,
        &run,
        &res.policy,
        horizon,
        cfg.ou.dt,
        &res.observation_times,
    )
    .map_err(numerical)?;
    let ens = ensemble(
        res,
        cfg.sim.n,
        &res.observation_times,
        cfg.sim.replicas,
        cfg.seed,
    )?;
    let k = cfg.observable.level;
    let mut rows = Vec::new();
    let mut projections = Vec::new();
    for (idx, (&t, sigma)) in res.observation_times.iter().zip(&series).enumerate() {
        let emp = fluctuation_variance(&ens, t, k, &res.f).map_err(numerical)?;
        rows.push(FluctRow {
            time: t,
            k,
            empirical: emp.variance,
            std_error: emp.std_error,
            theory: project_fn(sigma, &res.f, &res.f, k as usize, k as usize).map_err(numerical)?,
        });
        for a in 0..=cap as usize {
            for b in 0..=cap as usize {
                projections.push(ProjectionRow {
                    t,
                    k: a,
                    m: b,
                    value: project_fn(sigma, &res.f, &res.f, a, b).map_err(numerical)?,
                });
            }
        }
        let d = sigma.dim();
        out.matrix(
            &format!("sigma_{idx}.bin"),
            d,
            d,
            |i, j| sigma.matrix[(i, j)],
            json!({ "time": t, "grid": m, "capacity": cap }),
        )?;
    }
    out.csv("fluct.csv", &rows)?;
    out.csv("projections.csv", &projections)?;
    let closed = initial_variance(res, cap, k);
    let mut gate = Check::default();
    if check {
        for r in &rows {
            if r.time == 0.0 {
                gate.require(
                    (r.theory - closed).abs() <= gate::INITIAL_VARIANCE,
                    format!(
                        "initial covariance {} differs from the integral {closed}",
                        r.theory
                    ),
                );
            } else {
                let tol = (gate::RELATIVE * r.theory.abs()).max(gate::STD_ERRORS * r.std_error);
                gate.require(
                    (r.empirical - r.theory).abs() <= tol,
                    format!(
                        "t = {}: empirical {} vs theory {} (tolerance {tol})",
                        r.time, r.empirical, r.theory
                    ),
                );
            }
        }
    }
    out.json(
        "fluct.json",
        &json!({ "rows": rows, "initial_integral": closed, "check": check.then_some(&gate) }),
    )?;
    Ok(gate)
}

/// `int p_k (1 - p_k) f^2 du` by a fine midpoint rule.
fn initial_variance(res: &Resolved, cap: u32, k: u32) -> f64 {
    let fine = 1 << 16;
    let psi = res.f_psi();
    (0..fine)
        .map(|i| {
            let u = (i as f64 + 0.5) / fine as f64;
            let p = psi.eval(u) / f64::from(cap);
            let mut c = 1.0;
            for j in 0..k {
                c *= f64::from(cap - j) / f64::from(j + 1);
            }
            let pk = c * p.powi(k as i32) * (1.0 - p).powi((cap - k) as i32);
            pk * (1.0 - pk) * res.f.eval(u).powi(2)
        })
        .sum::<f64>()
        / fine as f64
}

#[derive(Serialize)]
struct DecayCsv {
    n: usize,
    replicas: usize,
    max_abs_covariance: f64,
    std_error: f64,
    x: usize,
    y: usize,
    k1: u32,
    k2: u32,
}

#[derive(Serialize)]
struct OverlapCsv {
    n: usize,
    replicas: usize,
    estimate: f64,
    ci_low: f64,
    ci_high: f64,
    bound: f64,
}

pub fn indep(res: &Resolved, out: &Output, check: bool) -> Result<Check, Failure> {
    let cfg = &res.config;
    let ind = &cfg.indep;
    let panel_top = match res.policy.capacity() {
        Capacity::Finite(k) => k,
        Capacity::Infinite => ind.truncation.unwrap_or(3),
    };
    let envelope = match (ind.envelope, res.policy.capacity()) {
        (Some(e), _) => e,
        (None, Capacity::Finite(_)) => res.policy.sup_rate(VALIDATION_GRID).map_err(numerical)?,
        (None, Capacity::Infinite) => {
            let level = ind.truncation.ok_or_else(|| {
                Failure::Config(
                    "indep.truncation or indep.envelope is required for infinite capacity".into(),
                )
            })?;
            res.policy.infinite_bound().unwrap_or(0.0) * f64::from(level)
        }
    };
    let decay: DecayReport = decay_study(
        &res.policy,
        &res.profile,
        ind.time,
        &res.n_list,
        ind.decay_replicas,
        derive_seed(cfg.seed, 0),
        &DecayPanel::quarter(panel_top),
    )
    .map_err(numerical)?;
    let overlap: OverlapStudy = overlap_study(
        &res.n_list,
        envelope,
        ind.overlap_horizon,
        ind.overlap_replicas,
        derive_seed(cfg.seed, 1),
    )
    .map_err(numerical)?;
    out.csv(
        "decay.csv",
        &decay
            .rows
            .iter()
            .map(|r| DecayCsv {
                n: r.n_sites,
                replicas: r.replicas,
                max_abs_covariance: r.max_abs_covariance,
                std_error: r.std_error,
                x: r.argmax.0,
                y: r.argmax.1,
                k1: r.argmax.2,
                k2: r.argmax.3,
            })
            .collect::<Vec<_>>(),
    )?;
    out.csv(
        "overlap.csv",
        &overlap
            .rows
            .iter()
            .map(|r| OverlapCsv {
                n: r.n_sites,
                replicas: r.replicas,
                estimate: r.estimate,
                ci_low: r.ci_low,
                ci_high: r.ci_high,
                bound: r.bound,
            })
            .collect::<Vec<_>>(),
    )?;
    let mut gate = Check::default();
    if check {
        match &decay.slope {
            Some(f) => {
                gate.require(
                    f.slope <= gate::SLOPE,
                    format!("covariance slope {:.3} > {}", f.slope, gate::SLOPE),
                );
                gate.require(
                    f.ci_high < gate::SLOPE_CI_EXCLUDES,
                    format!("covariance slope CI reaches {:.3}", f.ci_high),
                );
            }
            None => gate.require(
                false,
                "covariance panel maxima are indistinguishable from noise",
            ),
        }
        for r in &overlap.rows {
            gate.require(
                r.estimate <= r.bound,
                format!(
                    "N = {}: overlap {} above C3/N = {}",
                    r.n_sites, r.estimate, r.bound
                ),
            );
        }
        gate.require(
            overlap.scaled_spread < gate::OVERLAP_SPREAD,
            format!(
                "N * overlap varies by {:.1}%",
                100.0 * overlap.scaled_spread
            ),
        );
    }
    out.json(
        "indep.json",
        &json!({ "envelope": envelope, "decay": decay, "overlap": overlap, "check": check.then_some(&gate) }),
    )?;
    Ok(gate)
}
