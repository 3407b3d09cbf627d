//! Exact continuous-time simulation of the N-site process by thinning.
//!
//! Finite capacity: candidate moves arrive on every ordered pair at rate
//! `K_1' / N` and are accepted with probability `phi / K_1'`.
//!
//! Infinite capacity: a particle is proposed uniformly (so the source site is
//! drawn proportionally to its occupancy) at total rate `C_1 * total * (N-1)/N`,
//! the target uniformly among the other sites, and the move is accepted with
//! probability `phi / (C_1 * k)`. Both proposal rates are constant in time.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Capacity, RatePolicy, VALIDATION_GRID};
use crate::par;
use crate::rng::{derive_seed, stream, StreamRng};
use crate::torus::{site_coordinate, TorusFn};

/// Resolution used to check an initial profile against its admissible range.
const PROFILE_CHECK_GRID: usize = 1024;
/// Slack allowed on acceptance ratios before reporting an envelope violation.
const ENVELOPE_SLACK: f64 = 1e-12;

/// Occupancy vector over the N sites (0-based; site `i` sits at `(i+1)/N`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Configuration {
    counts: Vec<u32>,
    total: u64,
}

impl Configuration {
    pub fn new(counts: Vec<u32>, capacity: Capacity) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Domain(
                "a configuration needs at least one site".into(),
            ));
        }
        if let Some((i, &c)) = counts
            .iter()
            .enumerate()
            .find(|(_, &c)| !capacity.admits(c))
        {
            return Err(Error::Validation(format!(
                "site {i} holds {c} particles, above capacity {capacity}"
            )));
        }
        let total = counts.iter().map(|&c| u64::from(c)).sum();
        Ok(Self { counts, total })
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Moves one particle from `from` to `to`.
    fn apply_jump(&mut self, from: usize, to: usize) {
        self.counts[from] -= 1;
        self.counts[to] += 1;
    }

    fn recount(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }
}

/// Smooth positive initial profile `psi` together with the capacity it targets.
#[derive(Debug, Clone)]
pub struct InitialProfile {
    pub psi: TorusFn,
    pub capacity: Capacity,
}

impl InitialProfile {
    pub fn new(psi: impl Into<TorusFn>, capacity: Capacity) -> Result<Self> {
        let profile = Self {
            psi: psi.into(),
            capacity,
        };
        profile.validate()?;
        Ok(profile)
    }

    fn check_value(&self, u: f64, value: f64) -> Result<()> {
        let ok = match self.capacity {
            Capacity::Finite(k) => value > 0.0 && value < f64::from(k),
            Capacity::Infinite => value > 0.0 && value.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(match self.capacity {
                Capacity::Finite(k) => {
                    format!("psi({u}) = {value} violates 0 < psi < K = {k}")
                }
                Capacity::Infinite => format!("psi({u}) = {value} violates psi > 0"),
            }))
        }
    }

    /// Checks `0 < psi < K` (or `psi > 0`) on a fine grid.
    pub fn validate(&self) -> Result<()> {
        (0..PROFILE_CHECK_GRID).try_for_each(|j| {
            let u = j as f64 / PROFILE_CHECK_GRID as f64;
            self.check_value(u, self.psi.eval(u))
        })
    }
}

/// Draws a product initial configuration: Binomial(K, psi/K) per site for
/// finite capacity, Poisson(psi) for infinite capacity.
pub fn sample_initial(profile: &InitialProfile, n: usize, seed: u64) -> Result<Configuration> {
    if n == 0 {
        return Err(Error::Domain("N must be at least 1".into()));
    }
    let mut rng = stream(seed);
    let mut counts = Vec::with_capacity(n);
    for i in 0..n {
        let u = site_coordinate(i, n);
        let psi = profile.psi.eval(u);
        profile.check_value(u, psi)?;
        let c = match profile.capacity {
            Capacity::Finite(k) => {
                let b = Binomial::new(u64::from(k), psi / f64::from(k))
                    .map_err(|e| Error::Validation(format!("binomial at u = {u}: {e}")))?;
                b.sample(&mut rng) as u32
            }
            Capacity::Infinite => {
                let p = Poisson::new(psi)
                    .map_err(|e| Error::Validation(format!("poisson at u = {u}: {e}")))?;
                let x: f64 = p.sample(&mut rng);
                if x > f64::from(u32::MAX) {
                    return Err(Error::Resource(format!("site occupancy {x} overflows")));
                }
                x as u32
            }
        };
        counts.push(c);
    }
    Configuration::new(counts, profile.capacity)
}

/// An accepted move.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Jump {
    pub time: f64,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    /// Keep every accepted move.
    pub record_jumps: bool,
    /// Recount the total after every accepted move.
    pub audit_conservation: bool,
    /// Abort when more candidates than this are drawn.
    pub max_candidates: Option<u64>,
}

/// Snapshots at the requested times plus event counters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub observation_times: Vec<f64>,
    pub snapshots: Vec<Configuration>,
    /// Number of candidate events drawn.
    pub event_count: u64,
    pub accepted_count: u64,
    /// Accepted moves checked by the conservation audit.
    pub audited_count: u64,
    pub jumps: Option<Vec<Jump>>,
}

impl Trajectory {
    pub fn at(&self, t: f64) -> Result<&Configuration> {
        time_index(&self.observation_times, t).map(|i| &self.snapshots[i])
    }
}

pub(crate) fn time_index(times: &[f64], t: f64) -> Result<usize> {
    times
        .iter()
        .position(|&s| (s - t).abs() <= 1e-12 * (1.0 + t.abs()))
        .ok_or(Error::UnobservedTime(t))
}

fn check_observation_times(times: &[f64], horizon: f64) -> Result<()> {
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::Domain(format!(
            "horizon {horizon} must be finite and >= 0"
        )));
    }
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Domain("observation times must be sorted".into()));
    }
    if times.iter().any(|&t| !(0.0..=horizon).contains(&t)) {
        return Err(Error::Domain(format!(
            "observation times must lie in [0, {horizon}]"
        )));
    }
    Ok(())
}

/// Fenwick tree over site occupancies for occupancy-weighted source draws.
#[derive(Debug, Clone)]
pub struct OccupancyTree {
    tree: Vec<u64>,
    top: usize,
}

impl OccupancyTree {
    pub fn new(counts: &[u32]) -> Self {
        let n = counts.len();
        let mut tree = vec![0u64; n + 1];
        for (i, &c) in counts.iter().enumerate() {
            let mut j = i + 1;
            while j <= n {
                tree[j] += u64::from(c);
                j += j & j.wrapping_neg();
            }
        }
        let top = if n == 0 {
            0
        } else {
            1 << (usize::BITS - 1 - n.leading_zeros())
        };
        Self { tree, top }
    }

    pub fn add(&mut self, site: usize, delta: i64) {
        let n = self.tree.len() - 1;
        let mut j = site + 1;
        while j <= n {
            self.tree[j] = self.tree[j].wrapping_add_signed(delta);
            j += j & j.wrapping_neg();
        }
    }

    /// Site holding the particle of rank `target` (0-based) in site order.
    pub fn find(&self, mut target: u64) -> usize {
        let n = self.tree.len() - 1;
        let mut pos = 0usize;
        let mut step = self.top;
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= target {
                pos = next;
                target -= self.tree[next];
            }
            step >>= 1;
        }
        pos
    }
}

/// A policy prepared for repeated simulation: coordinates and envelope are
/// computed once.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    policy: &'a RatePolicy,
    envelope: f64,
}

impl<'a> Simulator<'a> {
    /// Uses `sup_rate` for finite capacity and `C_1` otherwise.
    pub fn new(policy: &'a RatePolicy) -> Result<Self> {
        let envelope = match policy.capacity() {
            Capacity::Finite(_) => policy.sup_rate(VALIDATION_GRID)?,
            Capacity::Infinite => policy
                .infinite_bound()
                .ok_or_else(|| Error::Validation("infinite capacity requires C_1".into()))?,
        };
        Ok(Self { policy, envelope })
    }

    /// Explicit envelope (`K_1'` or `C_1`).
    pub fn with_envelope(policy: &'a RatePolicy, envelope: f64) -> Result<Self> {
        if !(envelope >= 0.0 && envelope.is_finite()) {
            return Err(Error::Domain(format!(
                "envelope {envelope} must be finite and >= 0"
            )));
        }
        Ok(Self { policy, envelope })
    }

    pub fn envelope(&self) -> f64 {
        self.envelope
    }

    pub fn simulate(
        &self,
        config: &Configuration,
        horizon: f64,
        observation_times: &[f64],
        seed: u64,
        options: &SimOptions,
    ) -> Result<Trajectory> {
        check_observation_times(observation_times, horizon)?;
        let cap = self.policy.capacity();
        if let Some((i, &c)) = config
            .counts
            .iter()
            .enumerate()
            .find(|(_, &c)| !cap.admits(c))
        {
            return Err(Error::Validation(format!(
                "site {i} holds {c} particles, above capacity {cap}"
            )));
        }
        let mut run = Run::new(config.clone(), observation_times, options);
        let n = config.len();
        if n >= 2 && self.envelope > 0.0 {
            let mut rng = stream(seed);
            match cap {
                Capacity::Finite(_) => self.run_finite(&mut run, horizon, &mut rng)?,
                Capacity::Infinite => self.run_infinite(&mut run, horizon, &mut rng)?,
            }
        }
        Ok(run.finish())
    }

    fn run_finite(&self, run: &mut Run<'_>, horizon: f64, rng: &mut StreamRng) -> Result<()> {
        let n = run.state.len();
        let coords: Vec<f64> = (0..n).map(|i| site_coordinate(i, n)).collect();
        let total_rate = self.envelope * (n - 1) as f64;
        let mut t = 0.0;
        loop {
            t += exponential(rng, total_rate);
            run.observe_before(t);
            if t > horizon {
                return Ok(());
            }
            run.count_candidate()?;
            let from = rng.random_range(0..n);
            let mut to = rng.random_range(0..n - 1);
            if to >= from {
                to += 1;
            }
            let (k, l) = (run.state.counts[from], run.state.counts[to]);
            if k == 0 {
                continue;
            }
            let ratio = self.policy.rate(k, l, coords[from], coords[to]) / self.envelope;
            if ratio > 1.0 + ENVELOPE_SLACK {
                return Err(Error::EnvelopeViolation {
                    ratio,
                    from,
                    to,
                    k,
                    l,
                });
            }
            if rng.random::<f64>() < ratio {
                run.accept(t, from, to)?;
            }
        }
    }

    fn run_infinite(&self, run: &mut Run<'_>, horizon: f64, rng: &mut StreamRng) -> Result<()> {
        let n = run.state.len();
        let total = run.state.total;
        if total == 0 {
            return Ok(());
        }
        let coords: Vec<f64> = (0..n).map(|i| site_coordinate(i, n)).collect();
        let mut tree = OccupancyTree::new(&run.state.counts);
        let total_rate = self.envelope * total as f64 * (n - 1) as f64 / n as f64;
        let mut t = 0.0;
        loop {
            t += exponential(rng, total_rate);
            run.observe_before(t);
            if t > horizon {
                return Ok(());
            }
            run.count_candidate()?;
            let from = tree.find(rng.random_range(0..total));
            let mut to = rng.random_range(0..n - 1);
            if to >= from {
                to += 1;
            }
            let (k, l) = (run.state.counts[from], run.state.counts[to]);
            debug_assert!(k > 0);
            let ratio =
                self.policy.rate(k, l, coords[from], coords[to]) / (self.envelope * f64::from(k));
            if ratio > 1.0 + ENVELOPE_SLACK {
                return Err(Error::EnvelopeViolation {
                    ratio,
                    from,
                    to,
                    k,
                    l,
                });
            }
            if rng.random::<f64>() < ratio {
                run.accept(t, from, to)?;
                tree.add(from, -1);
                tree.add(to, 1);
            }
        }
    }
}

/// Exponential waiting time with the given rate.
#[inline]
fn exponential(rng: &mut StreamRng, rate: f64) -> f64 {
    // 1 - U lies in (0, 1]
    -(1.0 - rng.random::<f64>()).ln() / rate
}

/// Mutable state of one trajectory while it is being generated.
struct Run<'o> {
    state: Configuration,
    times: &'o [f64],
    next_obs: usize,
    snapshots: Vec<Configuration>,
    candidates: u64,
    accepted: u64,
    audited: u64,
    jumps: Option<Vec<Jump>>,
    audit: bool,
    max_candidates: u64,
}

impl<'o> Run<'o> {
    fn new(state: Configuration, times: &'o [f64], options: &SimOptions) -> Self {
        Self {
            state,
            times,
            next_obs: 0,
            snapshots: Vec::with_capacity(times.len()),
            candidates: 0,
            accepted: 0,
            audited: 0,
            jumps: options.record_jumps.then(Vec::new),
            audit: options.audit_conservation,
            max_candidates: options.max_candidates.unwrap_or(u64::MAX),
        }
    }

    /// Records every observation time strictly before `t`.
    fn observe_before(&mut self, t: f64) {
        while self.next_obs < self.times.len() && self.times[self.next_obs] < t {
            self.snapshots.push(self.state.clone());
            self.next_obs += 1;
        }
    }

    fn count_candidate(&mut self) -> Result<()> {
        self.candidates = self
            .candidates
            .checked_add(1)
            .filter(|&c| c <= self.max_candidates)
            .ok_or_else(|| Error::Resource("candidate event counter limit reached".into()))?;
        Ok(())
    }

    fn accept(&mut self, time: f64, from: usize, to: usize) -> Result<()> {
        self.state.apply_jump(from, to);
        self.accepted += 1;
        if let Some(j) = self.jumps.as_mut() {
            j.push(Jump { time, from, to });
        }
        if self.audit {
            let observed = self.state.recount();
            if observed != self.state.total {
                return Err(Error::ConservationViolated {
                    event: self.accepted,
                    observed,
                    expected: self.state.total,
                });
            }
            self.audited += 1;
        }
        Ok(())
    }

    fn finish(mut self) -> Trajectory {
        self.observe_before(f64::INFINITY);
        Trajectory {
            observation_times: self.times.to_vec(),
            snapshots: self.snapshots,
            event_count: self.candidates,
            accepted_count: self.accepted,
            audited_count: self.audited,
            jumps: self.jumps,
        }
    }
}

/// One-shot simulation with the default envelope.
pub fn simulate(
    config: &Configuration,
    policy: &RatePolicy,
    horizon: f64,
    observation_times: &[f64],
    seed: u64,
) -> Result<Trajectory> {
    Simulator::new(policy)?.simulate(
        config,
        horizon,
        observation_times,
        seed,
        &SimOptions::default(),
    )
}

/// Seeds used by replica `index` of an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicaSeeds {
    pub initial: u64,
    pub dynamics: u64,
}

impl ReplicaSeeds {
    pub fn derive(base_seed: u64, index: usize) -> Self {
        let s = derive_seed(base_seed, index as u64);
        Self {
            initial: derive_seed(s, 0),
            dynamics: derive_seed(s, 1),
        }
    }
}

/// Independent replicas of the process started from the product measure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicaEnsemble {
    pub n_sites: usize,
    pub capacity: Capacity,
    pub base_seed: u64,
    pub observation_times: Vec<f64>,
    pub trajectories: Vec<Trajectory>,
}

impl ReplicaEnsemble {
    pub fn replicas(&self) -> usize {
        self.trajectories.len()
    }

    pub fn time_index(&self, t: f64) -> Result<usize> {
        time_index(&self.observation_times, t)
    }

    /// Snapshots of every replica at observation time `t`.
    pub fn snapshots_at(&self, t: f64) -> Result<Vec<&Configuration>> {
        let idx = self.time_index(t)?;
        Ok(self
            .trajectories
            .iter()
            .map(|tr| &tr.snapshots[idx])
            .collect())
    }

    pub fn summary(&self) -> EnsembleSummary {
        let total_of = |tr: &Trajectory| tr.snapshots.first().map_or(0, Configuration::total);
        EnsembleSummary {
            n_sites: self.n_sites,
            replicas: self.replicas(),
            base_seed: self.base_seed,
            observation_times: self.observation_times.clone(),
            mean_total: self
                .trajectories
                .iter()
                .map(|tr| total_of(tr) as f64)
                .sum::<f64>()
                / self.replicas().max(1) as f64,
            totals_conserved: self.trajectories.iter().all(|tr| {
                tr.snapshots
                    .iter()
                    .all(|s| s.total == total_of(tr) && s.recount() == s.total)
            }),
            candidate_events: self.trajectories.iter().map(|tr| tr.event_count).sum(),
            accepted_events: self.trajectories.iter().map(|tr| tr.accepted_count).sum(),
            mean_occupancy: (0..self.observation_times.len())
                .map(|i| {
                    self.trajectories
                        .iter()
                        .map(|tr| tr.snapshots[i].total as f64 / self.n_sites as f64)
                        .sum::<f64>()
                        / self.replicas().max(1) as f64
                })
                .collect(),
        }
    }
}

/// Aggregate numbers for an ensemble, suitable for JSON export.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleSummary {
    pub n_sites: usize,
    pub replicas: usize,
    pub base_seed: u64,
    pub observation_times: Vec<f64>,
    pub mean_total: f64,
    pub totals_conserved: bool,
    pub candidate_events: u64,
    pub accepted_events: u64,
    pub mean_occupancy: Vec<f64>,
}

/// Parameters shared by every replica of an ensemble.
#[derive(Debug, Clone)]
pub struct EnsembleSpec<'a> {
    pub profile: &'a InitialProfile,
    pub policy: &'a RatePolicy,
    pub n_sites: usize,
    pub horizon: f64,
    pub observation_times: &'a [f64],
}

fn run_one(
    spec: &EnsembleSpec<'_>,
    sim: &Simulator<'_>,
    base_seed: u64,
    index: usize,
    options: &SimOptions,
) -> Result<Trajectory> {
    let seeds = ReplicaSeeds::derive(base_seed, index);
    let init = sample_initial(spec.profile, spec.n_sites, seeds.initial)?;
    sim.simulate(
        &init,
        spec.horizon,
        spec.observation_times,
        seeds.dynamics,
        options,
    )
}

fn check_spec(spec: &EnsembleSpec<'_>, replicas: usize) -> Result<()> {
    if replicas == 0 {
        return Err(Error::Domain("replica count must be at least 1".into()));
    }
    if spec.profile.capacity != spec.policy.capacity() {
        return Err(Error::Validation(format!(
            "profile capacity {} does not match policy capacity {}",
            spec.profile.capacity,
            spec.policy.capacity()
        )));
    }
    spec.profile.validate()?;
    check_observation_times(spec.observation_times, spec.horizon)
}

/// Runs `replicas` independent trajectories, in parallel when enabled.
pub fn run_replicas(
    spec: &EnsembleSpec<'_>,
    replicas: usize,
    base_seed: u64,
) -> Result<ReplicaEnsemble> {
    run_replicas_with(spec, replicas, base_seed, &SimOptions::default())
}

pub fn run_replicas_with(
    spec: &EnsembleSpec<'_>,
    replicas: usize,
    base_seed: u64,
    options: &SimOptions,
) -> Result<ReplicaEnsemble> {
    check_spec(spec, replicas)?;
    let sim = Simulator::new(spec.policy)?;
    let trajectories =
        par::try_map_indexed(replicas, |r| run_one(spec, &sim, base_seed, r, options))?;
    Ok(assemble(spec, base_seed, trajectories))
}

/// Same as [`run_replicas`] but always on the calling thread.
pub fn run_replicas_sequential(
    spec: &EnsembleSpec<'_>,
    replicas: usize,
    base_seed: u64,
) -> Result<ReplicaEnsemble> {
    check_spec(spec, replicas)?;
    let sim = Simulator::new(spec.policy)?;
    let options = SimOptions::default();
    let trajectories =
        par::map_indexed_sequential(replicas, |r| run_one(spec, &sim, base_seed, r, &options))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
    Ok(assemble(spec, base_seed, trajectories))
}

fn assemble(
    spec: &EnsembleSpec<'_>,
    base_seed: u64,
    trajectories: Vec<Trajectory>,
) -> ReplicaEnsemble {
    ReplicaEnsemble {
        n_sites: spec.n_sites,
        capacity: spec.policy.capacity(),
        base_seed,
        observation_times: spec.observation_times.to_vec(),
        trajectories,
    }
}
