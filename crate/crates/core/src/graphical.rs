//! Graphical construction: Poisson arrows on ordered pairs with uniform marks,
//! evolution driven by those arrows, and backward influence sets.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Capacity, RatePolicy, VALIDATION_GRID};
use crate::par;
use crate::rng::derive_seed;
use crate::sim::{Configuration, Trajectory};
use crate::stats::{line_fit, wilson_interval, LineFit, Z95};
use crate::torus::site_coordinate;

/// One event of the stream on the ordered pair `(from, to)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Arrow {
    pub time: f64,
    pub from: usize,
    pub to: usize,
    pub mark: f64,
}

#[derive(Debug, Clone)]
enum Source {
    /// Each pair's events are regenerated on demand from a per-pair seed.
    Lazy {
        seed: u64,
    },
    Explicit(BTreeMap<(usize, usize), Vec<(f64, f64)>>),
}

/// Independent Poisson streams of rate `K_1 / N` on every ordered pair,
/// restricted to `[0, horizon]`.
#[derive(Debug, Clone)]
pub struct ArrowStream {
    n: usize,
    envelope: f64,
    horizon: f64,
    source: Source,
}

/// Draws an arrow stream; pairs are materialized only when queried.
pub fn sample_arrows(n: usize, envelope: f64, horizon: f64, seed: u64) -> Result<ArrowStream> {
    check_stream_params(n, envelope, horizon)?;
    Ok(ArrowStream {
        n,
        envelope,
        horizon,
        source: Source::Lazy { seed },
    })
}

fn check_stream_params(n: usize, envelope: f64, horizon: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::Domain("N must be at least 1".into()));
    }
    if !(envelope >= 0.0 && envelope.is_finite()) {
        return Err(Error::Domain(format!(
            "envelope {envelope} must be finite and >= 0"
        )));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::Domain(format!(
            "horizon {horizon} must be finite and >= 0"
        )));
    }
    Ok(())
}

impl ArrowStream {
    /// A stream with the given events. Arrows must lie in `[0, horizon]`,
    /// join distinct sites and carry marks in `[0, 1]`.
    pub fn explicit(n: usize, envelope: f64, horizon: f64, arrows: &[Arrow]) -> Result<Self> {
        check_stream_params(n, envelope, horizon)?;
        let mut pairs: BTreeMap<(usize, usize), Vec<(f64, f64)>> = BTreeMap::new();
        for a in arrows {
            if a.from >= n || a.to >= n || a.from == a.to {
                return Err(Error::Domain(format!(
                    "arrow ({}, {}) is not a pair of distinct sites",
                    a.from, a.to
                )));
            }
            if !(0.0..=horizon).contains(&a.time) {
                return Err(Error::Domain(format!(
                    "arrow time {} outside [0, {horizon}]",
                    a.time
                )));
            }
            if !(0.0..=1.0).contains(&a.mark) {
                return Err(Error::Domain(format!("mark {} outside [0, 1]", a.mark)));
            }
            pairs
                .entry((a.from, a.to))
                .or_default()
                .push((a.time, a.mark));
        }
        for events in pairs.values_mut() {
            events.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        Ok(Self {
            n,
            envelope,
            horizon,
            source: Source::Explicit(pairs),
        })
    }

    pub fn n_sites(&self) -> usize {
        self.n
    }

    /// `K_1`: arrows run at rate `K_1 / N` per ordered pair.
    pub fn envelope(&self) -> f64 {
        self.envelope
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// `(time, mark)` events of the ordered pair, sorted by time.
    pub fn pair_events(&self, from: usize, to: usize) -> Vec<(f64, f64)> {
        match &self.source {
            Source::Explicit(pairs) => pairs.get(&(from, to)).cloned().unwrap_or_default(),
            Source::Lazy { seed } => {
                let rate = self.envelope / self.n as f64;
                if rate == 0.0 || self.horizon == 0.0 || from == to {
                    return Vec::new();
                }
                let pair = (from * self.n + to) as u64;
                let mut rng = Xoshiro256PlusPlus::seed_from_u64(derive_seed(*seed, pair));
                let mut out = Vec::new();
                let mut t = 0.0;
                loop {
                    t += -(1.0 - rng.random::<f64>()).ln() / rate;
                    if t > self.horizon {
                        return out;
                    }
                    out.push((t, rng.random::<f64>()));
                }
            }
        }
    }

    /// Every arrow, ordered by time and then by pair index.
    pub fn merged(&self) -> Vec<Arrow> {
        let mut all = Vec::new();
        for from in 0..self.n {
            for to in (0..self.n).filter(|&to| to != from) {
                all.extend(
                    self.pair_events(from, to)
                        .into_iter()
                        .map(|(time, mark)| Arrow {
                            time,
                            from,
                            to,
                            mark,
                        }),
                );
            }
        }
        let n = self.n;
        all.sort_by(|a, b| {
            a.time
                .total_cmp(&b.time)
                .then((a.from * n + a.to).cmp(&(b.from * n + b.to)))
        });
        all
    }
}

/// Applies the arrows in time order: the move on `(x, y)` happens iff
/// `mark <= phi / K_1`.
pub fn evolve_with_arrows(
    eta0: &Configuration,
    arrows: &ArrowStream,
    policy: &RatePolicy,
    observation_times: &[f64],
) -> Result<Trajectory> {
    let cap = policy.capacity();
    if !cap.is_finite() {
        return Err(Error::Unsupported(
            "arrow-driven evolution needs a finite capacity".into(),
        ));
    }
    let n = arrows.n_sites();
    if eta0.len() != n {
        return Err(Error::Domain(format!(
            "configuration has {} sites, arrow stream has {n}",
            eta0.len()
        )));
    }
    if observation_times.windows(2).any(|w| w[1] < w[0])
        || observation_times
            .iter()
            .any(|&t| !(0.0..=arrows.horizon()).contains(&t))
    {
        return Err(Error::Domain(format!(
            "observation times must be sorted within [0, {}]",
            arrows.horizon()
        )));
    }
    let k1 = arrows.envelope();
    let coords: Vec<f64> = (0..n).map(|i| site_coordinate(i, n)).collect();
    let mut counts = eta0.counts().to_vec();
    let mut snapshots = Vec::with_capacity(observation_times.len());
    let mut next_obs = 0;
    let mut accepted = 0u64;
    let events = arrows.merged();
    let snap = |counts: &[u32]| Configuration::new(counts.to_vec(), cap);
    for a in &events {
        while next_obs < observation_times.len() && observation_times[next_obs] < a.time {
            snapshots.push(snap(&counts)?);
            next_obs += 1;
        }
        let (k, l) = (counts[a.from], counts[a.to]);
        let rate = policy.rate(k, l, coords[a.from], coords[a.to]);
        if rate == 0.0 {
            continue;
        }
        let ratio = rate / k1;
        if ratio > 1.0 + 1e-12 {
            return Err(Error::EnvelopeViolation {
                ratio,
                from: a.from,
                to: a.to,
                k,
                l,
            });
        }
        if a.mark <= ratio {
            counts[a.from] -= 1;
            counts[a.to] += 1;
            accepted += 1;
        }
    }
    while next_obs < observation_times.len() {
        snapshots.push(snap(&counts)?);
        next_obs += 1;
    }
    Ok(Trajectory {
        observation_times: observation_times.to_vec(),
        snapshots,
        event_count: events.len() as u64,
        accepted_count: accepted,
        audited_count: 0,
        jumps: None,
    })
}

/// Sites that can influence `root` by time `horizon`, grouped by the length
/// of their shortest influence path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InfluenceSet {
    pub root: usize,
    pub horizon: f64,
    /// Sorted member sites.
    pub members: Vec<usize>,
    /// `layers[m]` holds the sites whose shortest path has `m` arrows.
    pub layers: Vec<Vec<usize>>,
}

impl InfluenceSet {
    pub fn contains(&self, site: usize) -> bool {
        self.members.binary_search(&site).is_ok()
    }

    pub fn intersects(&self, other: &InfluenceSet) -> bool {
        let (mut i, mut j) = (0, 0);
        while i < self.members.len() && j < other.members.len() {
            match self.members[i].cmp(&other.members[j]) {
                Ordering::Less => i += 1,
                Ordering::Greater => j += 1,
                Ordering::Equal => return true,
            }
        }
        false
    }
}

/// Heap entry: an undirected contact between two sites at a given time.
#[derive(Debug, Clone, Copy)]
struct Contact {
    time: f64,
    a: usize,
    b: usize,
}

impl PartialEq for Contact {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Contact {}
impl PartialOrd for Contact {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Contact {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then((self.a, self.b).cmp(&(other.a, other.b)))
    }
}

/// Backward sweep from `(root, t)`: contacts are processed in decreasing
/// time, equal times as one batch against the state before the batch, so
/// paths use strictly increasing times in `(0, t]`. Only pairs touching a
/// reached site are materialized.
pub fn influence_set(arrows: &ArrowStream, root: usize, t: f64) -> Result<InfluenceSet> {
    let n = arrows.n_sites();
    if root >= n {
        return Err(Error::Domain(format!("site {root} outside 0..{n}")));
    }
    if !(t >= 0.0 && t <= arrows.horizon()) {
        return Err(Error::Domain(format!(
            "time {t} outside [0, {}]",
            arrows.horizon()
        )));
    }
    const UNREACHED: u32 = u32::MAX;
    let mut dist = vec![UNREACHED; n];
    let mut expanded = vec![false; n];
    let mut heap = BinaryHeap::new();

    let expand = |c: usize,
                  limit: f64,
                  inclusive: bool,
                  expanded: &mut [bool],
                  heap: &mut BinaryHeap<Contact>| {
        for d in (0..n).filter(|&d| d != c && !expanded[d]) {
            for (from, to) in [(c, d), (d, c)] {
                for (time, _) in arrows.pair_events(from, to) {
                    let before = if inclusive {
                        time <= limit
                    } else {
                        time < limit
                    };
                    if time > 0.0 && before {
                        heap.push(Contact { time, a: c, b: d });
                    }
                }
            }
        }
        expanded[c] = true;
    };

    dist[root] = 0;
    expand(root, t, true, &mut expanded, &mut heap);
    let mut batch = Vec::new();
    let mut updates = Vec::new();
    while let Some(top) = heap.pop() {
        let s = top.time;
        batch.clear();
        batch.push(top);
        while heap.peek().is_some_and(|c| c.time == s) {
            batch.push(heap.pop().expect("peeked"));
        }
        updates.clear();
        for c in &batch {
            let (da, db) = (dist[c.a], dist[c.b]);
            if da != UNREACHED && da + 1 < db {
                updates.push((c.b, da + 1));
            }
            if db != UNREACHED && db + 1 < da {
                updates.push((c.a, db + 1));
            }
        }
        let mut fresh = Vec::new();
        for &(site, d) in &updates {
            if dist[site] == UNREACHED {
                fresh.push(site);
            }
            dist[site] = dist[site].min(d);
        }
        fresh.sort_unstable();
        fresh.dedup();
        for c in fresh {
            expand(c, s, false, &mut expanded, &mut heap);
        }
    }

    let members: Vec<usize> = (0..n).filter(|&i| dist[i] != UNREACHED).collect();
    let depth = members.iter().map(|&i| dist[i]).max().unwrap_or(0) as usize;
    let mut layers = vec![Vec::new(); depth + 1];
    for &i in &members {
        layers[dist[i] as usize].push(i);
    }
    Ok(InfluenceSet {
        root,
        horizon: t,
        members,
        layers,
    })
}

/// `C_3 = 2 e^{4 K_1 T} + e^{8 K_1 T}`.
pub fn overlap_constant(envelope: f64, horizon: f64) -> f64 {
    2.0 * (4.0 * envelope * horizon).exp() + (8.0 * envelope * horizon).exp()
}

/// Monte Carlo estimate of `P(Gamma_{T,x} and Gamma_{T,y} intersect)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapEstimate {
    pub n_sites: usize,
    pub envelope: f64,
    pub horizon: f64,
    pub replicas: usize,
    pub hits: u64,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// `C_3 / N`.
    pub bound: f64,
}

pub fn overlap_probability(
    n: usize,
    envelope: f64,
    horizon: f64,
    x: usize,
    y: usize,
    replicas: usize,
    seed: u64,
) -> Result<OverlapEstimate> {
    if x == y || x >= n || y >= n {
        return Err(Error::Domain(format!(
            "need distinct sites below {n}, got {x} and {y}"
        )));
    }
    if replicas == 0 {
        return Err(Error::Domain("replica count must be at least 1".into()));
    }
    check_stream_params(n, envelope, horizon)?;
    let outcomes = par::try_map_indexed(replicas, |r| -> Result<bool> {
        let arrows = sample_arrows(n, envelope, horizon, derive_seed(seed, r as u64))?;
        let gx = influence_set(&arrows, x, horizon)?;
        let gy = influence_set(&arrows, y, horizon)?;
        Ok(gx.intersects(&gy))
    })?;
    let hits = outcomes.iter().filter(|&&h| h).count() as u64;
    let (ci_low, ci_high) = wilson_interval(hits, replicas as u64, Z95);
    Ok(OverlapEstimate {
        n_sites: n,
        envelope,
        horizon,
        replicas,
        hits,
        estimate: hits as f64 / replicas as f64,
        ci_low,
        ci_high,
        bound: overlap_constant(envelope, horizon) / n as f64,
    })
}

/// Overlap estimate with the envelope taken from a policy. Infinite capacity
/// needs an occupancy truncation level; the envelope is then `C_1` times
/// that level.
#[allow(clippy::too_many_arguments)]
pub fn overlap_for_policy(
    n: usize,
    policy: &RatePolicy,
    horizon: f64,
    x: usize,
    y: usize,
    replicas: usize,
    seed: u64,
    truncation: Option<u32>,
) -> Result<OverlapEstimate> {
    let envelope = match policy.capacity() {
        Capacity::Finite(_) => policy.sup_rate(VALIDATION_GRID)?,
        Capacity::Infinite => {
            let level = truncation.ok_or_else(|| {
                Error::Unsupported(
                    "infinite capacity overlap needs an occupancy truncation level".into(),
                )
            })?;
            policy.infinite_bound().unwrap_or(0.0) * f64::from(level)
        }
    };
    overlap_probability(n, envelope, horizon, x, y, replicas, seed)
}

/// Overlap estimates over several N with the log-log slope of the estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapStudy {
    pub rows: Vec<OverlapEstimate>,
    /// Absent with fewer than two sizes or any zero estimate.
    pub slope: Option<LineFit>,
    /// `max(N p) / min(N p) - 1`.
    pub scaled_spread: f64,
}

/// Runs [`overlap_probability`] for each N with sites `0` and `N/2`.
pub fn overlap_study(
    n_list: &[usize],
    envelope: f64,
    horizon: f64,
    replicas: usize,
    seed: u64,
) -> Result<OverlapStudy> {
    let rows = n_list
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            if n < 2 {
                return Err(Error::Domain("overlap study needs N >= 2".into()));
            }
            overlap_probability(
                n,
                envelope,
                horizon,
                0,
                n / 2,
                replicas,
                derive_seed(seed, i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let positive = rows.iter().all(|r| r.estimate > 0.0);
    let slope = if positive {
        let x: Vec<f64> = rows.iter().map(|r| (r.n_sites as f64).ln()).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.estimate.ln()).collect();
        line_fit(&x, &y)
    } else {
        None
    };
    let scaled: Vec<f64> = rows.iter().map(|r| r.estimate * r.n_sites as f64).collect();
    let hi = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = scaled.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(OverlapStudy {
        rows,
        slope,
        scaled_spread: if lo > 0.0 {
            hi / lo - 1.0
        } else {
            f64::INFINITY
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_preset, ModelPreset};
    use crate::torus::Kernel;

    fn arrow(time: f64, from: usize, to: usize) -> Arrow {
        Arrow {
            time,
            from,
            to,
            mark: 0.5,
        }
    }

    #[test]
    fn empty_horizon_gives_no_arrows() {
        let s = sample_arrows(5, 1.0, 0.0, 1).unwrap();
        assert!(s.merged().is_empty());
    }

    #[test]
    fn two_sites_have_two_streams() {
        let s = sample_arrows(2, 50.0, 1.0, 3).unwrap();
        let m = s.merged();
        assert!(m
            .iter()
            .all(|a| (a.from, a.to) == (0, 1) || (a.from, a.to) == (1, 0)));
        assert!(m.iter().any(|a| a.from == 0) && m.iter().any(|a| a.from == 1));
    }

    #[test]
    fn mean_arrow_count() {
        let (n, k1, t) = (5, 2.0, 1.5);
        let reps = 10_000;
        let total: usize = (0..reps)
            .map(|r| sample_arrows(n, k1, t, r).unwrap().merged().len())
            .sum();
        let expected = k1 * (n - 1) as f64 * t;
        let mean = total as f64 / reps as f64;
        assert!(
            (mean - expected).abs() < 5.0 * (expected / reps as f64).sqrt(),
            "{mean}"
        );
    }

    #[test]
    fn lazy_pairs_are_reproducible_and_sorted() {
        let s = sample_arrows(10, 3.0, 2.0, 9).unwrap();
        assert_eq!(s.pair_events(2, 7), s.pair_events(2, 7));
        let m = s.merged();
        assert!(m.windows(2).all(|w| w[0].time <= w[1].time));
    }

    #[test]
    fn no_arrows_gives_singleton() {
        let s = ArrowStream::explicit(4, 1.0, 1.0, &[]).unwrap();
        let g = influence_set(&s, 2, 1.0).unwrap();
        assert_eq!(g.members, vec![2]);
        assert_eq!(g.layers, vec![vec![2]]);
    }

    #[test]
    fn single_arrow_adds_a_layer() {
        let s = ArrowStream::explicit(3, 1.0, 1.0, &[arrow(0.3, 1, 0)]).unwrap();
        let g = influence_set(&s, 0, 1.0).unwrap();
        assert_eq!(g.members, vec![0, 1]);
        assert_eq!(g.layers, vec![vec![0], vec![1]]);
        // the arrow lies after the query time
        assert_eq!(influence_set(&s, 0, 0.2).unwrap().members, vec![0]);
    }

    #[test]
    fn paths_need_increasing_times() {
        // 2 -> 1 at 0.2 then 1 -> 0 at 0.5 reaches; reversed order does not
        let s = ArrowStream::explicit(3, 1.0, 1.0, &[arrow(0.2, 2, 1), arrow(0.5, 1, 0)]).unwrap();
        assert_eq!(influence_set(&s, 0, 1.0).unwrap().members, vec![0, 1, 2]);
        let s = ArrowStream::explicit(3, 1.0, 1.0, &[arrow(0.5, 2, 1), arrow(0.2, 1, 0)]).unwrap();
        assert_eq!(influence_set(&s, 0, 1.0).unwrap().members, vec![0, 1]);
    }

    #[test]
    fn simultaneous_arrows_do_not_chain() {
        let s = ArrowStream::explicit(3, 1.0, 1.0, &[arrow(0.4, 2, 1), arrow(0.4, 1, 0)]).unwrap();
        assert_eq!(influence_set(&s, 0, 1.0).unwrap().members, vec![0, 1]);
    }

    #[test]
    fn layers_use_shortest_paths() {
        // 3 reaches 0 directly at 0.1 and via 1 later
        let s = ArrowStream::explicit(
            4,
            1.0,
            1.0,
            &[arrow(0.1, 3, 0), arrow(0.6, 1, 0), arrow(0.3, 3, 1)],
        )
        .unwrap();
        let g = influence_set(&s, 0, 1.0).unwrap();
        assert_eq!(g.layers, vec![vec![0], vec![1, 3]]);
    }

    #[test]
    fn all_marks_one_block_strict_rates() {
        let policy = make_preset(&ModelPreset::Exclusion {
            kernel: Kernel::cos_difference(1.0, 0.5),
        })
        .unwrap();
        let arrows: Vec<Arrow> = (0..20)
            .map(|i| Arrow {
                time: 0.05 * (i + 1) as f64,
                from: i % 3,
                to: (i + 1) % 3,
                mark: 1.0,
            })
            .collect();
        let s = ArrowStream::explicit(3, 2.0, 1.0, &arrows).unwrap();
        let c = Configuration::new(vec![1, 0, 1], Capacity::Finite(1)).unwrap();
        let tr = evolve_with_arrows(&c, &s, &policy, &[1.0]).unwrap();
        assert_eq!(tr.accepted_count, 0);
        assert_eq!(tr.snapshots[0], c);
    }

    #[test]
    fn empty_stream_keeps_configuration() {
        let policy = make_preset(&ModelPreset::Exclusion {
            kernel: Kernel::constant(1.0),
        })
        .unwrap();
        let s = ArrowStream::explicit(3, 1.0, 1.0, &[]).unwrap();
        let c = Configuration::new(vec![1, 0, 1], Capacity::Finite(1)).unwrap();
        let tr = evolve_with_arrows(&c, &s, &policy, &[0.0, 1.0]).unwrap();
        assert!(tr.snapshots.iter().all(|x| *x == c));
    }

    #[test]
    fn small_envelope_is_reported() {
        let policy = make_preset(&ModelPreset::Exclusion {
            kernel: Kernel::constant(2.0),
        })
        .unwrap();
        let s = ArrowStream::explicit(2, 1.0, 1.0, &[arrow(0.5, 0, 1)]).unwrap();
        let c = Configuration::new(vec![1, 0], Capacity::Finite(1)).unwrap();
        let err = evolve_with_arrows(&c, &s, &policy, &[1.0]).unwrap_err();
        assert!(matches!(err, Error::EnvelopeViolation { .. }));
    }

    #[test]
    fn overlap_at_time_zero_is_zero() {
        let est = overlap_probability(20, 1.0, 0.0, 0, 5, 100, 1).unwrap();
        assert_eq!(est.hits, 0);
    }

    #[test]
    fn overlap_below_bound() {
        let est = overlap_probability(100, 1.0, 0.5, 0, 50, 500, 2).unwrap();
        assert!((est.bound - (2.0 * 2f64.exp() + 4f64.exp()) / 100.0).abs() < 1e-12);
        assert!(est.estimate <= est.bound);
    }
}
