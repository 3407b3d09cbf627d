//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use conserva_core::graphical::Arrow;
use conserva_core::torus::site_coordinate;
use nalgebra::DMatrix;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Index of a configuration in base `K + 1`, site 0 least significant.
pub fn state_index(counts: &[u32], cap: u32) -> usize {
    counts
        .iter()
        .rev()
        .fold(0, |acc, &c| acc * (cap as usize + 1) + c as usize)
}

pub fn state_counts(mut index: usize, n: usize, cap: u32) -> Vec<u32> {
    let base = cap as usize + 1;
    (0..n)
        .map(|_| {
            let c = index % base;
            index /= base;
            c as u32
        })
        .collect()
}

fn binomial(k: u32, p: f64, j: u32) -> f64 {
    let mut c = 1.0;
    for i in 0..j {
        c *= f64::from(k - i) / f64::from(i + 1);
    }
    c * p.powi(j as i32) * (1.0 - p).powi((k - j) as i32)
}

/// Product Binomial(K, psi(u_i)/K) law on all `(K+1)^N` states.
pub fn product_initial(n: usize, cap: u32, psi: impl Fn(f64) -> f64) -> Vec<f64> {
    let size = (cap as usize + 1).pow(n as u32);
    (0..size)
        .map(|s| {
            state_counts(s, n, cap)
                .iter()
                .enumerate()
                .map(|(i, &c)| binomial(cap, psi(site_coordinate(i, n)) / f64::from(cap), c))
                .product()
        })
        .collect()
}

/// Law at time `t` of the N-site chain with capacity `cap`: the generator is
/// built from `rate(k, l, u, v) / N` and exponentiated.
pub fn master_equation(
    n: usize,
    cap: u32,
    rate: impl Fn(u32, u32, f64, f64) -> f64,
    p0: &[f64],
    t: f64,
) -> Vec<f64> {
    let size = p0.len();
    let mut g = DMatrix::<f64>::zeros(size, size);
    for s in 0..size {
        let eta = state_counts(s, n, cap);
        for i in 0..n {
            for j in 0..n {
                if i == j || eta[i] == 0 || eta[j] == cap {
                    continue;
                }
                let r =
                    rate(eta[i], eta[j], site_coordinate(i, n), site_coordinate(j, n)) / n as f64;
                let mut next = eta.clone();
                next[i] -= 1;
                next[j] += 1;
                let s2 = state_index(&next, cap);
                g[(s, s2)] += r;
                g[(s, s)] -= r;
            }
        }
    }
    let e = (g * t).exp();
    (0..size)
        .map(|c| (0..size).map(|r| p0[r] * e[(r, c)]).sum())
        .collect()
}

/// Upper-tail p-value of Pearson's goodness-of-fit statistic.
pub fn chi_square_gof(counts: &[u64], probs: &[f64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let mut stat = 0.0;
    let mut cells = 0;
    for (&c, &p) in counts.iter().zip(probs) {
        if p < 1e-14 {
            if c > 0 {
                return 0.0;
            }
            continue;
        }
        let e = p * total as f64;
        stat += (c as f64 - e).powi(2) / e;
        cells += 1;
    }
    if cells < 2 {
        return 1.0;
    }
    1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat)
}

/// Upper-tail p-value of the two-sample chi-square homogeneity statistic.
pub fn chi_square_two_sample(a: &[u64], b: &[u64]) -> f64 {
    let na: u64 = a.iter().sum();
    let nb: u64 = b.iter().sum();
    let (ka, kb) = (
        (nb as f64 / na as f64).sqrt(),
        (na as f64 / nb as f64).sqrt(),
    );
    let mut stat = 0.0;
    let mut cells = 0;
    for (&x, &y) in a.iter().zip(b) {
        if x + y == 0 {
            continue;
        }
        stat += (x as f64 * ka - y as f64 * kb).powi(2) / (x + y) as f64;
        cells += 1;
    }
    if cells < 2 {
        return 1.0;
    }
    1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat)
}

/// Fewest arrows on a path from `source` to `target` using arrows with
/// strictly increasing times in `(0, t]`, by exhaustive enumeration.
pub fn enumerate_paths(arrows: &[Arrow], source: usize, target: usize, t: f64) -> Option<u32> {
    fn walk(
        arrows: &[Arrow],
        site: usize,
        after: f64,
        t: f64,
        target: usize,
        hops: u32,
        best: &mut Option<u32>,
    ) {
        if site == target {
            *best = Some(best.map_or(hops, |b| b.min(hops)));
            return;
        }
        for a in arrows {
            if a.time > after && a.time <= t && a.time > 0.0 && (a.from == site || a.to == site) {
                let next = if a.from == site { a.to } else { a.from };
                walk(arrows, next, a.time, t, target, hops + 1, best);
            }
        }
    }
    let mut best = None;
    walk(arrows, source, 0.0, t, target, 0, &mut best);
    best
}

/// Grid solution of the linear first-moment equation
/// `d theta/dt (u) = int phi(v,u) theta(v) dv - theta(u) int phi(u,v) dv`.
pub fn linear_theta(
    kernel: impl Fn(f64, f64) -> f64,
    psi: impl Fn(f64) -> f64,
    m: usize,
    t: f64,
) -> Vec<f64> {
    let mut l = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        let u = site_coordinate(i, m);
        for j in 0..m {
            let v = site_coordinate(j, m);
            l[(i, j)] += kernel(v, u) / m as f64;
            l[(i, i)] -= kernel(u, v) / m as f64;
        }
    }
    let theta0 = DMatrix::from_fn(m, 1, |i, _| psi(site_coordinate(i, m)));
    let theta = (l * t).exp() * theta0;
    theta.iter().cloned().collect()
}
