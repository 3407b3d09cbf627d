//! Gaussian fluctuation limit for finite capacity on the mean-field grid.
//!
//! The state is the stacked vector `X[k*M + i]`, the fluctuation field of
//! level `k` restricted to grid cell `i`, so `V_k(f) = sum_i f(u_i) X[k*M+i]`.
//! Its covariance obeys `dS/dt = A S + S A^T + Q`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::meanfield::{binomial_pmf, DensityProfile, MeanField, MeanFieldRun};
use crate::model::{Capacity, RatePolicy};
use crate::par;
use crate::rng::{derive_seed, StreamRng};
use crate::torus::{site_coordinate, TorusFn};

/// Relative tolerance of the noise covariance eigenvalue check.
pub const NOISE_PSD_TOLERANCE: f64 = 1e-9;
/// Relative tolerance of the covariance eigenvalue check at record times.
pub const COVARIANCE_PSD_TOLERANCE: f64 = 1e-6;

/// Covariance of the stacked grid fields at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceState {
    pub time: f64,
    pub grid: usize,
    pub capacity: u32,
    pub matrix: DMatrix<f64>,
}

impl CovarianceState {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `(min eigenvalue, max |eigenvalue|)`.
    pub fn spectrum_bounds(&self) -> (f64, f64) {
        spectrum_bounds(&self.matrix)
    }
}

fn spectrum_bounds(m: &DMatrix<f64>) -> (f64, f64) {
    if m.nrows() == 0 {
        return (0.0, 0.0);
    }
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eig.iter().map(|x| x.abs()).fold(0.0, f64::max);
    (min, max)
}

fn finite_capacity(policy: &RatePolicy) -> Result<u32> {
    policy.capacity().as_finite().ok_or_else(|| {
        Error::Unsupported("the fluctuation limit is built for finite capacity".into())
    })
}

/// Product-Bernoulli covariance at time zero: for levels `k != m` the cell
/// covariance is `-p_k p_m / M`, on the diagonal `p_k (1 - p_k) / M`, with
/// `p` the Binomial(K, psi/K) pmf at the cell.
pub fn initial_covariance(psi: &TorusFn, capacity: u32, grid: usize) -> Result<CovarianceState> {
    if capacity == 0 || grid == 0 {
        return Err(Error::Domain(
            "capacity and grid size must be positive".into(),
        ));
    }
    let levels = capacity as usize + 1;
    let mut s = DMatrix::zeros(levels * grid, levels * grid);
    let inv_m = 1.0 / grid as f64;
    for i in 0..grid {
        let u = site_coordinate(i, grid);
        let p = psi.eval(u);
        if !(p > 0.0 && p < f64::from(capacity)) {
            return Err(Error::Validation(format!(
                "psi({u}) = {p} violates 0 < psi < K = {capacity}"
            )));
        }
        let pmf = binomial_pmf(capacity as usize, p / f64::from(capacity));
        for k in 0..levels {
            for m in 0..levels {
                let c = if k == m {
                    pmf[k] * (1.0 - pmf[k])
                } else {
                    -pmf[k] * pmf[m]
                };
                s[(k * grid + i, m * grid + i)] = c * inv_m;
            }
        }
    }
    Ok(CovarianceState {
        time: 0.0,
        grid,
        capacity,
        matrix: s,
    })
}

/// Linearized drift `A` at time `time`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftOperator {
    pub time: f64,
    pub matrix: DMatrix<f64>,
}

/// Noise covariance rate `Q` at time `time`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCovariance {
    pub time: f64,
    pub matrix: DMatrix<f64>,
}

/// Coefficients `(a1, b1, a2, b2)` of the operators
/// `P^{k,1}_{m,l} f(u) = int phi_{m,l}(u,v) rho_l(v) (a1 f(u) + b1 f(v)) dv` and
/// `P^{k,2}_{m,l} f(u) = int phi_{m,l}(v,u) rho_m(v) (a2 f(u) + b2 f(v)) dv`.
pub fn operator_coefficients(k: usize, m: usize, l: usize) -> Option<(f64, f64, f64, f64)> {
    let lk = l == k;
    let lkm1 = k >= 1 && l == k - 1;
    if m == k {
        Some(if lkm1 {
            (-1.0, 1.0, 1.0, -1.0)
        } else if lk {
            (-1.0, -1.0, -1.0, -1.0)
        } else {
            (-1.0, 0.0, 0.0, -1.0)
        })
    } else if m == k + 1 {
        Some(if lk {
            (1.0, -1.0, -1.0, 1.0)
        } else if lkm1 {
            (1.0, 1.0, 1.0, 1.0)
        } else {
            (1.0, 0.0, 0.0, 1.0)
        })
    } else if lk {
        Some((0.0, -1.0, -1.0, 0.0))
    } else if lkm1 {
        Some((0.0, 1.0, 1.0, 0.0))
    } else {
        None
    }
}

/// `M x M` matrices of `P^{k,1}_{m,l}` and `P^{k,2}_{m,l}` acting on grid
/// functions, `(P f)_i = sum_j P_ij f_j`, with Riemann-sum integrals.
pub fn operator_matrices(
    mf: &MeanField,
    rho: &DensityProfile,
    k: usize,
    m: usize,
    l: usize,
) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let (a1, b1, a2, b2) = operator_coefficients(k, m, l)?;
    let g = rho.grid;
    let inv = 1.0 / g as f64;
    let mut p1 = DMatrix::zeros(g, g);
    let mut p2 = DMatrix::zeros(g, g);
    for i in 0..g {
        let mut d1 = 0.0;
        let mut d2 = 0.0;
        for j in 0..g {
            let w1 = mf.rate(m, l, i, j) * rho.get(l, j) * inv;
            let w2 = mf.rate(m, l, j, i) * rho.get(m, j) * inv;
            d1 += w1;
            d2 += w2;
            p1[(i, j)] += b1 * w1;
            p2[(i, j)] += b2 * w2;
        }
        p1[(i, i)] += a1 * d1;
        p2[(i, i)] += a2 * d2;
    }
    Some((p1, p2))
}

/// Drift matrix: row block `k` receives `(P^{k,1}_{m,l})^T` in column block
/// `m` and `(P^{k,2}_{m,l})^T` in column block `l`.
pub fn build_drift(profile: &DensityProfile, policy: &RatePolicy) -> Result<DriftOperator> {
    let cap = finite_capacity(policy)? as usize;
    let mf = MeanField::new(policy, profile.grid, cap)?;
    Ok(DriftOperator {
        time: profile.time,
        matrix: assemble_drift(&mf, profile)?,
    })
}

fn assemble_drift(mf: &MeanField, profile: &DensityProfile) -> Result<DMatrix<f64>> {
    let g = profile.grid;
    let levels = profile.kmax + 1;
    if mf.grid() != g || mf.kmax() != profile.kmax {
        return Err(Error::Domain(
            "profile does not match the operator grid".into(),
        ));
    }
    let rows = par::map_indexed(levels, |k| {
        let mut block = DMatrix::zeros(g, levels * g);
        for m in 0..levels {
            for l in 0..levels {
                if let Some((p1, p2)) = operator_matrices(mf, profile, k, m, l) {
                    let mut bm = block.columns_mut(m * g, g);
                    bm += p1.transpose();
                    let mut bl = block.columns_mut(l * g, g);
                    bl += p2.transpose();
                }
            }
        }
        block
    });
    let mut a = DMatrix::zeros(levels * g, levels * g);
    for (k, block) in rows.into_iter().enumerate() {
        a.rows_mut(k * g, g).copy_from(&block);
    }
    Ok(a)
}

/// Noise covariance: every channel `(m, l)` and cell pair `(a, b)` adds
/// `phi_{m,l}(u_a,u_b) rho_m(u_a) rho_l(u_b) / M^2` times `beta beta^T`,
/// where `beta` records the level changes of one jump from `a` to `b`.
/// Fails when the smallest eigenvalue is below `-1e-9 |Q|`.
pub fn build_noise_cov(profile: &DensityProfile, policy: &RatePolicy) -> Result<NoiseCovariance> {
    let cap = finite_capacity(policy)? as usize;
    let mf = MeanField::new(policy, profile.grid, cap)?;
    let q = assemble_noise(&mf, profile)?;
    let (min, max) = spectrum_bounds(&q);
    if min < -NOISE_PSD_TOLERANCE * max {
        return Err(Error::Assembly(format!(
            "noise covariance has eigenvalue {min:e} (largest magnitude {max:e})"
        )));
    }
    Ok(NoiseCovariance {
        time: profile.time,
        matrix: q,
    })
}

fn assemble_noise(mf: &MeanField, profile: &DensityProfile) -> Result<DMatrix<f64>> {
    let g = profile.grid;
    let kmax = profile.kmax;
    if mf.grid() != g || mf.kmax() != kmax {
        return Err(Error::Domain(
            "profile does not match the operator grid".into(),
        ));
    }
    let dim = (kmax + 1) * g;
    let inv2 = 1.0 / (g * g) as f64;
    let mut q = DMatrix::zeros(dim, dim);
    let mut beta: Vec<(usize, f64)> = Vec::with_capacity(4);
    for m in 1..=kmax {
        for l in 0..kmax {
            for a in 0..g {
                let ra = profile.get(m, a);
                if ra == 0.0 {
                    continue;
                }
                for b in 0..g {
                    let w = mf.rate(m, l, a, b) * ra * profile.get(l, b) * inv2;
                    if w == 0.0 {
                        continue;
                    }
                    beta.clear();
                    for (idx, v) in [
                        (m * g + a, -1.0),
                        ((m - 1) * g + a, 1.0),
                        (l * g + b, -1.0),
                        ((l + 1) * g + b, 1.0),
                    ] {
                        match beta.iter_mut().find(|(i, _)| *i == idx) {
                            Some(e) => e.1 += v,
                            None => beta.push((idx, v)),
                        }
                    }
                    for &(i, vi) in &beta {
                        for &(j, vj) in &beta {
                            q[(i, j)] += w * vi * vj;
                        }
                    }
                }
            }
        }
    }
    Ok(q)
}

/// Fixed-step RK4 for `dS/dt = A(t) S + S A(t)^T + Q(t)`. `coefficients(t)`
/// returns `(A, Q)`. States are symmetrized after every step and checked for
/// negative eigenvalues at the requested record times.
pub fn integrate_lyapunov<F>(
    sigma0: &DMatrix<f64>,
    t0: f64,
    horizon: f64,
    dt: f64,
    record_times: &[f64],
    mut coefficients: F,
) -> Result<Vec<(f64, DMatrix<f64>)>>
where
    F: FnMut(f64) -> Result<(DMatrix<f64>, DMatrix<f64>)>,
{
    if !(dt > 0.0 && dt.is_finite()) || !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::Domain(format!(
            "need dt > 0 and horizon >= 0, got {dt}, {horizon}"
        )));
    }
    let steps = ((horizon / dt) - 1e-9).ceil().max(0.0) as usize;
    let h = if steps == 0 {
        0.0
    } else {
        horizon / steps as f64
    };
    let record_steps = record_times
        .iter()
        .map(|&t| {
            let s = if h == 0.0 { 0.0 } else { (t - t0) / h };
            let r = s.round();
            if (s - r).abs() > 1e-6 || r < 0.0 || r as usize > steps {
                Err(Error::Domain(format!(
                    "record time {t} is not a step of size {h} from {t0}"
                )))
            } else {
                Ok(r as usize)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let flow = |a: &DMatrix<f64>, q: &DMatrix<f64>, s: &DMatrix<f64>| -> DMatrix<f64> {
        let as_ = a * s;
        &as_ + as_.transpose() + q
    };
    let check = |s: &DMatrix<f64>, t: f64| -> Result<()> {
        let (min, max) = spectrum_bounds(s);
        if min < -COVARIANCE_PSD_TOLERANCE * max {
            return Err(Error::Instability {
                time: t,
                min_eigenvalue: min,
                norm: max,
            });
        }
        Ok(())
    };
    let mut out = Vec::with_capacity(record_steps.len());
    let mut s = sigma0.clone();
    let mut next = 0;
    let mut emit =
        |step: usize, s: &DMatrix<f64>, out: &mut Vec<(f64, DMatrix<f64>)>| -> Result<()> {
            while next < record_steps.len() && record_steps[next] == step {
                let t = t0 + step as f64 * h;
                check(s, t)?;
                out.push((t, s.clone()));
                next += 1;
            }
            Ok(())
        };
    emit(0, &s, &mut out)?;
    for step in 0..steps {
        let t = t0 + step as f64 * h;
        let (a0, q0) = coefficients(t)?;
        let (am, qm) = coefficients(t + h / 2.0)?;
        let (a1, q1) = coefficients(t + h)?;
        let k1 = flow(&a0, &q0, &s);
        let k2 = flow(&am, &qm, &(&s + &k1 * (h / 2.0)));
        let k3 = flow(&am, &qm, &(&s + &k2 * (h / 2.0)));
        let k4 = flow(&a1, &q1, &(&s + &k3 * h));
        s += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let sym = (&s + s.transpose()) * 0.5;
        s = sym;
        emit(step + 1, &s, &mut out)?;
    }
    Ok(out)
}

/// Evolves `sigma0` along the mean-field run, rebuilding `A` and `Q` from
/// the interpolated profile at every stage.
pub fn evolve_covariance(
    sigma0: &CovarianceState,
    run: &MeanFieldRun,
    policy: &RatePolicy,
    horizon: f64,
    dt: f64,
    record_times: &[f64],
) -> Result<Vec<CovarianceState>> {
    let cap = finite_capacity(policy)?;
    if cap != sigma0.capacity {
        return Err(Error::Domain(format!(
            "covariance built for K = {}, policy has K = {cap}",
            sigma0.capacity
        )));
    }
    let g = sigma0.grid;
    let p0 = &run.profiles[0];
    if p0.grid != g || p0.capacity != Capacity::Finite(cap) {
        return Err(Error::Domain(
            "mean-field run does not match the covariance grid".into(),
        ));
    }
    if (run.start_time() - sigma0.time).abs() > 1e-9 {
        return Err(Error::Domain(format!(
            "covariance at t = {}, mean-field run starts at t = {}",
            sigma0.time,
            run.start_time()
        )));
    }
    if sigma0.time + horizon > run.end_time() + 1e-9 {
        return Err(Error::Domain(format!(
            "mean-field run ends at {} before {}",
            run.end_time(),
            sigma0.time + horizon
        )));
    }
    let mf = MeanField::new(policy, g, cap as usize)?;
    let states = integrate_lyapunov(
        &sigma0.matrix,
        sigma0.time,
        horizon,
        dt,
        record_times,
        |t| {
            let rho = run.at(t)?;
            Ok((assemble_drift(&mf, &rho)?, assemble_noise(&mf, &rho)?))
        },
    )?;
    Ok(states
        .into_iter()
        .map(|(time, matrix)| CovarianceState {
            time,
            grid: g,
            capacity: cap,
            matrix,
        })
        .collect())
}

/// `sum_{i,j} f_i g_j S[k*M+i, m*M+j]`, evaluated so that swapping
/// `(f, k)` with `(g, m)` gives a bit-identical result.
pub fn project(sigma: &CovarianceState, f: &[f64], g: &[f64], k: usize, m: usize) -> Result<f64> {
    let n = sigma.grid;
    let levels = sigma.capacity as usize + 1;
    if f.len() != n || g.len() != n {
        return Err(Error::Domain(format!("test vectors must have length {n}")));
    }
    if k >= levels || m >= levels {
        return Err(Error::Domain(format!(
            "levels ({k}, {m}) outside 0..{levels}"
        )));
    }
    let s = &sigma.matrix;
    if k == m {
        let base = k * n;
        let mut total = 0.0;
        for i in 0..n {
            total += (f[i] * g[i]) * s[(base + i, base + i)];
            for j in i + 1..n {
                total += (f[i] * g[j]) * s[(base + i, base + j)]
                    + (f[j] * g[i]) * s[(base + j, base + i)];
            }
        }
        return Ok(total);
    }
    let (lo, hi, a, b) = if k < m { (k, m, f, g) } else { (m, k, g, f) };
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += (a[i] * b[j]) * s[(lo * n + i, hi * n + j)];
        }
    }
    Ok(total)
}

/// [`project`] with test functions sampled on the grid.
pub fn project_fn(
    sigma: &CovarianceState,
    f: &TorusFn,
    g: &TorusFn,
    k: usize,
    m: usize,
) -> Result<f64> {
    project(sigma, &f.sample(sigma.grid), &g.sample(sigma.grid), k, m)
}

/// Linear functional `V_k(f)` of the stacked state.
#[derive(Debug, Clone)]
pub struct Probe {
    pub level: usize,
    pub f: TorusFn,
}

/// Projected Euler-Maruyama paths: `values[r][p][path]` at `record_times[r]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OuPaths {
    pub record_times: Vec<f64>,
    pub values: Vec<Vec<Vec<f64>>>,
}

impl OuPaths {
    /// Sample covariance of probes `p` and `q` at record index `r`.
    pub fn covariance(&self, r: usize, p: usize, q: usize) -> f64 {
        let a = &self.values[r][p];
        let b = &self.values[r][q];
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / (n - 1.0)
    }
}

/// Square-root factor `L` with `L L^T = S` from a symmetric eigendecomposition
/// with negative eigenvalues clamped to zero.
fn psd_factor(s: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(s.clone());
    let mut l = eig.eigenvectors;
    for (c, &lam) in eig.eigenvalues.iter().enumerate() {
        let r = lam.max(0.0).sqrt();
        l.column_mut(c).scale_mut(r);
    }
    l
}

/// Paths per parallel work item.
const PATH_CHUNK: usize = 256;

/// Simulates the linear SDE `dX = A X dt + Q^{1/2} dW` from `X_0 ~ N(0, S_0)`
/// and records the probes.
#[allow(clippy::too_many_arguments)]
pub fn simulate_ou(
    sigma0: &CovarianceState,
    run: &MeanFieldRun,
    policy: &RatePolicy,
    horizon: f64,
    dt: f64,
    paths: usize,
    seed: u64,
    probes: &[Probe],
    record_times: &[f64],
) -> Result<OuPaths> {
    let cap = finite_capacity(policy)?;
    let g = sigma0.grid;
    let mf = MeanField::new(policy, g, cap as usize)?;
    simulate_linear(
        &sigma0.matrix,
        sigma0.time,
        horizon,
        dt,
        paths,
        seed,
        &probe_rows(probes, g, cap as usize + 1)?,
        record_times,
        |t| {
            let rho = run.at(t)?;
            Ok((assemble_drift(&mf, &rho)?, assemble_noise(&mf, &rho)?))
        },
    )
}

fn probe_rows(probes: &[Probe], grid: usize, levels: usize) -> Result<Vec<DVector<f64>>> {
    probes
        .iter()
        .map(|p| {
            if p.level >= levels {
                return Err(Error::Domain(format!(
                    "probe level {} outside 0..{levels}",
                    p.level
                )));
            }
            let mut v = DVector::zeros(levels * grid);
            for (i, x) in p.f.sample(grid).into_iter().enumerate() {
                v[p.level * grid + i] = x;
            }
            Ok(v)
        })
        .collect()
}

/// Euler-Maruyama for a general linear SDE with coefficient callback; the
/// noise factor is computed once per step and shared by all paths.
#[allow(clippy::too_many_arguments)]
pub fn simulate_linear<F>(
    sigma0: &DMatrix<f64>,
    t0: f64,
    horizon: f64,
    dt: f64,
    paths: usize,
    seed: u64,
    probes: &[DVector<f64>],
    record_times: &[f64],
    mut coefficients: F,
) -> Result<OuPaths>
where
    F: FnMut(f64) -> Result<(DMatrix<f64>, DMatrix<f64>)>,
{
    if paths < 2 {
        return Err(Error::Domain("need at least 2 paths".into()));
    }
    if !(dt > 0.0 && dt.is_finite()) || !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::Domain(format!(
            "need dt > 0 and horizon >= 0, got {dt}, {horizon}"
        )));
    }
    let dim = sigma0.nrows();
    let steps = ((horizon / dt) - 1e-9).ceil().max(0.0) as usize;
    let h = if steps == 0 {
        0.0
    } else {
        horizon / steps as f64
    };
    let record_steps: Vec<usize> = record_times
        .iter()
        .map(|&t| {
            let s = if h == 0.0 { 0.0 } else { (t - t0) / h };
            let r = s.round();
            if (s - r).abs() > 1e-6 || r < 0.0 || r as usize > steps {
                Err(Error::Domain(format!(
                    "record time {t} is not a step of size {h}"
                )))
            } else {
                Ok(r as usize)
            }
        })
        .collect::<Result<_>>()?;
    let probe_mat = DMatrix::from_fn(probes.len(), dim, |p, j| probes[p][j]);
    let chunks = paths.div_ceil(PATH_CHUNK);
    // one stream per path, grouped into column blocks for the matrix products
    let normals = |rngs: &mut [StreamRng], rows: usize| {
        let mut z = DMatrix::zeros(rows, rngs.len());
        for (c, rng) in rngs.iter_mut().enumerate() {
            for r in 0..rows {
                z[(r, c)] = StandardNormal.sample(rng);
            }
        }
        z
    };
    let mut rngs: Vec<Vec<StreamRng>> = (0..chunks)
        .map(|c| {
            (c * PATH_CHUNK..paths.min((c + 1) * PATH_CHUNK))
                .map(|p| StreamRng::seed_from_u64(derive_seed(seed, p as u64)))
                .collect()
        })
        .collect();
    let l0 = psd_factor(sigma0);
    let mut states: Vec<DMatrix<f64>> = rngs.iter_mut().map(|r| &l0 * normals(r, dim)).collect();
    let mut values = vec![vec![Vec::with_capacity(paths); probes.len()]; record_steps.len()];
    let record = |states: &[DMatrix<f64>], step: usize, values: &mut Vec<Vec<Vec<f64>>>| {
        for (r, _) in record_steps.iter().enumerate().filter(|(_, &s)| s == step) {
            for x in states {
                let proj = &probe_mat * x;
                for (p, v) in values[r].iter_mut().enumerate() {
                    v.extend(proj.row(p).iter());
                }
            }
        }
    };
    record(&states, 0, &mut values);
    let sqrt_h = h.sqrt();
    for step in 0..steps {
        let (a, q) = coefficients(t0 + step as f64 * h)?;
        let lq = psd_factor(&q) * sqrt_h;
        let drift = DMatrix::identity(dim, dim) + a * h;
        let pairs: Vec<(DMatrix<f64>, Vec<StreamRng>)> = states.into_iter().zip(rngs).collect();
        let advanced = par::map_indexed(pairs.len(), |c| {
            let (x, rng) = &pairs[c];
            let mut rng = rng.clone();
            let noise = normals(&mut rng, dim);
            (&drift * x + &lq * noise, rng)
        });
        (states, rngs) = advanced.into_iter().unzip();
        record(&states, step + 1, &mut values);
    }
    Ok(OuPaths {
        record_times: record_steps.iter().map(|&s| t0 + s as f64 * h).collect(),
        values,
    })
}
