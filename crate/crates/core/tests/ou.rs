use conserva_core::meanfield::{init_profile, integrate, DensityProfile};
use conserva_core::ou::{
    build_drift, build_noise_cov, evolve_covariance, initial_covariance, integrate_lyapunov,
    project, simulate_linear,
};
use conserva_core::torus::{site_coordinate, Mode};
use conserva_core::{
    make_preset, Capacity, FourierSeries, Kernel, ModelPreset, RatePolicy, TorusFn,
};
use nalgebra::{DMatrix, DVector};

fn exclusion(kernel: Kernel) -> RatePolicy {
    make_preset(&ModelPreset::Exclusion { kernel }).unwrap()
}

fn symmetric_kernel() -> Kernel {
    Kernel::cos_difference(1.0, 0.5)
}

fn asymmetric_kernel() -> Kernel {
    Kernel::cos_difference(1.0, 0.4).with_mode(Mode {
        p: 0,
        q: 1,
        cos: 0.2,
        sin: 0.25,
    })
}

fn psi() -> TorusFn {
    FourierSeries::sine(0.5, 0.25).into()
}

/// Effective single-component operator of the K=1 drift: with `X_0 = -X_1`
/// the component-1 evolution is `(A_11 - A_10) X_1`, whose transpose acts on
/// test functions.
fn effective_operator(a: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    let a11 = a.view((m, m), (m, m));
    let a10 = a.view((m, 0), (m, m));
    (a11 - a10).transpose()
}

/// `f -> int phi(u,v)(1-rho(v))(f(v)-f(u)) - int phi(x,y) rho(v)(f(u)-f(v))` with
/// `(x, y)` either `(u, v)` as displayed or `(v, u)`.
fn reduced_operator(kernel: &Kernel, rho: &DensityProfile, swap_second: bool) -> DMatrix<f64> {
    let m = rho.grid;
    let mut p = DMatrix::zeros(m, m);
    for i in 0..m {
        let u = site_coordinate(i, m);
        for j in 0..m {
            let v = site_coordinate(j, m);
            let r = rho.get(1, j);
            let w1 = kernel.eval(u, v) * (1.0 - r) / m as f64;
            let w2 = if swap_second {
                kernel.eval(v, u)
            } else {
                kernel.eval(u, v)
            } * r
                / m as f64;
            p[(i, j)] += w1 + w2;
            p[(i, i)] -= w1 + w2;
        }
    }
    p
}

#[test]
fn k1_drift_matches_reduced_operator_for_symmetric_kernel() {
    let kernel = symmetric_kernel();
    let policy = exclusion(kernel.clone());
    let rho = init_profile(&psi(), Capacity::Finite(1), None, 32).unwrap();
    let a = build_drift(&rho, &policy).unwrap().matrix;
    let got = effective_operator(&a, 32);
    let want = reduced_operator(&kernel, &rho, false);
    assert!((got - want).amax() < 1e-12);
}

#[test]
fn k1_drift_matches_reduced_operator_with_reversed_second_rate() {
    let kernel = asymmetric_kernel();
    let policy = exclusion(kernel.clone());
    let rho = init_profile(&psi(), Capacity::Finite(1), None, 24).unwrap();
    let a = build_drift(&rho, &policy).unwrap().matrix;
    let got = effective_operator(&a, 24);
    assert!((&got - reduced_operator(&kernel, &rho, true)).amax() < 1e-12);
    assert!((&got - reduced_operator(&kernel, &rho, false)).amax() > 1e-3);
}

#[test]
fn k1_noise_block_matches_double_sum() {
    let kernel = asymmetric_kernel();
    let policy = exclusion(kernel.clone());
    let m = 20;
    let rho = init_profile(&psi(), Capacity::Finite(1), None, m).unwrap();
    let q = build_noise_cov(&rho, &policy).unwrap().matrix;
    let mut want = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in 0..m {
            let w = kernel.eval(site_coordinate(a, m), site_coordinate(b, m))
                * rho.get(1, a)
                * rho.get(0, b)
                / (m * m) as f64;
            want[(a, a)] += w;
            want[(b, b)] += w;
            want[(a, b)] -= w;
            want[(b, a)] -= w;
        }
    }
    let q11 = q.view((m, m), (m, m)).into_owned();
    assert!((&q11 - &want).amax() < 1e-12);
    // occupancy-0 field is the negative of the occupancy-1 field
    assert!((q.view((0, 0), (m, m)) - &want).amax() < 1e-12);
    assert!((q.view((0, m), (m, m)) + &want).amax() < 1e-12);
}

#[test]
fn empty_profile_has_no_noise_and_no_response_to_level_zero() {
    let policy = make_preset(&ModelPreset::GeneralizedExclusion {
        capacity: 2,
        law: conserva_core::OccupancyLaw::Linear,
        kernel: asymmetric_kernel(),
    })
    .unwrap();
    let m = 8;
    let mut values = vec![0.0; 3 * m];
    values[..m].fill(1.0);
    let rho = DensityProfile::new(m, 2, Capacity::Finite(2), values).unwrap();
    let a = build_drift(&rho, &policy).unwrap().matrix;
    assert!(a.view((0, 0), (3 * m, m)).iter().all(|&x| x == 0.0));
    assert!(a.iter().any(|&x| x != 0.0));
    assert!(build_noise_cov(&rho, &policy)
        .unwrap()
        .matrix
        .iter()
        .all(|&x| x == 0.0));
}

#[test]
fn initial_projection_reproduces_integral_formula() {
    let psi = psi();
    let m = 64;
    let s = initial_covariance(&psi, 2, m).unwrap();
    let f: Vec<f64> = TorusFn::from(FourierSeries::cosine(0.0, 1.0)).sample(m);
    let g: Vec<f64> = TorusFn::from(FourierSeries::sine(1.0, 0.5)).sample(m);
    for (k, l) in [(0, 0), (1, 1), (0, 2), (2, 1)] {
        // independent fine quadrature of the closed form
        let fine = 4096;
        let mut want = 0.0;
        for i in 0..fine {
            let u = (i as f64 + 0.5) / fine as f64;
            let p = psi.eval(u) / 2.0;
            let pmf = [(1.0 - p) * (1.0 - p), 2.0 * p * (1.0 - p), p * p];
            let c = if k == l {
                pmf[k] * (1.0 - pmf[k])
            } else {
                -pmf[k] * pmf[l]
            };
            want += c
                * (std::f64::consts::TAU * u).cos()
                * (1.0 + 0.5 * (std::f64::consts::TAU * u).sin());
        }
        want /= fine as f64;
        let got = project(&s, &f, &g, k, l).unwrap();
        assert!((got - want).abs() < 1e-6, "({k},{l}) {got} vs {want}");
    }
}

#[test]
fn scalar_probe_matches_closed_form() {
    for (a, q, s0) in [(-0.7, 0.3, 0.2), (0.4, 0.1, 1.0), (-2.0, 1.5, 0.0)] {
        let out = integrate_lyapunov(
            &DMatrix::from_element(1, 1, s0),
            0.0,
            1.0,
            0.01,
            &[0.5, 1.0],
            |_| {
                Ok((
                    DMatrix::from_element(1, 1, a),
                    DMatrix::from_element(1, 1, q),
                ))
            },
        )
        .unwrap();
        for (t, s) in out {
            let exact = (s0 + q / (2.0 * a)) * (2.0 * a * t).exp() - q / (2.0 * a);
            assert!((s[(0, 0)] - exact).abs() < 1e-8, "a={a} t={t}");
        }
    }
}

#[test]
fn scalar_paths_match_closed_form_within_ci() {
    let (a, q, s0) = (-0.7, 0.3, 0.2);
    let paths = 20_000;
    let out = simulate_linear(
        &DMatrix::from_element(1, 1, s0),
        0.0,
        1.0,
        0.002,
        paths,
        11,
        &[DVector::from_element(1, 1.0)],
        &[1.0],
        |_| {
            Ok((
                DMatrix::from_element(1, 1, a),
                DMatrix::from_element(1, 1, q),
            ))
        },
    )
    .unwrap();
    let var = out.covariance(0, 0, 0);
    let exact = (s0 + q / (2.0 * a)) * (2.0 * a).exp() - q / (2.0 * a);
    let se = exact * (2.0 / (paths as f64 - 1.0)).sqrt();
    assert!(
        (var - exact).abs() < 4.0 * se + 0.01 * exact,
        "{var} vs {exact}"
    );
}

#[test]
fn covariance_stays_symmetric_and_conserves_total_mass() {
    let policy = exclusion(asymmetric_kernel());
    let m = 16;
    let rho = init_profile(&psi(), Capacity::Finite(1), None, m).unwrap();
    let run = integrate(&rho, &policy, 0.5, 0.01).unwrap();
    let s0 = initial_covariance(&psi(), 1, m).unwrap();
    let series = evolve_covariance(&s0, &run, &policy, 0.5, 0.01, &[0.0, 0.25, 0.5]).unwrap();
    assert_eq!(series.len(), 3);
    let ones = vec![1.0; m];
    let v0 = project(&series[0], &ones, &ones, 1, 1).unwrap();
    for s in &series {
        assert_eq!(s.matrix, s.matrix.transpose());
        let (min, max) = s.spectrum_bounds();
        assert!(min >= -1e-6 * max);
        // particle number is conserved, so the total-mass fluctuation is frozen
        assert!((project(s, &ones, &ones, 1, 1).unwrap() - v0).abs() < 1e-12);
    }
}

#[test]
fn mismatched_run_is_rejected() {
    let policy = exclusion(symmetric_kernel());
    let rho = init_profile(&psi(), Capacity::Finite(1), None, 16).unwrap();
    let run = integrate(&rho, &policy, 0.2, 0.01).unwrap();
    let s0 = initial_covariance(&psi(), 1, 8).unwrap();
    assert!(evolve_covariance(&s0, &run, &policy, 0.2, 0.01, &[0.2]).is_err());
    let s0 = initial_covariance(&psi(), 1, 16).unwrap();
    assert!(evolve_covariance(&s0, &run, &policy, 0.5, 0.01, &[0.5]).is_err());
}
