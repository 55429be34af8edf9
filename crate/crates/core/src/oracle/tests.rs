use std::f64::consts::PI;

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::rng;
use crate::synthgen::LAMBDA0;

fn random_points(n: usize, seed: u64) -> Vec<Observation> {
    let mut g = rng::stream(seed, "oracle/test-points", 0);
    (0..n)
        .map(|_| Observation::new(g.random_range(-5.0..8.0), g.random_range(-8.0..8.0), g.random_range(0.0..3.0)))
        .collect()
}

#[test]
fn signal_density_at_its_mode() {
    let f = signal_density(&Observation::new(1.0, 1.0, 0.0));
    assert!((f - 1.0 / PI).abs() < 1e-15);
    assert_eq!(signal_density(&Observation::new(1.0, 1.0, -1e-9)), 0.0);
    assert_eq!(background_density(&Observation::new(1.0, 1.0, -0.5), 0.0, 3.0), Ok(0.0));
    assert_eq!(background_density(&Observation::new(1.0, 1.0, 0.5), 0.0, 0.0), Err(OracleError::NonPositiveRate(0.0)));
}

#[test]
fn hand_evaluated_fixture() {
    let x = Observation::new(1.0, 1.0, 0.1);
    let fs = 1.0 / (2.0 * PI) * 2.0 * (-0.2f64).exp();
    let fb = 1.0 / (2.0 * PI * 45f64.sqrt()) * (-1.0 / 10.0 - 1.0 / 18.0f64).exp() * 3.0 * (-0.3f64).exp();
    assert!((signal_density(&x) / fs - 1.0).abs() < 1e-14);
    assert!((background_density(&x, 0.0, 3.0).unwrap() / fb - 1.0).abs() < 1e-14);
    let t = optimal_classifier(&x, 0.0, 3.0).unwrap();
    assert!((t - fs / (fs + fb)).abs() < 1e-14);
    assert!(t > 0.5 && t < 1.0);
}

#[test]
fn normalisation_by_quadrature() {
    for (r, lambda) in [(0.0, 3.0), (-0.4, 2.0), (0.7, 4.5), (0.0, 0.5)] {
        let (s, b) = quadrature_normalisation(r, lambda).unwrap();
        assert!((s - 1.0).abs() < 1e-6, "signal {s}");
        assert!((b - 1.0).abs() < 1e-6, "background {b} at r={r} λ={lambda}");
    }
}

#[test]
fn classifier_is_one_half_where_densities_agree() {
    // bisect along x1 for f_s = f_b
    let (x0, x2) = (1.5, 0.3);
    let g = |x1: f64| {
        let x = Observation::new(x0, x1, x2);
        ln_signal_density(&x) - ln_background_density(&x, 0.0, 3.0).unwrap()
    };
    let (mut a, mut b) = (1.0, 8.0);
    assert!(g(a) > 0.0 && g(b) < 0.0);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if g(m) > 0.0 {
            a = m
        } else {
            b = m
        }
    }
    let t = optimal_classifier(&Observation::new(x0, a, x2), 0.0, 3.0).unwrap();
    assert!((t - 0.5).abs() < 1e-14);
}

#[test]
fn extended_nll_fixtures() {
    let x = Observation::new(0.3, -0.2, 0.4);
    let theta = ThetaPoint::NOMINAL;
    let nu = theta.s * signal_density(&x) + theta.b * background_density(&x, 0.0, 3.0).unwrap();
    let total = theta.s + theta.b;
    // −ln[Poisson(1 | total) · ν/total]
    let by_hand = -(total.ln() - total + (nu / total).ln());
    assert!((extended_nll(&[x], &theta).unwrap() - by_hand).abs() < 1e-9);

    let data = random_points(50, 3);
    let bkg = theta.with(Param::S, 0.0);
    let direct: f64 = theta.b - data.iter().map(|x| (theta.b * background_density(x, 0.0, 3.0).unwrap()).ln()).sum::<f64>();
    assert!((extended_nll(&data, &bkg).unwrap() - direct).abs() < 1e-9);
    assert!(extended_nll(&data, &theta.with(Param::B, 0.0)).is_err());
}

#[test]
fn score_has_zero_mean_at_truth() {
    let theta = ThetaPoint::NOMINAL;
    let scores: Vec<f64> = (0..100)
        .map(|i| {
            let d = mixture_sample(None, theta.s, theta.b, 0.0, 3.0, 1000 + i).unwrap();
            1.0 - d.observations.iter().map(|x| score(x, &theta).unwrap()[0]).sum::<f64>()
        })
        .collect();
    let m = scores.iter().sum::<f64>() / 100.0;
    let sd = (scores.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 99.0).sqrt();
    assert!(m.abs() < 3.0 * sd / 10.0, "mean score {m}, sd {sd}");
}

#[test]
fn ln_intensity_matches_score_and_differences() {
    let theta = ThetaPoint { s: 47.0, r: 0.2, lambda: 2.6, b: 1010.0 };
    let dirs = Param::ALL;
    for x in random_points(20, 4) {
        let so = ln_intensity(&x, &theta, &dirs).unwrap();
        let g = score(&x, &theta).unwrap();
        for i in 0..4 {
            assert!((so.derivative(i).unwrap() - g[i]).abs() <= 1e-10 * g[i].abs().max(1e-8));
        }
        for (i, &p) in dirs.iter().enumerate() {
            let h = 1e-5 * theta.get(p).abs().max(1.0);
            let up = score(&x, &theta.with(p, theta.get(p) + h)).unwrap();
            let dn = score(&x, &theta.with(p, theta.get(p) - h)).unwrap();
            for j in 0..4 {
                let fd = (up[j] - dn[j]) / (2.0 * h);
                let ad = so.second(j, i).unwrap_or(0.0);
                assert!((fd - ad).abs() <= 1e-5 * ad.abs().max(1e-6), "({i},{j}) {fd} vs {ad}");
            }
        }
    }
}

#[test]
fn sufficiency_identity() {
    let pts = random_points(10_000, 5);
    let zero = sufficiency_residual(&pts, 0.0, 0.0, 3.0).unwrap();
    assert_eq!(zero.max_residual, 0.0);
    assert_eq!(zero.tested + zero.excluded, 10_000);
    for mu in [0.5, 50.0 / 1050.0] {
        let r = sufficiency_residual(&pts, mu, 0.0, 3.0).unwrap();
        assert!(r.max_residual < 1e-12, "{r:?}");
    }
    let mix = mixture_sample(Some(10_000), 50.0, 1000.0, 0.0, 3.0, 6).unwrap();
    let r = sufficiency_residual(&mix.observations, 50.0 / 1050.0, 0.0, 3.0).unwrap();
    assert!(r.max_residual < 1e-12 && r.tested == 10_000);
}

#[test]
fn analytic_fisher_is_positive_definite_and_ordered() {
    let theta = ThetaPoint::NOMINAL;
    let sample = mixture_sample(Some(100_000), 50.0, 1000.0, 0.0, 3.0, 8).unwrap().observations;
    let mut widths = Vec::new();
    for id in BenchmarkSpec::IDS {
        let spec = BenchmarkSpec::new(id).unwrap();
        let res = analytic_from_sample(&spec, &theta, &sample).unwrap();
        let f = &res.fisher;
        for i in 0..f.len() {
            assert!(f[i][i] > 0.0);
            for j in 0..f.len() {
                assert_eq!(f[i][j], f[j][i]);
            }
        }
        assert!(res.standard_error > 0.0 && res.standard_error < 0.05 * res.width);
        widths.push(res.width);
    }
    // profiling over a superset widens; constraints narrow
    assert!(widths[0] <= widths[1] && widths[1] <= widths[2]);
    assert!(widths[3] <= widths[2]);
    assert!(widths[3] <= widths[4]);
    // count-only bound: the shape carries information
    assert!(widths[0] < 2.0 * 1050f64.sqrt());
}

#[test]
fn single_parameter_fisher_closed_form() {
    // with the background shape fixed, I_ss = Σ f_s² / ν over the sample
    // reduces to the integral of f_s² / (s f_s + b f_b), which is below 1/s
    let theta = ThetaPoint::NOMINAL;
    let spec = BenchmarkSpec::new(0).unwrap();
    let sample = mixture_sample(Some(50_000), 50.0, 1000.0, 0.0, 3.0, 9).unwrap().observations;
    let info = fisher_from_samples(&sample, &theta, &spec).unwrap();
    assert!(info[0][0] < 1.0 / theta.s);
    assert!(info[0][0] > 1.0 / (theta.s + theta.b));
    let w = width_from_fisher(&info).unwrap();
    assert!((w - 2.0 / info[0][0].sqrt()).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn change_of_variables(x0 in -6.0..9.0f64, x1 in -9.0..9.0f64, x2 in 0.0..4.0f64, r in -1.0..1.0f64, lambda in 0.5..6.0f64) {
        let lhs = background_density(&Observation::new(x0, x1, x2), r, lambda).unwrap();
        let moved = Observation::new(x0 - r, x1, x2 * lambda / LAMBDA0);
        let rhs = background_density(&moved, 0.0, LAMBDA0).unwrap() * lambda / LAMBDA0;
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1e-300));
    }

    #[test]
    fn classifier_is_monotone_in_ratio(x0 in -6.0..9.0f64, x1 in -9.0..9.0f64, x2 in 0.0..4.0f64) {
        let x = Observation::new(x0, x1, x2);
        let t = optimal_classifier(&x, 0.0, 3.0).unwrap();
        let q = density_ratio(&x, 0.0, 3.0).unwrap();
        prop_assert!(t > 0.0 && t < 1.0);
        prop_assert!((t - q / (1.0 + q)).abs() < 1e-12);
    }
}
