use proptest::prelude::*;

use super::*;
use crate::nn::init_params;
use crate::oracle::{analytic_from_sample, UnbinnedAsimov};
use crate::statmodel::hard_summary;
use crate::synthgen::{sample_background, sample_signal, GeneratorConfig, LAMBDA0};

fn eval_sample(n: usize, seed: u64) -> EvalSample {
    let d = GeneratorConfig { signal_count: n, background_count: n, seed, ..Default::default() }.generate().unwrap();
    EvalSample::from_dataset(&d)
}

fn optimal_objective(n: usize, seed: u64) -> BinnedObjective {
    BinnedObjective::new(&Statistic::optimal(), &eval_sample(n, seed), ThetaPoint::NOMINAL, Execution::default()).unwrap()
}

/// `0.5·((s − c)/σ)²` plus a quadratic in each nuisance.
struct Quadratic {
    centre: f64,
    sigma: f64,
}

impl ProfileObjective for Quadratic {
    fn evaluate(&self, theta: &ThetaPoint, dirs: &[Param]) -> Result<SecondOrder<f64>, InferenceError> {
        let dims = dirs.len();
        let var = |p: Param| match dirs.iter().position(|&d| d == p) {
            Some(i) => SecondOrder::variable(theta.get(p), i, dims),
            None => SecondOrder::constant(theta.get(p), dims),
        };
        let z = var(Param::S)?.offset(-self.centre).scale(1.0 / self.sigma);
        let r = var(Param::R)?.offset(-0.3);
        let l = var(Param::Lambda)?.offset(-2.5);
        Ok(z.mul(&z).add(&r.mul(&r)).add(&l.mul(&l).scale(3.0)).scale(0.5))
    }
}

/// Double well in r: Newton from r = 0 sees negative curvature.
struct DoubleWell;

impl ProfileObjective for DoubleWell {
    fn evaluate(&self, theta: &ThetaPoint, dirs: &[Param]) -> Result<SecondOrder<f64>, InferenceError> {
        let dims = dirs.len();
        let r = match dirs.iter().position(|&d| d == Param::R) {
            Some(i) => SecondOrder::variable(theta.r, i, dims)?,
            None => SecondOrder::constant(theta.r, dims)?,
        };
        let q = r.mul(&r).offset(-1.0);
        let s = SecondOrder::constant(theta.s - 50.0, dims)?;
        Ok(q.mul(&q).add(&s.mul(&s).scale(0.5)))
    }
}

#[test]
fn probability_binning() {
    assert_eq!(probability_bin(0.999, 10), 9);
    assert_eq!(probability_bin(1.0, 10), 9);
    assert_eq!(probability_bin(0.0, 10), 0);
    assert_eq!(probability_bin(0.35, 10), 3);
}

#[test]
fn argmax_statistic_matches_hard_summary() {
    let params = init_params(3, &crate::nn::standard_widths(10), 0.1).unwrap();
    let data = eval_sample(500, 4).signal;
    let bins = Statistic::Argmax(params.clone()).assign(&data, Execution::Sequential).unwrap();
    let hard = hard_summary(&params.logits(&data).unwrap());
    assert_eq!(statmodel_histogram(&bins, 10), hard.counts);
}

fn statmodel_histogram(bins: &[usize], n: usize) -> Vec<f64> {
    crate::statmodel::histogram(bins, n)
}

#[test]
fn quadratic_interval_widths() {
    let grid = SGrid::default().values();
    let curve = ProfileCurve::from_fn(&grid, |s| 0.5 * ((s - 50.0) / 8.0).powi(2));
    let iv = interval_width(&curve, 0.5).unwrap();
    assert!((iv.lower - 42.0).abs() < 1e-9 && (iv.upper - 58.0).abs() < 1e-9);
    assert!((iv.width - 16.0).abs() < 1e-9);
    assert!((interval_width(&curve, 2.0).unwrap().width - 32.0).abs() < 1e-9);
    let c85 = ProfileCurve::from_fn(&grid, |s| 0.5 * ((s - 50.0) / 8.5).powi(2));
    assert_eq!(interval_width(&c85, 0.5).unwrap().s_min, 50.0);
}

#[test]
fn missing_crossing_is_an_error() {
    let grid: Vec<f64> = (0..20).map(|i| 45.0 + i as f64).collect();
    let curve = ProfileCurve::from_fn(&grid, |s| 0.5 * ((s - 50.0) / 8.0).powi(2));
    assert!(matches!(interval_width(&curve, 0.5), Err(InferenceError::Unbounded(Side::Lower))));
}

#[test]
fn profiling_a_quadratic() {
    let obj = Quadratic { centre: 50.0, sigma: 8.0 };
    let spec = BenchmarkSpec::new(2).unwrap();
    let (curve, iv) = profile_interval(&obj, &spec, &ThetaPoint::NOMINAL, SGrid::default(), 0.5).unwrap();
    assert_eq!(curve.failed_points(), 0);
    assert!((iv.width - 16.0).abs() < 1e-6);
    let p = curve.minimum().unwrap();
    assert!((p.nuisances.r - 0.3).abs() < 1e-8 && (p.nuisances.lambda - 2.5).abs() < 1e-8);
    // narrow grid is widened until both crossings are bracketed
    let narrow = SGrid { lo: 48.0, hi: 52.0, step: 0.5 };
    let (_, iv2) = profile_interval(&obj, &spec, &ThetaPoint::NOMINAL, narrow, 0.5).unwrap();
    assert!((iv2.width - 16.0).abs() < 1e-6);
}

#[test]
fn negative_curvature_falls_back_to_golden_section() {
    let spec = BenchmarkSpec::new(1).unwrap();
    let out = minimize_nuisances(&DoubleWell, &spec, 50.0, &ThetaPoint::NOMINAL).unwrap();
    assert!(out.used_fallback && out.converged);
    assert!((out.theta.r.abs() - 1.0).abs() < 1e-6, "{out:?}");
    assert!(out.nll < 1e-10);
}

#[test]
fn reweighted_histogram_matches_regenerated_sample() {
    let stat = Statistic::optimal();
    let obj = optimal_objective(200_000, 5);
    for (r, lambda) in [(0.3, 3.0), (0.0, 2.5), (-0.2, 3.4)] {
        let theta = ThetaPoint { r, lambda, ..ThetaPoint::NOMINAL };
        let fresh = sample_background(200_000, 77, r, lambda).unwrap();
        let bins = stat.assign(&fresh.observations, Execution::default()).unwrap();
        let direct = crate::statmodel::histogram(&bins, 10);
        let expected = obj.expected(&theta).unwrap();
        let sf = obj.signal_fraction();
        for i in 0..10 {
            let rew = (expected[i] - theta.s * sf[i]) / theta.b;
            let dir = direct[i] / 200_000.0;
            let se = (dir * (1.0 - dir) / 200_000.0).sqrt() * 2.0;
            assert!((rew - dir).abs() < 5.0 * se + 1e-5, "bin {i} at ({r},{lambda}): {rew} vs {dir}");
        }
    }
}

#[test]
fn expected_counts_derivatives_match_differences() {
    let obj = optimal_objective(20_000, 6);
    let theta = ThetaPoint { s: 45.0, r: 0.1, lambda: 2.8, b: 990.0 };
    let dirs = Param::ALL;
    let so = obj.expected_so(&theta, &dirs).unwrap();
    for (i, &p) in dirs.iter().enumerate() {
        let h = 1e-5 * theta.get(p).abs().max(1.0);
        let up = obj.expected_so(&theta.with(p, theta.get(p) + h), &dirs).unwrap();
        let dn = obj.expected_so(&theta.with(p, theta.get(p) - h), &dirs).unwrap();
        for bin in 0..10 {
            let fd = (up[bin].value() - dn[bin].value()) / (2.0 * h);
            let ad = so[bin].derivative(i).unwrap_or(0.0);
            assert!((fd - ad).abs() <= 1e-5 * ad.abs().max(1e-3), "d{}/d{} bin {bin}: {fd} vs {ad}", "mu", p.name());
            for j in 0..4 {
                let fd2 = (up[bin].derivative(j).unwrap_or(0.0) - dn[bin].derivative(j).unwrap_or(0.0)) / (2.0 * h);
                let ad2 = so[bin].second(i, j).unwrap_or(0.0);
                assert!((fd2 - ad2).abs() <= 1e-4 * ad2.abs().max(1e-2), "second ({i},{j}) bin {bin}: {fd2} vs {ad2}");
            }
        }
    }
}

#[test]
fn asimov_centring_and_benchmark_ordering() {
    let obj = optimal_objective(100_000, 7);
    let mut widths = Vec::new();
    for id in BenchmarkSpec::IDS {
        let spec = BenchmarkSpec::new(id).unwrap();
        let ev = evaluate(&obj, &spec, "optimal", SGrid::default()).unwrap();
        assert_eq!(ev.failed_points, 0);
        assert!((ev.interval.s_min - 50.0).abs() <= 0.5);
        assert!(ev.interval.lower < ev.interval.s_min && ev.interval.s_min < ev.interval.upper);
        // nearly quadratic profile
        assert!((ev.fisher_width / ev.interval.width - 1.0).abs() < 0.05, "{} vs {}", ev.fisher_width, ev.interval.width);
        widths.push(ev.interval.width);
    }
    assert!(widths[0] <= widths[1] + 1e-9 && widths[1] <= widths[2] + 1e-9, "{widths:?}");
    assert!(widths[3] <= widths[2] + 1e-9 && widths[3] <= widths[4] + 1e-9, "{widths:?}");

    // no nuisances: profile is the plain NLL
    let spec0 = BenchmarkSpec::new(0).unwrap();
    let curve = profile_nll(&obj, &spec0, &[40.0, 50.0, 60.0], &ThetaPoint::NOMINAL).unwrap();
    for p in &curve.points {
        assert_eq!(p.nll, obj.value(&ThetaPoint::NOMINAL.with(Param::S, p.s)).unwrap());
    }

    // the extended likelihood bounds the binned statistic
    let sample = crate::synthgen::mixture_sample(Some(200_000), 50.0, 1000.0, 0.0, LAMBDA0, 9).unwrap();
    for (id, w) in widths.iter().enumerate() {
        let a = analytic_from_sample(&BenchmarkSpec::new(id as u8).unwrap(), &ThetaPoint::NOMINAL, &sample.observations).unwrap();
        assert!(a.width <= w * 1.02, "benchmark {id}: analytic {} vs binned {w}", a.width);
    }
}

#[test]
fn robustness_scan_at_generation_point() {
    let obj = optimal_objective(50_000, 8);
    let spec = BenchmarkSpec::new(2).unwrap();
    let base = evaluate(&obj, &spec, "", SGrid::default()).unwrap();
    let scan = robustness_scan(&obj, &spec, Param::R, &[-0.4, 0.0, 0.4], SGrid::default()).unwrap();
    assert_eq!(scan[1].width, base.interval.width);
    assert!(scan.iter().all(|p| p.width.is_finite() && p.width > 0.0));
}

#[test]
fn unbinned_asimov_profile_agrees_with_fisher() {
    let theta = ThetaPoint::NOMINAL;
    let spec = BenchmarkSpec::new(1).unwrap();
    let obj = UnbinnedAsimov::new(&theta, 20_000, 10).unwrap();
    let grid = SGrid { lo: 20.0, hi: 80.0, step: 1.0 };
    let (_, iv) = profile_interval(&obj, &spec, &theta, grid, 0.5).unwrap();
    let sample = crate::synthgen::mixture_sample(Some(20_000), 50.0, 1000.0, 0.0, LAMBDA0, 10).unwrap();
    let a = analytic_from_sample(&spec, &theta, &sample.observations).unwrap();
    assert!((iv.width / a.width - 1.0).abs() < 0.03, "profile {} vs fisher {}", iv.width, a.width);
}

#[test]
fn percentiles() {
    let v = [1.0, 2.0, 3.0, 4.0, 5.0];
    assert_eq!(percentile(&v, 0.5), 3.0);
    assert_eq!(percentile(&v, 0.0), 1.0);
    assert_eq!(percentile(&v, 1.0), 5.0);
    assert!((percentile(&v, 0.16) - 1.64).abs() < 1e-12);
    assert!((percentile(&[2.0, 4.0], 0.5) - 3.0).abs() < 1e-12);
}

#[test]
fn table_layout() {
    let eval = eval_sample(20_000, 11);
    let entries = [("optimal".to_string(), vec![Statistic::optimal()])];
    let mut t = benchmark_table(&entries, &[0, 2], &eval, SGrid::default(), Execution::default()).unwrap();
    let sample = crate::synthgen::mixture_sample(Some(20_000), 50.0, 1000.0, 0.0, LAMBDA0, 12).unwrap();
    let analytic: Vec<_> = [0u8, 2]
        .iter()
        .map(|&b| analytic_from_sample(&BenchmarkSpec::new(b).unwrap(), &ThetaPoint::NOMINAL, &sample.observations).unwrap())
        .collect();
    t.push_analytic("analytic", &analytic);
    assert_eq!(t.rows.len(), 2);
    assert!(t.cell("optimal", 2).unwrap().median >= t.cell("optimal", 0).unwrap().median);
    let mut buf = Vec::new();
    t.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().nth(3).unwrap().starts_with("analytic,0,"));
}

#[test]
fn signal_sample_is_unaffected_by_nuisances() {
    let eval = EvalSample { signal: sample_signal(1000, 1).observations, ..eval_sample(1000, 2) };
    let obj = BinnedObjective::new(&Statistic::optimal(), &eval, ThetaPoint::NOMINAL, Execution::Sequential).unwrap();
    let a = obj.expected(&ThetaPoint { b: 0.001, ..ThetaPoint::NOMINAL }).unwrap();
    let b = obj.expected(&ThetaPoint { b: 0.001, r: 0.5, lambda: 2.0, ..ThetaPoint::NOMINAL }).unwrap();
    let total_a: f64 = a.iter().sum();
    let total_b: f64 = b.iter().sum();
    assert!((total_a - 50.001).abs() < 1e-9 && (total_b - 50.001).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn injected_quadratic_width_is_recovered(sigma in 3.0..14.0f64, centre in 45.0..55.0f64) {
        let grid = SGrid::default().values();
        let curve = ProfileCurve::from_fn(&grid, |s| 0.5 * ((s - centre) / sigma).powi(2));
        let iv = interval_width(&curve, 0.5).unwrap();
        prop_assert!((iv.width / (2.0 * sigma) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn constraint_tightening_never_widens(width in 0.05..2.0f64) {
        let obj = Quadratic { centre: 50.0, sigma: 8.0 };
        let loose = BenchmarkSpec::new(2).unwrap();
        let tight = BenchmarkSpec::custom(
            9,
            loose.free.clone(),
            vec![crate::statmodel::Constraint { param: Param::R, mean: 0.0, width }],
        )
        .unwrap();
        let grid = SGrid { lo: 30.0, hi: 70.0, step: 1.0 };
        let (_, a) = profile_interval(&obj, &loose, &ThetaPoint::NOMINAL, grid, 0.5).unwrap();
        let (_, b) = profile_interval(&obj, &tight, &ThetaPoint::NOMINAL, grid, 0.5).unwrap();
        prop_assert!(b.width <= a.width + 1e-9);
    }
}
