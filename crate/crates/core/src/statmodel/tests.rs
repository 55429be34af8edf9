use approx::assert_relative_eq;
use proptest::prelude::*;

use super::*;
use crate::autodiff::Tape;
use crate::exec::Execution;
use crate::nn::{init_params, NetworkParams};
use crate::synthgen::{sample_background, sample_signal, LAMBDA0};

/// `μ = s·fs + b·fb` for fixed bin fractions, with `s` and optionally `b` free.
fn fraction_model<'t>(tape: &'t Tape, fs: &[f64], fb: &[f64], spec: &BenchmarkSpec) -> SecondOrder<Var<'t>> {
    let theta = ThetaPoint::NOMINAL;
    let dims = spec.dims();
    let fs = SecondOrder::constant(tape.constant(Tensor::row(fs.to_vec())), dims).unwrap();
    let fb = SecondOrder::constant(tape.constant(Tensor::row(fb.to_vec())), dims).unwrap();
    let s = yield_term(tape, theta.s, spec.direction(Param::S), dims).unwrap();
    let b = yield_term(tape, theta.b, spec.direction(Param::B), dims).unwrap();
    fs.mul(&s).add(&fb.mul(&b))
}

/// Closed-form binned Poisson information `Σ_i ∂_jμ_i ∂_kμ_i / μ_i`.
fn closed_form_fisher(mu: &[f64], dmu: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = dmu.len();
    let mut out = vec![vec![0.0; k]; k];
    for j in 0..k {
        for l in 0..k {
            out[j][l] = (0..mu.len()).map(|i| dmu[j][i] * dmu[l][i] / mu[i]).sum();
        }
    }
    out
}

fn inverse_2x2(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    vec![vec![m[1][1] / det, -m[0][1] / det], vec![-m[1][0] / det, m[0][0] / det]]
}

#[test]
fn single_bin_fisher() {
    let tape = Tape::new();
    let spec = BenchmarkSpec::new(0).unwrap();
    let mu = fraction_model(&tape, &[1.0], &[1.0], &spec);
    assert_eq!(mu.value().item(), 1050.0);
    let f = fisher_information(&asimov_nll(&mu), &spec).unwrap();
    assert_relative_eq!(f.information.get(0, 0).item(), 1.0 / 1050.0, max_relative = 1e-12);
    let u = inferno_loss(&f, 0).item();
    assert_relative_eq!(u, 1050.0, max_relative = 1e-12);
    assert!((u.sqrt() - 32.4037).abs() < 1e-4);
}

#[test]
fn two_bin_fisher_with_free_background() {
    let tape = Tape::new();
    let spec = BenchmarkSpec::custom(9, vec![Param::S, Param::B], vec![]).unwrap();
    let mu = fraction_model(&tape, &[0.8, 0.2], &[0.2, 0.8], &spec);
    let f = fisher_information(&asimov_nll(&mu), &spec).unwrap();
    let got = f.information.map(|v| v.item()).primal();

    let mu_v = [50.0 * 0.8 + 1000.0 * 0.2, 50.0 * 0.2 + 1000.0 * 0.8];
    let oracle = closed_form_fisher(&mu_v, &[vec![0.8, 0.2], vec![0.2, 0.8]]);
    for j in 0..2 {
        for l in 0..2 {
            assert_relative_eq!(got[j][l], oracle[j][l], max_relative = 1e-12);
        }
    }
    assert!((got[0][0] - 0.00271605).abs() < 1e-8);
    assert!((got[0][1] - 0.000864198).abs() < 1e-9);
    assert!((got[1][1] - 0.00095679).abs() < 1e-8);
    let u = inferno_loss(&f, 0).item();
    assert_relative_eq!(u, inverse_2x2(&oracle)[0][0], max_relative = 1e-10);
    assert!((u - 516.67).abs() < 0.01);
    assert!((u.sqrt() - 22.73).abs() < 0.005);
}

#[test]
fn constraint_curvatures() {
    let spec = BenchmarkSpec::new(4).unwrap();
    let zero = SecondOrder::constant(0.0, spec.dims()).unwrap();
    let nll = add_constraints(&zero, &ThetaPoint::NOMINAL, &spec).unwrap();
    let h = hessian_block(&nll).unwrap().primal();
    assert_relative_eq!(h[1][1], 6.25, max_relative = 1e-14);
    assert_relative_eq!(h[2][2], 1.0, max_relative = 1e-14);
    assert_relative_eq!(h[3][3], 1e-4, max_relative = 1e-14);
    assert_eq!(h[0][0], 0.0);
    assert_eq!(nll.value(), 0.0);
    // off the constraint mean the value is the Gaussian penalty
    let moved = ThetaPoint { r: 0.4, ..ThetaPoint::NOMINAL };
    assert_relative_eq!(add_constraints(&zero, &moved, &spec).unwrap().value(), 0.5, max_relative = 1e-14);
    let b0 = BenchmarkSpec::new(0).unwrap();
    let one = SecondOrder::constant(1.5, 1).unwrap();
    assert_eq!(add_constraints(&one, &ThetaPoint::NOMINAL, &b0).unwrap().value(), 1.5);
}

#[test]
fn benchmark_definitions() {
    let specs: Vec<_> = BenchmarkSpec::IDS.iter().map(|&i| BenchmarkSpec::new(i).unwrap()).collect();
    assert_eq!(specs.iter().map(BenchmarkSpec::dims).collect::<Vec<_>>(), vec![1, 2, 3, 3, 4]);
    assert!(specs[2].constraints.is_empty());
    assert_eq!(specs[3].constraints.len(), 2);
    assert_eq!(specs[4].constraints[2], Constraint { param: Param::B, mean: 1000.0, width: 100.0 });
    assert!(BenchmarkSpec::new(5).is_err());
    assert!(BenchmarkSpec::custom(9, vec![Param::S], vec![Constraint { param: Param::R, mean: 0.0, width: 1.0 }]).is_err());
    assert!(BenchmarkSpec::custom(9, vec![Param::R, Param::S], vec![]).is_err());
}

#[test]
fn poisson_nll_closed_forms() {
    assert_eq!(poisson_nll(&[0.0], &[1.0]).unwrap(), 1.0);
    assert_relative_eq!(poisson_nll(&[2.0], &[2.0]).unwrap(), 2.0 - 2.0 * 2f64.ln(), max_relative = 1e-15);
    assert!((poisson_nll(&[2.0], &[2.0]).unwrap() - 0.6137).abs() < 1e-4);
    assert!(matches!(poisson_nll(&[1.0], &[0.0]), Err(StatError::NonPositiveExpectation { bin: 0, .. })));
    assert!(poisson_nll(&[1.0, 2.0], &[1.0]).is_err());
    // stationary where observed equals expected
    let n = [3.0, 7.5, 0.2];
    let h = 1e-6;
    for i in 0..3 {
        let mut up = n;
        up[i] += h;
        let mut down = n;
        down[i] -= h;
        let d = (poisson_nll(&n, &up).unwrap() - poisson_nll(&n, &down).unwrap()) / (2.0 * h);
        assert!(d.abs() < 1e-8);
    }
}

#[test]
fn hard_summary_ties_and_tally() {
    let zeros = Tensor::zeros(7, 4);
    assert_eq!(hard_summary(&zeros).counts, vec![7.0, 0.0, 0.0, 0.0]);
    let onehot = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]);
    let s = hard_summary(&onehot);
    assert_eq!(s.counts, vec![1.0, 2.0]);
    assert_eq!(s.total, 3.0);
    assert!(!s.soft);
    assert!(soft_summary(&onehot, 0.0).is_err());
}

#[test]
fn soft_summary_closed_form() {
    let s = soft_summary(&Tensor::from_rows(&[vec![1.0, 0.0]]), 1.0).unwrap();
    let e = std::f64::consts::E;
    assert_relative_eq!(s.counts[0], e / (e + 1.0), max_relative = 1e-14);
    let uniform = soft_summary(&Tensor::filled(6, 3, 0.4), 0.3).unwrap();
    assert!(uniform.counts.iter().all(|&c| (c - 2.0).abs() < 1e-12));
}

struct Fixture {
    params: NetworkParams,
    signal: Vec<Observation>,
    background: Vec<Observation>,
}

impl Fixture {
    fn new(seed: u64, n: usize, tau: f64) -> Self {
        Self {
            params: init_params(seed, &[3, 12, 12, 5], tau).unwrap(),
            signal: sample_signal(n, seed + 1).observations,
            background: sample_background(n, seed + 2, 0.0, LAMBDA0).unwrap().observations,
        }
    }

    fn sets(&self) -> SimulatedSets<'_> {
        SimulatedSets { signal: &self.signal, background: &self.background, lambda0: LAMBDA0 }
    }

    /// Expected counts from plain forward passes on explicitly transformed data.
    fn plain_expected(&self, params: &NetworkParams, t: &ThetaPoint) -> Vec<f64> {
        let hist = |data: &[Observation]| {
            let p = params.probabilities(data, Execution::Sequential).unwrap();
            let mut h = vec![0.0; p.cols()];
            for r in 0..p.rows() {
                for (a, v) in h.iter_mut().zip(p.row_slice(r)) {
                    *a += v / p.rows() as f64;
                }
            }
            h
        };
        let moved: Vec<Observation> =
            self.background.iter().map(|o| Observation::new(o.x0 + t.r, o.x1, o.x2 * LAMBDA0 / t.lambda)).collect();
        hist(&self.signal).iter().zip(hist(&moved)).map(|(a, b)| (t.s * a + t.b * b).max(EXPECTATION_FLOOR)).collect()
    }

    fn loss(&self, spec: &BenchmarkSpec) -> f64 {
        let tape = Tape::new();
        let g = self.params.on_tape(&tape);
        inferno_objective(&g, &self.sets(), &ThetaPoint::NOMINAL, spec).unwrap().loss.item()
    }
}

#[test]
fn fisher_matches_finite_difference_oracle() {
    let fx = Fixture::new(7, 400, 0.5);
    let spec = BenchmarkSpec::new(4).unwrap();
    let theta = ThetaPoint::NOMINAL;
    let tape = Tape::new();
    let g = fx.params.on_tape(&tape);
    let mu = expected_counts(&g, &fx.sets(), &theta, &spec).unwrap();
    let nll = asimov_nll(&mu);
    // Asimov stationarity at the generation point
    for i in 0..spec.dims() {
        if let Some(d) = nll.derivative(i) {
            assert!(d.item().abs() < 1e-6, "gradient {i} = {}", d.item());
        }
    }
    let got = fisher_information(&nll, &spec).unwrap().information.map(|v| v.item()).primal();

    let mu0 = fx.plain_expected(&fx.params, &theta);
    let steps = [1e-3, 1e-5, 1e-5, 1e-3];
    let dmu: Vec<Vec<f64>> = spec
        .free
        .iter()
        .zip(steps)
        .map(|(&p, h)| {
            let up = fx.plain_expected(&fx.params, &theta.with(p, theta.get(p) + h));
            let down = fx.plain_expected(&fx.params, &theta.with(p, theta.get(p) - h));
            up.iter().zip(&down).map(|(u, d)| (u - d) / (2.0 * h)).collect()
        })
        .collect();
    let oracle = closed_form_fisher(&mu0, &dmu);
    for j in 0..4 {
        for l in 0..4 {
            let scale = (oracle[j][j] * oracle[l][l]).sqrt();
            assert!((got[j][l] - oracle[j][l]).abs() <= 1e-6 * scale, "I[{j}][{l}]: {} vs {}", got[j][l], oracle[j][l]);
        }
    }
}

#[test]
fn loss_gradient_matches_finite_difference() {
    let fx = Fixture::new(3, 150, 0.5);
    let spec = BenchmarkSpec::new(3).unwrap();
    let tape = Tape::new();
    let g = fx.params.on_tape(&tape);
    let obj = inferno_objective(&g, &fx.sets(), &ThetaPoint::NOMINAL, &spec).unwrap();
    assert!(!obj.fisher.ridged);
    let grads = tape.backward(obj.loss).unwrap();
    let leaves = g.leaves();
    let h = 1e-6;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf);
        for k in [0, analytic.len() / 3, analytic.len() - 1] {
            let eval = |d: f64| {
                let mut step: Vec<Tensor> = fx.params.tensors().map(|t| t.map(|_| 0.0)).collect();
                step[li].data_mut()[k] = -d;
                let mut q = Fixture { params: fx.params.clone(), signal: fx.signal.clone(), background: fx.background.clone() };
                q.params.apply_update(&step, 1.0);
                q.loss(&spec)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[k];
            assert!((fd - a).abs() <= 1e-4 * fd.abs().max(1e-2), "leaf {li} entry {k}: fd {fd} vs {a}");
        }
    }
}

#[test]
fn chunked_loss_value_matches_single_tape() {
    let fx = Fixture::new(6, 9000, 0.3);
    for id in [0, 2, 4] {
        let spec = BenchmarkSpec::new(id).unwrap();
        let tape = Tape::new();
        let g = fx.params.on_tape(&tape);
        let obj = inferno_objective(&g, &fx.sets(), &ThetaPoint::NOMINAL, &spec).unwrap();
        for exec in [Execution::Sequential, Execution::Parallel] {
            let v = loss_value(&fx.params, &fx.sets(), &ThetaPoint::NOMINAL, &spec, exec).unwrap();
            assert_relative_eq!(v.u, obj.loss.item(), max_relative = 1e-10);
            assert_eq!(v.ridged, obj.fisher.ridged);
        }
    }
}

#[test]
fn expected_counts_conserve_total_rate() {
    let fx = Fixture::new(5, 100, 0.1);
    for theta in [ThetaPoint::NOMINAL, ThetaPoint { s: 0.0, r: 0.3, lambda: 2.5, b: 700.0 }] {
        let tape = Tape::new();
        let g = fx.params.on_tape(&tape);
        let mu = expected_counts(&g, &fx.sets(), &theta, &BenchmarkSpec::new(4).unwrap()).unwrap();
        assert_relative_eq!(mu.value().value().sum(), theta.s + theta.b, max_relative = 1e-12);
        let plain = fx.plain_expected(&fx.params, &theta);
        for (a, b) in mu.value().value().data().iter().zip(&plain) {
            assert_relative_eq!(*a, *b, max_relative = 1e-12);
        }
    }
}

#[test]
fn low_temperature_expectations_approach_hard_counts() {
    let mut fx = Fixture::new(8, 300, 0.01);
    // sharpen the logits so most margins are far above the temperature
    let sharpen: Vec<Tensor> =
        fx.params.tensors().enumerate().map(|(i, t)| if i == 4 { t.map(|v| -49.0 * v) } else { t.map(|_| 0.0) }).collect();
    fx.params.apply_update(&sharpen, 1.0);
    let theta = ThetaPoint::NOMINAL;
    let tape = Tape::new();
    let g = fx.params.on_tape(&tape);
    let mu = expected_counts(&g, &fx.sets(), &theta, &BenchmarkSpec::new(0).unwrap()).unwrap().value().value();
    let hs = hard_summary(&fx.params.logits(&fx.signal).unwrap()).counts;
    let hb = hard_summary(&fx.params.logits(&fx.background).unwrap()).counts;
    let n = fx.signal.len() as f64;
    let diff: f64 = (0..mu.len()).map(|i| (mu.data()[i] - (theta.s * hs[i] + theta.b * hb[i]) / n).abs()).sum();
    assert!(diff <= 0.02 * (theta.s + theta.b), "diff {diff}");
}

#[test]
fn more_free_nuisances_never_shrink_the_variance() {
    let fx = Fixture::new(21, 300, 0.5);
    let u: Vec<f64> = [0, 1, 2].iter().map(|&i| fx.loss(&BenchmarkSpec::new(i).unwrap())).collect();
    let u4 = fx.loss(&BenchmarkSpec::new(4).unwrap().without_constraints());
    assert!(u[0] <= u[1] * (1.0 + 1e-9) && u[1] <= u[2] * (1.0 + 1e-9) && u[2] <= u4 * (1.0 + 1e-9), "{u:?} {u4}");
    // constraints only add information
    let u3 = fx.loss(&BenchmarkSpec::new(3).unwrap());
    assert!(u3 <= u[2] * (1.0 + 1e-9));
}

#[test]
fn information_is_positive_semidefinite() {
    let fx = Fixture::new(4, 200, 0.5);
    let spec = BenchmarkSpec::new(4).unwrap().without_constraints();
    let tape = Tape::new();
    let g = fx.params.on_tape(&tape);
    let f = inferno_objective(&g, &fx.sets(), &ThetaPoint::NOMINAL, &spec).unwrap().fisher;
    let m = f.information.map(|v| v.item()).primal();
    // every principal minor of a PSD matrix is non-negative; check via random quadratic forms
    let mut state = 12345u64;
    for _ in 0..200 {
        let v: Vec<f64> = (0..4)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        let q: f64 = (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).map(|(i, j)| v[i] * m[i][j] * v[j]).sum();
        assert!(q >= -1e-9);
    }
}

proptest! {
    #[test]
    fn hard_summary_matches_brute_force(data in prop::collection::vec(prop::collection::vec(-3i32..3, 4), 1..200)) {
        let rows: Vec<Vec<f64>> = data.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        let logits = Tensor::from_rows(&rows);
        let mut tally = vec![0.0; 4];
        for r in &rows {
            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            tally[r.iter().position(|&v| v == max).unwrap()] += 1.0;
        }
        let s = hard_summary(&logits);
        prop_assert_eq!(s.counts.iter().sum::<f64>(), rows.len() as f64);
        prop_assert_eq!(s.counts, tally);
    }

    #[test]
    fn soft_summary_conserves_counts(data in prop::collection::vec(prop::collection::vec(-20.0f64..20.0, 3), 1..100), tau in 0.01f64..10.0) {
        let logits = Tensor::from_rows(&data);
        let s = soft_summary(&logits, tau).unwrap();
        prop_assert!((s.counts.iter().sum::<f64>() - data.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn constraints_never_lower_the_diagonal(fs in prop::collection::vec(0.01f64..1.0, 3), fb in prop::collection::vec(0.01f64..1.0, 3)) {
        let tape = Tape::new();
        let spec = BenchmarkSpec::custom(9, vec![Param::S, Param::B], vec![Constraint { param: Param::B, mean: 1000.0, width: 50.0 }]).unwrap();
        let mu = fraction_model(&tape, &fs, &fb, &spec);
        let nll = asimov_nll(&mu);
        let plain = fisher_information(&nll, &spec.without_constraints()).unwrap().information.map(|v| v.item()).primal();
        let constrained = fisher_information(&add_constraints(&nll, &ThetaPoint::NOMINAL, &spec).unwrap(), &spec).unwrap();
        let c = constrained.information.map(|v| v.item()).primal();
        prop_assert!(c[0][0] >= plain[0][0] && c[1][1] >= plain[1][1]);
        prop_assert!((c[1][1] - plain[1][1] - 1.0 / 2500.0).abs() < 1e-12);
    }

    #[test]
    fn tighter_constraints_never_increase_the_loss(w1 in 1.0f64..500.0, shrink in 0.1f64..1.0, fs in prop::collection::vec(0.01f64..1.0, 3), fb in prop::collection::vec(0.01f64..1.0, 3)) {
        let tape = Tape::new();
        let loss = |w: f64| {
            let spec = BenchmarkSpec::custom(9, vec![Param::S, Param::B], vec![Constraint { param: Param::B, mean: 1000.0, width: w }]).unwrap();
            let mu = fraction_model(&tape, &fs, &fb, &spec);
            let nll = add_constraints(&asimov_nll(&mu), &ThetaPoint::NOMINAL, &spec).unwrap();
            inferno_loss(&fisher_information(&nll, &spec).unwrap(), 0).item()
        };
        prop_assert!(loss(w1 * shrink) <= loss(w1) * (1.0 + 1e-9));
    }
}
