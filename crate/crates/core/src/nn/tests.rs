use approx::assert_relative_eq;
use proptest::prelude::*;

use super::*;
use crate::synthgen::{constant_input, nuisance_input, NuisanceDirections};

fn obs(rows: &[[f64; 3]]) -> Vec<Observation> {
    rows.iter().map(|r| Observation::new(r[0], r[1], r[2])).collect()
}

fn zero_network(outputs: usize) -> NetworkParams {
    let mut p = init_params(0, &standard_widths(outputs), 1.0).unwrap();
    let grads: Vec<Tensor> = p.tensors().cloned().collect();
    p.apply_update(&grads, 1.0);
    p
}

/// Small random network whose hidden units are unlikely to sit on a kink.
fn small_network(seed: u64, tau: f64) -> NetworkParams {
    let mut p = init_params(seed, &[3, 7, 5, 4], tau).unwrap();
    let shift: Vec<Tensor> =
        p.tensors().enumerate().map(|(i, t)| if i % 2 == 1 { t.map(|_| -0.05) } else { t.map(|_| 0.0) }).collect();
    p.apply_update(&shift, 1.0);
    p
}

#[test]
fn parameter_count_matches_layer_arithmetic() {
    let p = init_params(1, &standard_widths(10), 0.1).unwrap();
    assert_eq!(p.param_count(), 3 * 100 + 100 + 100 * 100 + 100 + 100 * 10 + 10);
    assert_eq!(p.param_count(), 11_510);
}

#[test]
fn init_is_deterministic_and_bounded() {
    let a = init_params(42, &standard_widths(10), 0.1).unwrap();
    let b = init_params(42, &standard_widths(10), 0.1).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, init_params(43, &standard_widths(10), 0.1).unwrap());
    for (w, pair) in a.weights().iter().zip(a.widths().windows(2)) {
        assert!(w.max_abs() <= init_bound(pair[0], pair[1]));
    }
    assert!(a.biases().iter().all(|b| b.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn invalid_construction_rejected() {
    assert!(matches!(init_params(0, &[3, 100, 100, 10], 0.0), Err(NnError::NonPositiveTemperature(_))));
    assert!(matches!(init_params(0, &[4, 100, 10], 0.1), Err(NnError::InvalidWidths(_))));
    assert!(matches!(init_params(0, &[3, 100, 1], 0.1), Err(NnError::InvalidWidths(_))));
}

#[test]
fn zero_network_gives_uniform_probabilities() {
    let p = zero_network(10);
    let data = obs(&[[0.3, -2.0, 1.0], [5.0, 5.0, 0.1]]);
    let logits = p.logits(&data).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
    let probs = p.probabilities(&data, Execution::Sequential).unwrap();
    assert!(probs.data().iter().all(|&v| (v - 0.1).abs() < 1e-15));
}

#[test]
fn nan_input_rejected() {
    let p = init_params(0, &standard_widths(10), 0.1).unwrap();
    let bad = obs(&[[f64::NAN, 0.0, 0.0]]);
    assert_eq!(p.logits(&bad), Err(NnError::NonFiniteInput));
    let tape = Tape::new();
    let g = p.on_tape(&tape);
    let input = constant_input(&tape, &bad, 0).unwrap();
    assert!(matches!(g.forward(&input), Err(NnError::NonFiniteInput)));
}

#[test]
fn softmax_closed_forms() {
    let third = softmax_probs(&[1.0, 1.0, 1.0], 0.37).unwrap();
    assert!(third.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    let e = std::f64::consts::E;
    let two = softmax_probs(&[1.0, 0.0], 1.0).unwrap();
    assert_relative_eq!(two[0], e / (e + 1.0), max_relative = 1e-14);
    assert_relative_eq!(two[1], 1.0 / (e + 1.0), max_relative = 1e-14);
    assert!((two[0] - 0.7311).abs() < 1e-4);
    let hard = softmax_probs(&[1.0, 0.0], 0.01).unwrap();
    // 1 - 1e-40 rounds to 1.0 in f64, so the complement carries the bound
    assert!(hard[0] >= 1.0 - 1e-40);
    assert!(hard[1] < 1e-40);
    assert!(softmax_probs(&[1.0, 0.0], -1.0).is_err());
    let big = softmax_probs(&[1e308, 0.0], 1.0).unwrap();
    assert!(big.iter().all(|v| v.is_finite()));
}

#[test]
fn cross_entropy_closed_forms() {
    // uniform two-class predictions
    let p = zero_network(2);
    let data = obs(&[[0.0, 0.0, 1.0], [1.0, 2.0, 3.0]]);
    let labels = [Label::Signal, Label::Background];
    let tape = Tape::new();
    let g = p.on_tape(&tape);
    let ce = g.cross_entropy(&data, &labels).unwrap();
    assert_relative_eq!(ce.item(), std::f64::consts::LN_2, max_relative = 1e-14);

    let probs = Tensor::from_rows(&[vec![0.25, 0.75]]);
    assert_relative_eq!(cross_entropy_value(&probs, &[Label::Signal]), 4f64.ln(), max_relative = 1e-14);
    let confident = Tensor::from_rows(&[vec![1.0 - 1e-12, 1e-12]]);
    assert!(cross_entropy_value(&confident, &[Label::Signal]) < 1e-11);
}

#[test]
fn tape_forward_matches_plain_forward() {
    let p = small_network(3, 0.5);
    let data = obs(&[[0.1, 0.2, 0.3], [-1.0, 2.0, 0.7], [3.0, -0.5, 2.2]]);
    let plain = p.logits(&data).unwrap();
    let tape = Tape::new();
    let g = p.on_tape(&tape);
    let logits = g.forward(&constant_input(&tape, &data, 0).unwrap()).unwrap();
    assert_eq!(logits.value().value(), plain);
}

#[test]
fn input_tangent_matches_finite_difference() {
    // shift direction moves x0, so the tangent is d logits / d x0
    let p = small_network(11, 1.0);
    let data = obs(&[[0.4, -0.3, 0.9], [1.5, 0.5, 0.2], [-0.7, 1.1, 1.4]]);
    let tape = Tape::new();
    let g = p.on_tape(&tape);
    let dirs = NuisanceDirections { dims: 2, shift: Some(0), rate: Some(1) };
    let input = nuisance_input(&tape, &data, 0.0, 3.0, 3.0, dirs).unwrap();
    let out = g.forward(&input).unwrap();
    let d_shift = out.derivative(0).unwrap().value();
    let d_rate = out.derivative(1).unwrap().value();
    let h = 1e-6;
    let moved = |dx0: f64, lambda: f64| {
        let shifted: Vec<Observation> =
            data.iter().map(|o| Observation::new(o.x0 + dx0, o.x1, o.x2 * 3.0 / lambda)).collect();
        p.logits(&shifted).unwrap()
    };
    let (up, down) = (moved(h, 3.0), moved(-h, 3.0));
    let (lup, ldown) = (moved(0.0, 3.0 + h), moved(0.0, 3.0 - h));
    for i in 0..d_shift.len() {
        let fd = (up.data()[i] - down.data()[i]) / (2.0 * h);
        assert!((fd - d_shift.data()[i]).abs() <= 1e-5 * fd.abs().max(1e-3), "shift {i}: {fd} vs {}", d_shift.data()[i]);
        let fd = (lup.data()[i] - ldown.data()[i]) / (2.0 * h);
        assert!((fd - d_rate.data()[i]).abs() <= 1e-5 * fd.abs().max(1e-3), "rate {i}: {fd} vs {}", d_rate.data()[i]);
    }
}

#[test]
fn softmax_second_derivative_matches_finite_difference() {
    let p = small_network(5, 0.7);
    let data = obs(&[[0.4, -0.3, 0.9], [1.5, 0.5, 0.2]]);
    let dirs = NuisanceDirections { dims: 2, shift: Some(0), rate: Some(1) };
    let eval = |r: f64, lambda: f64| {
        let tape = Tape::new();
        let g = p.on_tape(&tape);
        let input = nuisance_input(&tape, &data, r, lambda, 3.0, dirs).unwrap();
        let probs = g.probabilities(&input).unwrap().sum_rows();
        let grab = |v: Option<Var<'_>>| v.unwrap().value().into_data();
        (probs.value().value().into_data(), grab(probs.derivative(1)), grab(probs.second(0, 1)), grab(probs.second(1, 1)))
    };
    let (_, d_rate, h_mixed, h_rate) = eval(0.1, 2.5);
    let h = 1e-5;
    let (_, d_up, _, _) = eval(0.1, 2.5 + h);
    let (_, d_down, _, _) = eval(0.1, 2.5 - h);
    let (_, d_rup, _, _) = eval(0.1 + h, 2.5);
    let (_, d_rdown, _, _) = eval(0.1 - h, 2.5);
    for i in 0..d_rate.len() {
        let fd = (d_up[i] - d_down[i]) / (2.0 * h);
        assert!((fd - h_rate[i]).abs() <= 1e-5 * fd.abs().max(1e-3), "{fd} vs {}", h_rate[i]);
        let fd = (d_rup[i] - d_rdown[i]) / (2.0 * h);
        assert!((fd - h_mixed[i]).abs() <= 1e-5 * fd.abs().max(1e-3), "{fd} vs {}", h_mixed[i]);
    }
}

#[test]
fn model_file_round_trip_is_bit_exact() {
    let p = init_params(9, &standard_widths(10), 0.1).unwrap();
    let f = ModelFile::new(ModelKind::Inferno, &p, 9, Some(3), serde_json::json!({"lr": 1e-6}));
    let json = f.to_json().unwrap();
    let back = ModelFile::from_json(&json).unwrap();
    assert_eq!(back, f);
    let q = back.params().unwrap();
    for (a, b) in p.tensors().zip(q.tensors()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert!(json.contains("\"kind\": \"inferno\""));
    let mut wrong = f.clone();
    wrong.format_version = 99;
    assert!(wrong.params().is_err());
}

proptest! {
    #[test]
    fn softmax_shift_invariance(logits in prop::collection::vec(-50.0f64..50.0, 2..12), c in -100.0f64..100.0, tau in 0.05f64..5.0) {
        let a = softmax_probs(&logits, tau).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
        let b = softmax_probs(&shifted, tau).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(a.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn softmax_temperature_limit_bound(logits in prop::collection::vec(-5.0f64..5.0, 2..10), tau in 0.01f64..1.0) {
        let mut sorted = logits.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let margin = sorted[0] - sorted[1];
        prop_assume!(margin > 0.0);
        let top = logits.iter().position(|&v| v == sorted[0]).unwrap();
        let p = softmax_probs(&logits, tau).unwrap();
        let bound = (logits.len() as f64 - 1.0) * (-margin / tau).exp();
        for (i, v) in p.iter().enumerate() {
            let hard = if i == top { 1.0 } else { 0.0 };
            prop_assert!((v - hard).abs() <= bound + 1e-15);
        }
    }

    #[test]
    fn permuting_observations_permutes_logits(seed in 0u64..1000, rot in 1usize..5) {
        let p = init_params(seed, &[3, 8, 8, 3], 1.0).unwrap();
        let data: Vec<Observation> = (0..5).map(|i| Observation::new(i as f64 * 0.3 - 0.5, 1.0 - i as f64 * 0.2, 0.1 + i as f64)).collect();
        let mut rotated = data.clone();
        rotated.rotate_left(rot);
        let a = p.logits(&data).unwrap();
        let b = p.logits(&rotated).unwrap();
        for i in 0..5 {
            prop_assert_eq!(a.row_slice((i + rot) % 5), b.row_slice(i));
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_difference(seed in 0u64..500) {
        let p = small_network(seed, 0.8);
        let data = obs(&[[0.4, -0.3, 0.9], [1.5, 0.5, 0.2], [-0.7, 1.1, 1.4]]);
        let labels = [Label::Signal, Label::Background, Label::Signal];
        let loss = |q: &NetworkParams| {
            let probs = q.probabilities(&data, Execution::Sequential).unwrap();
            let two = Tensor::new(3, 2, (0..3).flat_map(|r| [probs.get(r, 0), 1.0 - probs.get(r, 0)]).collect());
            cross_entropy_value(&two, &labels)
        };
        // gradient of the same objective through the tape
        let tape = Tape::new();
        let g = p.on_tape(&tape);
        let probs = g.probabilities(&constant_input(&tape, &data, 0).unwrap()).unwrap().value();
        let mut pick = Tensor::zeros(3, p.outputs());
        let mut sign = Tensor::zeros(3, 1);
        for (r, l) in labels.iter().enumerate() {
            pick.set(r, 0, 1.0);
            sign.set(r, 0, if *l == Label::Signal { 1.0 } else { -1.0 });
        }
        let p0 = (probs * tape.constant(pick)).sum_cols();
        // signal rows use p0, background rows 1 - p0
        let chosen = p0 * tape.constant(sign.clone()) + tape.constant(sign.map(|s| if s > 0.0 { 0.0 } else { 1.0 }));
        let obj = chosen.ln().sum().scale(-1.0 / 3.0);
        prop_assert!((obj.item() - loss(&p)).abs() < 1e-12);
        let grads = tape.backward(obj).unwrap();
        let leaves = g.leaves();
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(*leaf);
            for k in [0, analytic.len() / 2, analytic.len() - 1] {
                let perturb = |d: f64| {
                    let mut q = p.clone();
                    let mut step: Vec<Tensor> = q.tensors().map(|t| t.map(|_| 0.0)).collect();
                    step[li].data_mut()[k] = -d;
                    q.apply_update(&step, 1.0);
                    loss(&q)
                };
                let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
                let a = analytic.data()[k];
                prop_assert!((fd - a).abs() <= 1e-4 * fd.abs().max(1e-4), "leaf {} entry {}: {} vs {}", li, k, fd, a);
            }
        }
    }
}
