//! Verification suites: derivative checks against finite differences,
//! Asimov stationarity, soft/hard binning limits, closed-form Fisher
//! fixtures and the mixture sufficiency identity.

use inferno::autodiff::{SecondOrder, Tape, Tensor};
use inferno::exec::Execution;
use inferno::nn::{init_params, NetworkParams};
use inferno::oracle::sufficiency_residual;
use inferno::rng;
use inferno::statmodel::{
    add_constraints, asimov_nll, combine_expected, expected_counts, fisher_information, hard_summary, inferno_loss,
    inferno_objective, loss_value, soft_summary, BenchmarkSpec, Param, SimulatedSets, ThetaPoint,
};
use inferno::synthgen::{mixture_sample, sample_background, sample_signal, Observation, LAMBDA0};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub metric: f64,
    pub threshold: f64,
    pub cases: usize,
}

impl CheckOutcome {
    fn new(name: &str, metric: f64, threshold: f64, cases: usize) -> Self {
        Self { name: name.to_string(), passed: metric < threshold, metric, threshold, cases }
    }
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {:.3e} (threshold {:.1e}, {} cases)", self.name, self.metric, self.threshold, self.cases)
    }
}

/// Relative error with a floor, so near-zero components compare on the
/// scale of their siblings.
fn rel_err(ad: f64, fd: f64, floor: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(floor)
}

struct Case {
    params: NetworkParams,
    signal: Vec<Observation>,
    background: Vec<Observation>,
    spec: BenchmarkSpec,
}

impl Case {
    fn random(seed: u64, index: u64) -> Self {
        let mut g = rng::stream(seed, "check/case", index);
        let outputs = g.random_range(2..=5);
        let hidden = g.random_range(3..=8);
        let tau = g.random_range(0.3..1.0);
        let params = init_params(rng::derive_seed(seed, &format!("check/net/{index}")), &[3, hidden, outputs], tau)
            .expect("valid widths");
        let signal = sample_signal(40, rng::derive_seed(seed, &format!("check/sig/{index}"))).observations;
        let background =
            sample_background(40, rng::derive_seed(seed, &format!("check/bkg/{index}")), 0.0, LAMBDA0).expect("valid").observations;
        let spec = BenchmarkSpec::new(g.random_range(0..5u8)).expect("known benchmark");
        Self { params, signal, background, spec }
    }

    fn sets(&self) -> SimulatedSets<'_> {
        SimulatedSets { signal: &self.signal, background: &self.background, lambda0: LAMBDA0 }
    }

    fn loss(&self, params: &NetworkParams) -> inferno::statmodel::LossValue {
        loss_value(params, &self.sets(), &ThetaPoint::NOMINAL, &self.spec, Execution::Sequential).expect("loss evaluates")
    }

    fn expected_at(&self, theta: &ThetaPoint) -> Vec<f64> {
        loss_value(&self.params, &self.sets(), theta, &self.spec, Execution::Sequential).expect("loss evaluates").expected
    }

    /// Central difference of the expected counts along `p`, or `None` when
    /// steps `h` and `h/2` disagree (a ReLU kink inside the stencil).
    fn expected_derivative(&self, p: Param, h: f64) -> Option<Vec<f64>> {
        let diff = |h: f64| -> Vec<f64> {
            let up = self.expected_at(&ThetaPoint::NOMINAL.with(p, ThetaPoint::NOMINAL.get(p) + h));
            let dn = self.expected_at(&ThetaPoint::NOMINAL.with(p, ThetaPoint::NOMINAL.get(p) - h));
            up.iter().zip(&dn).map(|(u, d)| (u - d) / (2.0 * h)).collect()
        };
        let (a, b) = (diff(h), diff(0.5 * h));
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-6 * scale.max(1e-12)).then_some(a)
    }

    /// Central difference of `value` at parameter entry `e`, or `None` when
    /// steps `h` and `h/2` disagree.
    fn param_derivative(&self, e: (usize, usize), h: f64, value: impl Fn(&NetworkParams) -> f64) -> Option<f64> {
        let diff = |h: f64| (value(&self.perturbed(e, h)) - value(&self.perturbed(e, -h))) / (2.0 * h);
        let (a, b) = (diff(h), diff(0.5 * h));
        ((a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-9)).then_some(a)
    }

    fn perturbed(&self, entry: (usize, usize), h: f64) -> NetworkParams {
        let (t, i) = entry;
        let mut tensors: Vec<Tensor> = self.params.tensors().cloned().collect();
        tensors[t].data_mut()[i] += h;
        let nw = tensors.len() / 2;
        let weights = (0..nw).map(|l| tensors[2 * l].clone()).collect();
        let biases = (0..nw).map(|l| tensors[2 * l + 1].clone()).collect();
        NetworkParams::from_parts(self.params.widths().to_vec(), self.params.tau(), weights, biases).expect("same shapes")
    }

    fn random_entry(&self, g: &mut impl Rng) -> (usize, usize) {
        let sizes: Vec<usize> = self.params.tensors().map(|t| t.len()).collect();
        let t = g.random_range(0..sizes.len());
        (t, g.random_range(0..sizes[t]))
    }
}

/// Parameter gradients of `U`, θ-Hessians of the Asimov NLL, and parameter
/// gradients of Hessian entries, each against central finite differences.
///
/// Draws are skipped when the Fisher matrix needed the ridge, when `U` is
/// flat in the parameters (every event in one bin), or when no kink-free
/// stencil is found; none has a derivative worth comparing. Draws continue
/// until `cases` are tested.
pub fn gradient_suite(cases: usize, seed: u64) -> Vec<CheckOutcome> {
    let (mut worst_grad, mut worst_hess, mut worst_dhess) = (0.0f64, 0.0f64, 0.0f64);
    let mut tested = 0;
    for c in 0..(10 * cases as u64).max(10) {
        if tested == cases {
            break;
        }
        let case = Case::random(seed, c);
        let mut g = rng::stream(seed, "check/entries", c);
        let tape = Tape::new();
        let net = case.params.on_tape(&tape);
        let obj = inferno_objective(&net, &case.sets(), &ThetaPoint::NOMINAL, &case.spec).expect("objective");
        let leaves = net.leaves();

        // ∇_φ U
        let u = obj.loss.item();
        let ridged = obj.fisher.ridged;
        let grads = tape.backward(obj.loss).expect("backward");
        let all: Vec<Tensor> = leaves.iter().map(|l| grads.get(*l)).collect();
        let scale = all.iter().map(|t| t.max_abs()).fold(0.0, f64::max);
        if ridged || scale < 1e-6 * u {
            continue;
        }
        // entries whose stencil straddles a kink are redrawn
        let mut draw = |value: &dyn Fn(&NetworkParams) -> f64| {
            (0..20).find_map(|_| {
                let e = case.random_entry(&mut g);
                case.param_derivative(e, 1e-5, value).map(|fd| (e, fd))
            })
        };
        let mut grad_errs = Vec::new();
        for _ in 0..3 {
            let Some((e, fd)) = draw(&|p: &NetworkParams| case.loss(p).u) else { break };
            grad_errs.push(rel_err(all[e.0].data()[e.1], fd, 1e-3 * scale));
        }

        // θ-Hessian: at the Asimov point the curvature of μ is weighted by
        // 1 − n/μ = 0, so H = Σ ∂μ ∂μᵀ / μ plus the constraint terms, with
        // ∂μ from differences of plain forward evaluations
        let k = case.spec.dims();
        let info: Vec<Vec<f64>> = obj.fisher.information.map(|v| v.item()).primal();
        let step = |p: Param| match p {
            Param::S | Param::B => 1e-3,
            _ => 1e-6,
        };
        let dmu: Option<Vec<Vec<f64>>> = case.spec.free.iter().map(|&p| case.expected_derivative(p, step(p))).collect();
        let Some(dmu) = dmu else { continue };
        let mut hess_errs = Vec::new();
        for i in 0..k {
            for j in 0..=i {
                let mut fd: f64 = obj.expected.iter().enumerate().map(|(b, mu)| dmu[i][b] * dmu[j][b] / mu).sum();
                if i == j {
                    if let Some(c) = case.spec.constraints.iter().find(|c| c.param == case.spec.free[i]) {
                        fd += 1.0 / (c.width * c.width);
                    }
                }
                let floor = 1e-3 * (info[i][i] * info[j][j]).sqrt();
                hess_errs.push(rel_err(info[i][j], fd, floor));
            }
        }

        // ∇_φ of one Hessian entry
        let (i, j) = (g.random_range(0..k), g.random_range(0..k));
        let tape2 = Tape::new();
        let net2 = case.params.on_tape(&tape2);
        let obj2 = inferno_objective(&net2, &case.sets(), &ThetaPoint::NOMINAL, &case.spec).expect("objective");
        let gi = tape2.backward(obj2.fisher.information.get(i, j)).expect("backward");
        let all2: Vec<Tensor> = net2.leaves().iter().map(|l| gi.get(*l)).collect();
        let scale2 = all2.iter().map(|t| t.max_abs()).fold(0.0, f64::max);
        let mut draw = |value: &dyn Fn(&NetworkParams) -> f64| {
            (0..20).find_map(|_| {
                let e = case.random_entry(&mut g);
                case.param_derivative(e, 1e-5, value).map(|fd| (e, fd))
            })
        };
        let Some((e, fd)) = draw(&|p: &NetworkParams| case.loss(p).information[i][j]) else { continue };
        if grad_errs.len() < 3 {
            continue;
        }
        tested += 1;
        worst_grad = grad_errs.into_iter().fold(worst_grad, f64::max);
        worst_hess = hess_errs.into_iter().fold(worst_hess, f64::max);
        worst_dhess = worst_dhess.max(rel_err(all2[e.0].data()[e.1], fd, 1e-3 * scale2));
    }
    let mut out = vec![
        CheckOutcome::new("parameter gradient of U", worst_grad, 1e-5, tested),
        CheckOutcome::new("theta Hessian of the Asimov NLL", worst_hess, 1e-4, tested),
        CheckOutcome::new("parameter gradient of Hessian entries", worst_dhess, 1e-4, tested),
    ];
    for o in &mut out {
        o.passed &= tested == cases;
    }
    out
}

/// `‖∇_θ NLL‖∞` at the generation point, for random networks under every
/// benchmark.
pub fn stationarity_suite(networks: usize, seed: u64) -> CheckOutcome {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for n in 0..networks {
        let params = init_params(rng::derive_seed(seed, &format!("stationarity/{n}")), &[3, 100, 100, 10], 0.1).expect("widths");
        let signal = sample_signal(200, rng::derive_seed(seed, &format!("stationarity/sig/{n}"))).observations;
        let background = sample_background(200, rng::derive_seed(seed, &format!("stationarity/bkg/{n}")), 0.0, LAMBDA0)
            .expect("valid")
            .observations;
        let sets = SimulatedSets { signal: &signal, background: &background, lambda0: LAMBDA0 };
        for id in BenchmarkSpec::IDS {
            let spec = BenchmarkSpec::new(id).expect("known");
            let tape = Tape::new();
            let net = params.on_tape(&tape);
            let mu = expected_counts(&net, &sets, &ThetaPoint::NOMINAL, &spec).expect("expected counts");
            let nll = add_constraints(&asimov_nll(&mu), &ThetaPoint::NOMINAL, &spec).expect("constraints");
            for d in 0..spec.dims() {
                worst = worst.max(nll.derivative(d).map(|v| v.item().abs()).unwrap_or(0.0));
            }
            cases += 1;
        }
    }
    CheckOutcome::new("Asimov stationarity", worst, 1e-6, cases)
}

/// Soft counts at τ = 0.01 against hard counts on logits whose top two
/// entries differ by at least one, and the uniform split at equal logits.
pub fn soft_hard_suite(seed: u64) -> Vec<CheckOutcome> {
    let (n, bins) = (1000, 10);
    let mut g = rng::stream(seed, "check/logits", 0);
    let mut data = Vec::with_capacity(n * bins);
    for _ in 0..n {
        let mut row: Vec<f64> = (0..bins).map(|_| g.random_range(-3.0..3.0)).collect();
        let top = g.random_range(0..bins);
        let rest = row.iter().enumerate().filter(|(i, _)| *i != top).map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
        row[top] = rest + g.random_range(1.0..3.0);
        data.extend(row);
    }
    let logits = Tensor::new(n, bins, data);
    let hard = hard_summary(&logits);
    let soft = soft_summary(&logits, 0.01).expect("positive temperature");
    let worst = hard.counts.iter().zip(&soft.counts).map(|(h, s)| (h - s).abs()).fold(0.0, f64::max);
    let equal = soft_summary(&Tensor::filled(n, bins, 0.7), 0.01).expect("positive temperature");
    let uniform = equal.counts.iter().map(|c| (c - n as f64 / bins as f64).abs()).fold(0.0, f64::max);
    vec![
        CheckOutcome::new("soft to hard limit (per-bin deviation / n)", worst / n as f64, 0.01 + f64::EPSILON, n),
        CheckOutcome::new("uniform counts at equal logits", uniform, 1e-9, n),
    ]
}

/// Expected-count model `s·f_s + b·f_b` with fixed per-bin fractions.
fn fraction_fisher(fs: &[f64], fb: &[f64], spec: &BenchmarkSpec) -> (Vec<Vec<f64>>, f64) {
    let tape = Tape::new();
    let dims = spec.dims();
    let row = |v: &[f64]| SecondOrder::constant(tape.constant(Tensor::row(v.to_vec())), dims).expect("dims");
    let mu = combine_expected(&row(fs), &row(fb), &ThetaPoint::NOMINAL, spec).expect("expected");
    let f = fisher_information(&asimov_nll(&mu), spec).expect("fisher");
    (f.information.map(|v| v.item()).primal(), inferno_loss(&f, 0).item())
}

/// Closed-form binned Poisson information `Σ_i ∂_jμ_i ∂_kμ_i / μ_i`.
fn brute_force_fisher(mu: &[f64], dmu: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = dmu.len();
    let mut out = vec![vec![0.0; k]; k];
    for (j, row) in out.iter_mut().enumerate() {
        for (l, v) in row.iter_mut().enumerate() {
            *v = (0..mu.len()).map(|i| dmu[j][i] * dmu[l][i] / mu[i]).sum();
        }
    }
    out
}

pub fn fisher_fixture_suite() -> Vec<CheckOutcome> {
    let b0 = BenchmarkSpec::new(0).expect("known");
    let (_, u1) = fraction_fisher(&[1.0], &[1.0], &b0);
    let oracle1 = 1050.0f64;
    let single = rel_err(u1.sqrt(), oracle1.sqrt(), 0.0);

    let spec = BenchmarkSpec::custom(9, vec![Param::S, Param::B], vec![]).expect("valid");
    let (fs, fb) = ([0.8, 0.2], [0.2, 0.8]);
    let (info, u2) = fraction_fisher(&fs, &fb, &spec);
    let mu: Vec<f64> = (0..2).map(|i| 50.0 * fs[i] + 1000.0 * fb[i]).collect();
    let bf = brute_force_fisher(&mu, &[fs.to_vec(), fb.to_vec()]);
    let det = bf[0][0] * bf[1][1] - bf[0][1] * bf[1][0];
    let inv_ss = bf[1][1] / det;
    let mut worst_info: f64 = 0.0;
    for j in 0..2 {
        for l in 0..2 {
            worst_info = worst_info.max(rel_err(info[j][l], bf[j][l], 0.0));
        }
    }
    vec![
        CheckOutcome::new("single-bin sigma_s = sqrt(1050)", single, 1e-6, 1),
        CheckOutcome::new("two-bin information vs brute force", worst_info, 1e-6, 4),
        CheckOutcome::new("two-bin [I^-1]_ss vs cofactor inverse", rel_err(u2, inv_ss, 0.0), 1e-6, 1),
        CheckOutcome::new("two-bin [I^-1]_ss vs 516.67 (2 decimals)", (u2 - 516.67).abs(), 0.005 + 1e-9, 1),
    ]
}

/// Mixture factorisation through the optimal classifier output, on uniform
/// random points and on points drawn from the mixture.
pub fn sufficiency_suite(points: usize, seed: u64) -> Vec<CheckOutcome> {
    let mut g = rng::stream(seed, "check/sufficiency", 0);
    let uniform: Vec<Observation> = (0..points)
        .map(|_| Observation::new(g.random_range(-5.0..8.0), g.random_range(-8.0..8.0), g.random_range(0.0..3.0)))
        .collect();
    let mixture = mixture_sample(Some(points), 50.0, 1000.0, 0.0, LAMBDA0, rng::derive_seed(seed, "check/mixture"))
        .expect("valid yields")
        .observations;
    let mut out = Vec::new();
    for mu in [0.0, 50.0 / 1050.0, 0.5] {
        let mut worst: f64 = 0.0;
        let mut tested = 0;
        for pts in [&uniform, &mixture] {
            let r = sufficiency_residual(pts, mu, 0.0, LAMBDA0).expect("positive rate");
            worst = worst.max(r.max_residual);
            tested += r.tested;
        }
        out.push(CheckOutcome::new(&format!("sufficiency residual at mu={mu:.4}"), worst, 1e-12, tested));
    }
    out
}
