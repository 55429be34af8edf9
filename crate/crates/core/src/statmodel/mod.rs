//! Binned Poisson likelihood built on a summary statistic, its Asimov form,
//! Fisher information and the inverse-Fisher loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{hessian_block, invert_small_matrix, AdError, Field, SecondOrder, SmallMatrix, Tape, Tensor, Var};
use crate::exec::Execution;
use crate::nn::{NetworkGraph, NetworkParams, NnError};
use crate::synthgen::{self, GenError, NuisanceDirections, Observation};

/// Expectations are clamped here before taking logarithms.
pub const EXPECTATION_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatError {
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("expected count {value} in bin {bin} is not positive")]
    NonPositiveExpectation { bin: usize, value: f64 },
    #[error("observed and expected counts have different lengths")]
    LengthMismatch,
    #[error("unknown benchmark {0}")]
    UnknownBenchmark(u8),
    #[error("simulated {0} sample is empty")]
    EmptySample(&'static str),
    #[error("invalid benchmark definition: {0}")]
    InvalidBenchmark(String),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Generator(#[from] GenError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Param {
    S,
    R,
    Lambda,
    B,
}

impl Param {
    pub const ALL: [Param; 4] = [Param::S, Param::R, Param::Lambda, Param::B];

    pub fn name(self) -> &'static str {
        match self {
            Param::S => "s",
            Param::R => "r",
            Param::Lambda => "lambda",
            Param::B => "b",
        }
    }
}

/// `(s, r, λ, b)`: signal yield, background shift, background rate and
/// background yield.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaPoint {
    pub s: f64,
    pub r: f64,
    pub lambda: f64,
    pub b: f64,
}

impl ThetaPoint {
    /// Generation point of the synthetic problem.
    pub const NOMINAL: ThetaPoint = ThetaPoint { s: 50.0, r: 0.0, lambda: 3.0, b: 1000.0 };

    pub fn get(&self, p: Param) -> f64 {
        match p {
            Param::S => self.s,
            Param::R => self.r,
            Param::Lambda => self.lambda,
            Param::B => self.b,
        }
    }

    pub fn set(&mut self, p: Param, v: f64) {
        match p {
            Param::S => self.s = v,
            Param::R => self.r = v,
            Param::Lambda => self.lambda = v,
            Param::B => self.b = v,
        }
    }

    pub fn with(mut self, p: Param, v: f64) -> Self {
        self.set(p, v);
        self
    }

    pub fn is_valid(&self) -> bool {
        self.s >= 0.0 && self.b > 0.0 && self.lambda > 0.0 && self.r.is_finite()
    }
}

impl Default for ThetaPoint {
    fn default() -> Self {
        Self::NOMINAL
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub param: Param,
    pub mean: f64,
    pub width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub id: u8,
    /// Always ordered `(s, r, λ, b)`.
    pub free: Vec<Param>,
    pub constraints: Vec<Constraint>,
}

impl BenchmarkSpec {
    pub const IDS: [u8; 5] = [0, 1, 2, 3, 4];

    pub fn new(id: u8) -> Result<Self, StatError> {
        use Param::*;
        let r_c = Constraint { param: R, mean: 0.0, width: 0.4 };
        let l_c = Constraint { param: Lambda, mean: 3.0, width: 1.0 };
        let b_c = Constraint { param: B, mean: 1000.0, width: 100.0 };
        let (free, constraints) = match id {
            0 => (vec![S], vec![]),
            1 => (vec![S, R], vec![]),
            2 => (vec![S, R, Lambda], vec![]),
            3 => (vec![S, R, Lambda], vec![r_c, l_c]),
            4 => (vec![S, R, Lambda, B], vec![r_c, l_c, b_c]),
            other => return Err(StatError::UnknownBenchmark(other)),
        };
        Ok(Self { id, free, constraints })
    }

    pub fn custom(id: u8, free: Vec<Param>, constraints: Vec<Constraint>) -> Result<Self, StatError> {
        let mut sorted = free.clone();
        sorted.sort();
        sorted.dedup();
        if sorted != free {
            return Err(StatError::InvalidBenchmark("free parameters must be unique and ordered (s, r, lambda, b)".into()));
        }
        if free.first() != Some(&Param::S) {
            return Err(StatError::InvalidBenchmark("the signal yield must be free".into()));
        }
        for c in &constraints {
            if !free.contains(&c.param) {
                return Err(StatError::InvalidBenchmark(format!("constraint on fixed parameter {}", c.param.name())));
            }
            if !(c.width > 0.0) {
                return Err(StatError::InvalidBenchmark(format!("constraint width {} must be positive", c.width)));
            }
        }
        Ok(Self { id, free, constraints })
    }

    pub fn dims(&self) -> usize {
        self.free.len()
    }

    /// Direction index of `p`, if free.
    pub fn direction(&self, p: Param) -> Option<usize> {
        self.free.iter().position(|&q| q == p)
    }

    /// Index of the parameter of interest.
    pub fn poi(&self) -> usize {
        0
    }

    pub fn nuisance_directions(&self) -> NuisanceDirections {
        NuisanceDirections { dims: self.dims(), shift: self.direction(Param::R), rate: self.direction(Param::Lambda) }
    }

    pub fn without_constraints(&self) -> Self {
        Self { constraints: Vec::new(), ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryCounts {
    pub counts: Vec<f64>,
    pub total: f64,
    pub soft: bool,
    pub tau: Option<f64>,
}

/// Bin of each row: the argmax, lowest index on ties.
pub fn hard_assignments(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row_slice(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn histogram(assignments: &[usize], bins: usize) -> Vec<f64> {
    let mut counts = vec![0.0; bins];
    for &a in assignments {
        counts[a] += 1.0;
    }
    counts
}

pub fn hard_summary(logits: &Tensor) -> SummaryCounts {
    let counts = histogram(&hard_assignments(logits), logits.cols());
    SummaryCounts { counts, total: logits.rows() as f64, soft: false, tau: None }
}

pub fn soft_summary(logits: &Tensor, tau: f64) -> Result<SummaryCounts, StatError> {
    if !(tau > 0.0) {
        return Err(StatError::NonPositiveTemperature(tau));
    }
    let mut counts = vec![0.0; logits.cols()];
    for r in 0..logits.rows() {
        let p = crate::nn::softmax_probs(logits.row_slice(r), tau)?;
        for (c, v) in counts.iter_mut().zip(p) {
            *c += v;
        }
    }
    Ok(SummaryCounts { counts, total: logits.rows() as f64, soft: true, tau: Some(tau) })
}

/// `Σ_i expected_i − observed_i·ln(expected_i)`; observed-only terms dropped.
pub fn poisson_nll(observed: &[f64], expected: &[f64]) -> Result<f64, StatError> {
    if observed.len() != expected.len() {
        return Err(StatError::LengthMismatch);
    }
    let mut total = 0.0;
    for (bin, (&n, &mu)) in observed.iter().zip(expected).enumerate() {
        if !(mu > 0.0) {
            return Err(StatError::NonPositiveExpectation { bin, value: mu });
        }
        total += mu - n * mu.ln();
    }
    Ok(total)
}

/// The simulated samples that define the expected histograms.
#[derive(Clone, Copy, Debug)]
pub struct SimulatedSets<'a> {
    pub signal: &'a [Observation],
    /// Generated at `(r, λ) = (0, lambda0)`.
    pub background: &'a [Observation],
    pub lambda0: f64,
}

fn yield_term<'t>(tape: &'t Tape, value: f64, dir: Option<usize>, dims: usize) -> Result<SecondOrder<Var<'t>>, AdError> {
    let v = tape.scalar(value);
    match dir {
        Some(i) => SecondOrder::variable(v, i, dims),
        None => SecondOrder::constant(v, dims),
    }
}

/// Which simulated sample a histogram is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Signal,
    /// Transformed by the nuisance parameters before entering the network.
    Background,
}

/// Mean tempered-softmax output over a sample (`ŝ/g`) as a `1 x bins` row,
/// with derivatives along the nuisance directions for the background.
pub fn sample_histogram<'t>(
    net: &NetworkGraph<'t>,
    data: &[Observation],
    component: Component,
    theta: &ThetaPoint,
    spec: &BenchmarkSpec,
    lambda0: f64,
) -> Result<SecondOrder<Var<'t>>, StatError> {
    let sum = histogram_sum(net, data, component, theta, spec, lambda0)?;
    Ok(sum.scale(1.0 / data.len() as f64))
}

fn histogram_sum<'t>(
    net: &NetworkGraph<'t>,
    data: &[Observation],
    component: Component,
    theta: &ThetaPoint,
    spec: &BenchmarkSpec,
    lambda0: f64,
) -> Result<SecondOrder<Var<'t>>, StatError> {
    if data.is_empty() {
        return Err(StatError::EmptySample(match component {
            Component::Signal => "signal",
            Component::Background => "background",
        }));
    }
    let tape = net.leaves()[0].tape();
    let input = match component {
        Component::Signal => synthgen::constant_input(tape, data, spec.dims())?,
        Component::Background => {
            synthgen::nuisance_input(tape, data, theta.r, theta.lambda, lambda0, spec.nuisance_directions())?
        }
    };
    Ok(net.probabilities(&input)?.sum_rows())
}

/// `s·h_sig + b·h_bkg`, floored at [`EXPECTATION_FLOOR`].
pub fn combine_expected<'t>(
    signal_hist: &SecondOrder<Var<'t>>,
    background_hist: &SecondOrder<Var<'t>>,
    theta: &ThetaPoint,
    spec: &BenchmarkSpec,
) -> Result<SecondOrder<Var<'t>>, StatError> {
    let tape = signal_hist.value().tape();
    let s = yield_term(tape, theta.s, spec.direction(Param::S), spec.dims())?;
    let b = yield_term(tape, theta.b, spec.direction(Param::B), spec.dims())?;
    Ok(signal_hist.mul(&s).add(&background_hist.mul(&b)).clamp_min(EXPECTATION_FLOOR))
}

/// Per-bin expectation `s·ŝ(sig)/g_sig + b·ŝ(T_{r,λ}(bkg))/g_bkg` as a
/// `1 x bins` row with derivatives along the free parameters, floored at
/// [`EXPECTATION_FLOOR`].
pub fn expected_counts<'t>(
    net: &NetworkGraph<'t>,
    sets: &SimulatedSets<'_>,
    theta: &ThetaPoint,
    spec: &BenchmarkSpec,
) -> Result<SecondOrder<Var<'t>>, StatError> {
    let sig = sample_histogram(net, sets.signal, Component::Signal, theta, spec, sets.lambda0)?;
    let bkg = sample_histogram(net, sets.background, Component::Background, theta, spec, sets.lambda0)?;
    combine_expected(&sig, &bkg, theta, spec)
}

/// Asimov negative log-likelihood: the observed slot is the expectation's
/// own value, so only the expectation slot varies with θ. The observed
/// counts stay attached to the network parameters.
pub fn asimov_nll<'t>(expected: &SecondOrder<Var<'t>>) -> SecondOrder<Var<'t>> {
    let observed = expected.value();
    expected.sub(&expected.ln().mul_const(observed)).sum()
}

/// Add `0.5·((θ_j − mean)/width)²` for every constraint.
pub fn add_constraints<T: Field>(
    nll: &SecondOrder<T>,
    theta: &ThetaPoint,
    spec: &BenchmarkSpec,
) -> Result<SecondOrder<T>, StatError> {
    let mut out = *nll;
    for c in &spec.constraints {
        let dir = spec
            .direction(c.param)
            .ok_or_else(|| StatError::InvalidBenchmark(format!("constraint on fixed parameter {}", c.param.name())))?;
        if !(c.width > 0.0) {
            return Err(StatError::InvalidBenchmark(format!("constraint width {} must be positive", c.width)));
        }
        let t = SecondOrder::variable(nll.value().constant_like(theta.get(c.param)), dir, spec.dims())?;
        let z = t.offset(-c.mean).scale(1.0 / c.width);
        out = out.add(&z.mul(&z).scale(0.5));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct FisherMatrix<T> {
    pub params: Vec<Param>,
    pub information: SmallMatrix<T>,
    pub covariance: SmallMatrix<T>,
    pub condition: f64,
    /// Set when the information was ridge-regularised before inversion.
    pub ridged: bool,
}

/// Hessian of the NLL along the free directions, and its inverse.
pub fn fisher_information<T: Field>(nll: &SecondOrder<T>, spec: &BenchmarkSpec) -> Result<FisherMatrix<T>, StatError> {
    let information = hessian_block(nll)?;
    let inv = invert_small_matrix(&information)?;
    Ok(FisherMatrix {
        params: spec.free.clone(),
        information,
        covariance: inv.matrix,
        condition: inv.condition,
        ridged: inv.ridged,
    })
}

/// `[I⁻¹]_kk`.
pub fn inferno_loss<T: Field>(fisher: &FisherMatrix<T>, k: usize) -> T {
    fisher.covariance.get(k, k)
}

/// Loss value without parameter gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub u: f64,
    pub ridged: bool,
    pub information: Vec<Vec<f64>>,
    pub expected: Vec<f64>,
}

/// Rows per tape when evaluating the loss on a large sample.
const VALUE_CHUNK: usize = 4096;

/// `U` on arbitrarily large samples: histograms and their θ-derivatives are
/// accumulated chunk by chunk, then combined on a small tape.
pub fn loss_value(
    params: &NetworkParams,
    sets: &SimulatedSets<'_>,
    theta: &ThetaPoint,
    spec: &BenchmarkSpec,
    exec: Execution,
) -> Result<LossValue, StatError> {
    let hist = |data: &[Observation], component| -> Result<SecondOrder<Tensor>, StatError> {
        if data.is_empty() {
            return Err(StatError::EmptySample(if component == Component::Signal { "signal" } else { "background" }));
        }
        let parts = exec.map_chunks(data, VALUE_CHUNK, |chunk| {
            let tape = Tape::new();
            let net = params.on_tape(&tape);
            histogram_sum(&net, chunk, component, theta, spec, sets.lambda0).map(|h| h.map_slots(|v| v.value()))
        });
        let mut total: Option<SecondOrder<Tensor>> = None;
        for part in parts {
            let part = part?;
            match total.as_mut() {
                Some(t) => t.accumulate(&part),
                None => total = Some(part),
            }
        }
        let scale = 1.0 / data.len() as f64;
        Ok(total.expect("non-empty sample").map_slots(|t| t.map(|v| v * scale)))
    };
    let sig = hist(sets.signal, Component::Signal)?;
    let bkg = hist(sets.background, Component::Background)?;
    let tape = Tape::new();
    let rebuild = |h: &SecondOrder<Tensor>| h.map_slots(|t| tape.constant(t.clone()));
    let mu = combine_expected(&rebuild(&sig), &rebuild(&bkg), theta, spec)?;
    let nll = add_constraints(&asimov_nll(&mu), theta, spec)?;
    let fisher = fisher_information(&nll, spec)?;
    Ok(LossValue {
        u: inferno_loss(&fisher, spec.poi()).item(),
        ridged: fisher.ridged,
        information: fisher.information.map(|v| v.item()).primal(),
        expected: mu.value().value().into_data(),
    })
}

/// Everything one loss evaluation produces.
pub struct InfernoObjective<'t> {
    pub loss: Var<'t>,
    pub fisher: FisherMatrix<Var<'t>>,
    pub expected: Vec<f64>,
}

/// Asimov Fisher loss of a network on simulated sets at `theta`.
pub fn inferno_objective<'t>(
    net: &NetworkGraph<'t>,
    sets: &SimulatedSets<'_>,
    theta: &ThetaPoint,
    spec: &BenchmarkSpec,
) -> Result<InfernoObjective<'t>, StatError> {
    let mu = expected_counts(net, sets, theta, spec)?;
    let nll = add_constraints(&asimov_nll(&mu), theta, spec)?;
    let fisher = fisher_information(&nll, spec)?;
    Ok(InfernoObjective {
        loss: inferno_loss(&fisher, spec.poi()),
        expected: mu.value().value().into_data(),
        fisher,
    })
}

#[cfg(test)]
mod tests;
