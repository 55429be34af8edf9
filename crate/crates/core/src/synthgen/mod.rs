//! Synthetic three-dimensional signal/background generator.
//!
//! Signal: `(x0, x1) ~ N((1, 1), I)`, `x2 ~ Exp(rate 2)`.
//! Background: `(x0, x1) ~ N((2 + r, 0), diag(5, 9))`, `x2 ~ Exp(rate lambda)`.
//!
//! Generation is split into fixed-size blocks, each drawn from its own
//! named stream, so output is bit-identical for a seed whatever the thread
//! count.

pub mod io;

use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdError, SecondOrder, Tape, Tensor, Var};
use crate::exec::Execution;
use crate::rng;

pub const SIGNAL_MEAN: [f64; 2] = [1.0, 1.0];
pub const SIGNAL_RATE: f64 = 2.0;
pub const BACKGROUND_MEAN: [f64; 2] = [2.0, 0.0];
pub const BACKGROUND_VARIANCE: [f64; 2] = [5.0, 9.0];
/// Background exponential rate used for generation.
pub const LAMBDA0: f64 = 3.0;

const BLOCK: usize = 1 << 14;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x0: f64,
    pub x1: f64,
    /// Exponential coordinate, non-negative.
    pub x2: f64,
}

impl Observation {
    pub fn new(x0: f64, x1: f64, x2: f64) -> Self {
        Self { x0, x1, x2 }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x0, self.x1, self.x2]
    }

    pub fn is_finite(&self) -> bool {
        self.x0.is_finite() && self.x1.is_finite() && self.x2.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Signal,
    Background,
}

impl Label {
    pub fn as_char(self) -> char {
        match self {
            Label::Signal => 's',
            Label::Background => 'b',
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GenError {
    #[error("exponential rate must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("expected signal must be non-negative and background positive (s={s}, b={b})")]
    InvalidYields { s: f64, b: f64 },
}

/// Observations with their component labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledDataset {
    pub observations: Vec<Observation>,
    pub labels: Vec<Label>,
    /// Background mean shift used at generation.
    pub r0: f64,
    /// Background exponential rate used at generation.
    pub lambda0: f64,
    pub seed: u64,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Observations carrying `label`, in order.
    pub fn of(&self, label: Label) -> Vec<Observation> {
        self.observations.iter().zip(&self.labels).filter(|(_, &l)| l == label).map(|(o, _)| *o).collect()
    }

    /// Concatenate `other` after `self`. Generation metadata of `self` is kept.
    pub fn extend(&mut self, other: LabeledDataset) {
        self.observations.extend(other.observations);
        self.labels.extend(other.labels);
    }
}

/// Sizes and nuisance values for one generation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub r0: f64,
    pub lambda0: f64,
    pub signal_count: usize,
    pub background_count: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { r0: 0.0, lambda0: LAMBDA0, signal_count: 0, background_count: 0, seed: 0 }
    }
}

impl GeneratorConfig {
    /// Signal block followed by background block.
    pub fn generate(&self) -> Result<LabeledDataset, GenError> {
        let mut ds = sample_signal(self.signal_count, rng::derive_seed(self.seed, "signal"));
        let bkg = sample_background(self.background_count, rng::derive_seed(self.seed, "background"), self.r0, self.lambda0)?;
        ds.extend(bkg);
        ds.r0 = self.r0;
        ds.lambda0 = self.lambda0;
        ds.seed = self.seed;
        Ok(ds)
    }
}

fn draw_signal<R: rand::Rng + ?Sized>(r: &mut R) -> Observation {
    let (z0, z1) = rng::normal_pair(r);
    Observation::new(SIGNAL_MEAN[0] + z0, SIGNAL_MEAN[1] + z1, rng::exponential(r, SIGNAL_RATE))
}

fn draw_background<R: rand::Rng + ?Sized>(r: &mut R, shift: f64, lambda: f64) -> Observation {
    let (z0, z1) = rng::normal_pair(r);
    Observation::new(
        BACKGROUND_MEAN[0] + shift + BACKGROUND_VARIANCE[0].sqrt() * z0,
        BACKGROUND_MEAN[1] + BACKGROUND_VARIANCE[1].sqrt() * z1,
        rng::exponential(r, lambda),
    )
}

fn blocked<F>(count: usize, seed: u64, name: &str, draw: F) -> Vec<Observation>
where
    F: Fn(&mut rng::StreamRng) -> Observation + Sync + Send,
{
    let blocks = count.div_ceil(BLOCK);
    Execution::default()
        .map_range(blocks, |b| {
            let mut r = rng::stream(seed, name, b as u64);
            let n = BLOCK.min(count - b * BLOCK);
            (0..n).map(|_| draw(&mut r)).collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect()
}

pub fn sample_signal(count: usize, seed: u64) -> LabeledDataset {
    let observations = blocked(count, seed, "signal", |r| draw_signal(r));
    LabeledDataset { labels: vec![Label::Signal; count], observations, r0: 0.0, lambda0: LAMBDA0, seed }
}

pub fn sample_background(count: usize, seed: u64, r: f64, lambda: f64) -> Result<LabeledDataset, GenError> {
    if !(lambda > 0.0) {
        return Err(GenError::NonPositiveRate(lambda));
    }
    let observations = blocked(count, seed, "background", |g| draw_background(g, r, lambda));
    Ok(LabeledDataset { labels: vec![Label::Background; count], observations, r0: r, lambda0: lambda, seed })
}

/// Map a background observation generated at `lambda0` to the background
/// at shift `r` and rate `lambda`.
pub fn transform_observation(obs: &Observation, r: f64, lambda0: f64, lambda: f64) -> Observation {
    Observation::new(obs.x0 + r, obs.x1, obs.x2 * (lambda0 / lambda))
}

/// Plain-value version of the nuisance transformation. Signal
/// observations pass through unchanged.
pub fn apply_nuisance_transform(
    data: &LabeledDataset,
    r: f64,
    lambda: f64,
) -> Result<LabeledDataset, GenError> {
    if !(lambda > 0.0) {
        return Err(GenError::NonPositiveRate(lambda));
    }
    let observations = data
        .observations
        .iter()
        .zip(&data.labels)
        .map(|(o, l)| match l {
            Label::Signal => *o,
            Label::Background => transform_observation(o, r, data.lambda0, lambda),
        })
        .collect();
    Ok(LabeledDataset { observations, labels: data.labels.clone(), r0: data.r0 + r, lambda0: lambda, seed: data.seed })
}

/// Which second-order direction, if any, the shift and the rate occupy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NuisanceDirections {
    pub dims: usize,
    pub shift: Option<usize>,
    pub rate: Option<usize>,
}

/// Stack observations into an `n x 3` tensor.
pub fn to_tensor(batch: &[Observation]) -> Tensor {
    Tensor::new(batch.len(), 3, batch.iter().flat_map(Observation::as_array).collect())
}

/// Network input without any parameter dependence.
pub fn constant_input<'t>(tape: &'t Tape, batch: &[Observation], dims: usize) -> Result<SecondOrder<Var<'t>>, AdError> {
    SecondOrder::constant(tape.constant(to_tensor(batch)), dims)
}

/// In-graph nuisance transformation of a background batch generated at
/// `lambda0`: `x0 -> x0 + r`, `x2 -> x2 * lambda0 / lambda`, carrying first
/// and second derivatives along the requested directions.
pub fn nuisance_input<'t>(
    tape: &'t Tape,
    batch: &[Observation],
    r: f64,
    lambda: f64,
    lambda0: f64,
    dirs: NuisanceDirections,
) -> Result<SecondOrder<Var<'t>>, GenError> {
    if !(lambda > 0.0) {
        return Err(GenError::NonPositiveRate(lambda));
    }
    let n = batch.len();
    let ratio = lambda0 / lambda;
    let value = Tensor::new(
        n,
        3,
        batch.iter().flat_map(|o| [o.x0 + r, o.x1, o.x2 * ratio]).collect(),
    );
    let column2 = |scale: f64| Tensor::new(n, 3, batch.iter().flat_map(|o| [0.0, 0.0, o.x2 * scale]).collect());

    let mut grad = Vec::new();
    let mut hess = Vec::new();
    if let Some(i) = dirs.shift {
        grad.push((i, tape.constant(Tensor::new(n, 3, [1.0, 0.0, 0.0].repeat(n)))));
    }
    if let Some(i) = dirs.rate {
        grad.push((i, tape.constant(column2(-lambda0 / (lambda * lambda)))));
        hess.push(((i, i), tape.constant(column2(2.0 * lambda0 / (lambda * lambda * lambda)))));
    }
    Ok(SecondOrder::from_parts(tape.constant(value), dirs.dims, grad, hess).expect("directions within bounds"))
}

/// Draw a mixture with expected yields `s` and `b`. With `n = None` the
/// total is Poisson(s + b); each observation is signal with probability
/// `s / (s + b)`.
pub fn mixture_sample(
    n: Option<usize>,
    s: f64,
    b: f64,
    r: f64,
    lambda: f64,
    seed: u64,
) -> Result<LabeledDataset, GenError> {
    if !(s >= 0.0 && b > 0.0) {
        return Err(GenError::InvalidYields { s, b });
    }
    if !(lambda > 0.0) {
        return Err(GenError::NonPositiveRate(lambda));
    }
    let total = match n {
        Some(n) => n,
        None => {
            let mut g = rng::stream(seed, "mixture/count", 0);
            Poisson::new(s + b).expect("positive mean").sample(&mut g) as usize
        }
    };
    let frac = s / (s + b);
    let blocks = total.div_ceil(BLOCK);
    let drawn: Vec<Vec<(Observation, Label)>> = Execution::default().map_range(blocks, |blk| {
        let mut g = rng::stream(seed, "mixture", blk as u64);
        let count = BLOCK.min(total - blk * BLOCK);
        (0..count)
            .map(|_| {
                if rng::open01(&mut g) < frac {
                    (draw_signal(&mut g), Label::Signal)
                } else {
                    (draw_background(&mut g, r, lambda), Label::Background)
                }
            })
            .collect()
    });
    let (observations, labels) = drawn.into_iter().flatten().unzip();
    Ok(LabeledDataset { observations, labels, r0: r, lambda0: lambda, seed })
}
