//! Mini-batch SGD for the inverse-Fisher objective and for the
//! cross-entropy baseline.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdError, Tape, Tensor};
use crate::exec::Execution;
use crate::nn::{self, init_params, standard_widths, NetworkParams, NnError};
use crate::rng;
use crate::statmodel::{self, BenchmarkSpec, SimulatedSets, StatError, ThetaPoint};
use crate::synthgen::{Label, LabeledDataset, Observation, LAMBDA0};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LossKind {
    Inferno { benchmark: u8 },
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub learning_rate: f64,
    /// Observations per step, split evenly between signal and background.
    pub batch_size: usize,
    pub epochs: usize,
    pub tau: f64,
    pub seed: u64,
    /// Network outputs `b`.
    pub outputs: usize,
    /// Consecutive non-finite or ridge-regularised steps before aborting.
    pub divergence_limit: usize,
}

impl TrainConfig {
    pub fn inferno(benchmark: u8, seed: u64) -> Self {
        Self {
            loss: LossKind::Inferno { benchmark },
            learning_rate: 1e-6,
            batch_size: 2000,
            epochs: 200,
            tau: nn::INFERNO_TAU,
            seed,
            outputs: nn::INFERNO_OUTPUTS,
            divergence_limit: 50,
        }
    }

    pub fn classifier(seed: u64) -> Self {
        Self {
            loss: LossKind::CrossEntropy,
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 200,
            tau: nn::CLASSIFIER_TAU,
            seed,
            outputs: 2,
            divergence_limit: 50,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return bad("batch size must be even and at least 2");
        }
        if !(self.tau > 0.0) {
            return bad("temperature must be positive");
        }
        if self.divergence_limit == 0 {
            return bad("divergence limit must be at least 1");
        }
        if matches!(self.loss, LossKind::CrossEntropy) && self.outputs != 2 {
            return bad("the classifier needs exactly two outputs");
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("training diverged at step {step}: {consecutive} consecutive {reason} steps")]
    Diverged { step: usize, consecutive: usize, reason: &'static str },
    #[error("training set needs at least {needed} observations of each class, found {signal} signal and {background} background")]
    TooFewObservations { needed: usize, signal: usize, background: usize },
    #[error(transparent)]
    Stat(#[from] StatError),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// `U` for the inverse-Fisher objective, cross-entropy otherwise.
    pub loss: f64,
    pub ridged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the untrained network.
    pub epoch: usize,
    /// `√U` on the validation set, or validation cross-entropy.
    pub validation: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub steps: Vec<StepRecord>,
    pub validation: Vec<EpochRecord>,
    pub wall_clock_seconds: f64,
}

impl TrainTrace {
    /// Columns `step,epoch,loss,validation`; validation is filled on the
    /// last step of each epoch and on a step-0 row for the initial network.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TrainError> {
        let mut w = std::io::BufWriter::new(out);
        writeln!(w, "step,epoch,loss,validation")?;
        let val = |epoch: usize| self.validation.iter().find(|v| v.epoch == epoch).map(|v| v.validation);
        if let Some(v) = val(0) {
            writeln!(w, "0,0,,{v}")?;
        }
        for (i, s) in self.steps.iter().enumerate() {
            let last_of_epoch = self.steps.get(i + 1).is_none_or(|n| n.epoch != s.epoch);
            let v = if last_of_epoch { val(s.epoch).map(|v| v.to_string()).unwrap_or_default() } else { String::new() };
            writeln!(w, "{},{},{},{}", s.step, s.epoch, s.loss, v)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn final_validation(&self) -> Option<f64> {
        self.validation.last().map(|v| v.validation)
    }
}

/// `φ ← φ − γ·g`. A non-finite gradient leaves `φ` untouched.
pub fn sgd_step(params: &mut NetworkParams, grads: &[Tensor], learning_rate: f64) -> Result<(), TrainError> {
    if !grads.iter().all(Tensor::all_finite) {
        return Err(TrainError::NonFiniteGradient);
    }
    params.apply_update(grads, learning_rate);
    Ok(())
}

/// Per-epoch balanced batching: both classes are shuffled independently and
/// consumed `batch/2` at a time; leftovers that cannot fill a batch are
/// skipped for that epoch.
struct Batcher {
    signal: Vec<Observation>,
    background: Vec<Observation>,
    half: usize,
    seed: u64,
}

impl Batcher {
    fn new(train: &LabeledDataset, batch_size: usize, seed: u64) -> Result<Self, TrainError> {
        let half = batch_size / 2;
        let signal = train.of(Label::Signal);
        let background = train.of(Label::Background);
        if signal.len() < half || background.len() < half {
            return Err(TrainError::TooFewObservations { needed: half, signal: signal.len(), background: background.len() });
        }
        Ok(Self { signal, background, half, seed })
    }

    fn steps_per_epoch(&self) -> usize {
        self.signal.len().min(self.background.len()) / self.half
    }

    /// Batches of one epoch as `(signal, background)` index lists.
    fn epoch(&self, epoch: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut g = rng::stream(self.seed, "train/shuffle", epoch as u64);
        let mut si: Vec<usize> = (0..self.signal.len()).collect();
        let mut bi: Vec<usize> = (0..self.background.len()).collect();
        si.shuffle(&mut g);
        bi.shuffle(&mut g);
        (0..self.steps_per_epoch())
            .map(|k| (si[k * self.half..(k + 1) * self.half].to_vec(), bi[k * self.half..(k + 1) * self.half].to_vec()))
            .collect()
    }
}

fn gather(data: &[Observation], idx: &[usize]) -> Vec<Observation> {
    idx.iter().map(|&i| data[i]).collect()
}

/// Tracks consecutive bad steps.
struct DivergenceGuard {
    limit: usize,
    run: usize,
}

impl DivergenceGuard {
    fn record(&mut self, bad: bool, step: usize, reason: &'static str) -> Result<(), TrainError> {
        self.run = if bad { self.run + 1 } else { 0 };
        if self.run >= self.limit {
            return Err(TrainError::Diverged { step, consecutive: self.run, reason });
        }
        Ok(())
    }
}

/// Validation `√U` at the generation point.
pub fn inferno_validation(
    params: &NetworkParams,
    spec: &BenchmarkSpec,
    valid: &LabeledDataset,
    exec: Execution,
) -> Result<f64, TrainError> {
    let (signal, background) = (valid.of(Label::Signal), valid.of(Label::Background));
    let sets = SimulatedSets { signal: &signal, background: &background, lambda0: LAMBDA0 };
    match statmodel::loss_value(params, &sets, &ThetaPoint::NOMINAL, spec, exec) {
        Ok(v) => Ok(v.u.sqrt()),
        // a collapsed network is reported, and the divergence guard decides
        Err(e) if is_numerical_failure(&e) => Ok(f64::NAN),
        Err(e) => Err(e.into()),
    }
}

/// Errors that mean the network has degenerated rather than that the
/// inputs are wrong: a Fisher matrix beyond regularisation, non-finite
/// adjoints, or non-positive expected counts.
fn is_numerical_failure(e: &StatError) -> bool {
    matches!(
        e,
        StatError::Autodiff(AdError::Singular | AdError::NonFinite { .. }) | StatError::NonPositiveExpectation { .. }
    )
}

pub fn classifier_validation(params: &NetworkParams, valid: &LabeledDataset, exec: Execution) -> Result<f64, TrainError> {
    let probs = params.probabilities(&valid.observations, exec)?;
    Ok(nn::cross_entropy_value(&probs, &valid.labels))
}

/// Inverse-Fisher training at the generation point.
pub fn train_inferno(
    config: &TrainConfig,
    spec: &BenchmarkSpec,
    train: &LabeledDataset,
    valid: &LabeledDataset,
) -> Result<(NetworkParams, TrainTrace), TrainError> {
    train_inferno_with(config, spec, train, valid, Execution::default(), |_| {})
}

/// [`train_inferno`] with an explicit execution mode for validation and a
/// callback after each epoch's validation record.
pub fn train_inferno_with(
    config: &TrainConfig,
    spec: &BenchmarkSpec,
    train: &LabeledDataset,
    valid: &LabeledDataset,
    exec: Execution,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(NetworkParams, TrainTrace), TrainError> {
    config.validate()?;
    let LossKind::Inferno { benchmark } = config.loss else {
        return Err(TrainError::Config("cross-entropy configuration passed to the inverse-Fisher trainer".into()));
    };
    if benchmark != spec.id {
        return Err(TrainError::Config(format!("configuration names benchmark {benchmark}, spec is {}", spec.id)));
    }
    let start = Instant::now();
    let mut params = init_params(config.seed, &standard_widths(config.outputs), config.tau)?;
    let batcher = Batcher::new(train, config.batch_size, config.seed)?;
    let mut trace = TrainTrace::default();
    let record = |trace: &mut TrainTrace, epoch, params: &NetworkParams, cb: &mut dyn FnMut(&EpochRecord)| {
        let validation = inferno_validation(params, spec, valid, exec)?;
        let rec = EpochRecord { epoch, validation };
        cb(&rec);
        trace.validation.push(rec);
        Ok::<_, TrainError>(())
    };
    if config.epochs > 0 && !valid.is_empty() {
        record(&mut trace, 0, &params, &mut on_epoch)?;
    }
    let mut guard = DivergenceGuard { limit: config.divergence_limit, run: 0 };
    let theta = ThetaPoint::NOMINAL;
    let mut step = 0;
    for epoch in 1..=config.epochs {
        for (si, bi) in batcher.epoch(epoch) {
            step += 1;
            let signal = gather(&batcher.signal, &si);
            let background = gather(&batcher.background, &bi);
            let sets = SimulatedSets { signal: &signal, background: &background, lambda0: LAMBDA0 };
            let tape = Tape::new();
            let net = params.on_tape(&tape);
            let (u, ridged, bad) = match statmodel::inferno_objective(&net, &sets, &theta, spec) {
                Ok(obj) => {
                    let u = obj.loss.item();
                    let ridged = obj.fisher.ridged;
                    let mut bad = !u.is_finite() || ridged;
                    if u.is_finite() {
                        match tape.backward(obj.loss) {
                            Ok(grads) => {
                                let g: Vec<Tensor> = net.leaves().iter().map(|l| grads.get(*l)).collect();
                                bad |= sgd_step(&mut params, &g, config.learning_rate).is_err();
                            }
                            Err(_) => bad = true,
                        }
                    }
                    (u, ridged, bad)
                }
                Err(e) if is_numerical_failure(&e) => (f64::NAN, false, true),
                Err(e) => return Err(e.into()),
            };
            trace.steps.push(StepRecord { step, epoch, loss: u, ridged });
            guard.record(bad, step, if u.is_finite() { "ridge-regularised or non-finite-gradient" } else { "non-finite" })?;
        }
        if !valid.is_empty() {
            record(&mut trace, epoch, &params, &mut on_epoch)?;
        }
    }
    trace.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok((params, trace))
}

/// Cross-entropy baseline.
pub fn train_classifier(
    config: &TrainConfig,
    train: &LabeledDataset,
    valid: &LabeledDataset,
) -> Result<(NetworkParams, TrainTrace), TrainError> {
    train_classifier_with(config, train, valid, Execution::default(), |_| {})
}

pub fn train_classifier_with(
    config: &TrainConfig,
    train: &LabeledDataset,
    valid: &LabeledDataset,
    exec: Execution,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(NetworkParams, TrainTrace), TrainError> {
    config.validate()?;
    if config.loss != LossKind::CrossEntropy {
        return Err(TrainError::Config("inverse-Fisher configuration passed to the classifier trainer".into()));
    }
    let start = Instant::now();
    let mut params = init_params(config.seed, &standard_widths(config.outputs), config.tau)?;
    let batcher = Batcher::new(train, config.batch_size, config.seed)?;
    let mut trace = TrainTrace::default();
    let mut record = |trace: &mut TrainTrace, epoch, params: &NetworkParams| {
        let rec = EpochRecord { epoch, validation: classifier_validation(params, valid, exec)? };
        on_epoch(&rec);
        trace.validation.push(rec);
        Ok::<_, TrainError>(())
    };
    if config.epochs > 0 && !valid.is_empty() {
        record(&mut trace, 0, &params)?;
    }
    let mut guard = DivergenceGuard { limit: config.divergence_limit, run: 0 };
    let mut labels = vec![Label::Signal; batcher.half];
    labels.extend(std::iter::repeat_n(Label::Background, batcher.half));
    let mut step = 0;
    for epoch in 1..=config.epochs {
        for (si, bi) in batcher.epoch(epoch) {
            step += 1;
            let mut batch = gather(&batcher.signal, &si);
            batch.extend(gather(&batcher.background, &bi));
            let tape = Tape::new();
            let net = params.on_tape(&tape);
            let loss = net.cross_entropy(&batch, &labels)?;
            let value = loss.item();
            let mut bad = !value.is_finite();
            if !bad {
                match tape.backward(loss) {
                    Ok(grads) => {
                        let g: Vec<Tensor> = net.leaves().iter().map(|l| grads.get(*l)).collect();
                        bad = sgd_step(&mut params, &g, config.learning_rate).is_err();
                    }
                    Err(_) => bad = true,
                }
            }
            trace.steps.push(StepRecord { step, epoch, loss: value, ridged: false });
            guard.record(bad, step, "non-finite")?;
        }
        if !valid.is_empty() {
            record(&mut trace, epoch, &params)?;
        }
    }
    trace.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok((params, trace))
}
