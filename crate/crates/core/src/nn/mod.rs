//! Per-observation network `f(x; φ)`: a ReLU multilayer perceptron with a
//! temperature softmax head.

mod model_file;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul, AdError, SecondOrder, Tape, Tensor, Var};
use crate::exec::Execution;
use crate::rng;
use crate::synthgen::{self, Label, Observation};

pub use model_file::{ModelFile, ModelFileError, MODEL_FORMAT_VERSION};

pub const INPUT_DIM: usize = 3;
pub const HIDDEN: usize = 100;
pub const INFERNO_TAU: f64 = 0.1;
pub const INFERNO_OUTPUTS: usize = 10;
pub const CLASSIFIER_TAU: f64 = 1.0;

/// Rows per chunk when evaluating large samples.
const EVAL_CHUNK: usize = 8192;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("invalid layer widths {0:?}: expected [3, ..., b] with b >= 2")]
    InvalidWidths(Vec<usize>),
    #[error("non-finite value in network input")]
    NonFiniteInput,
    #[error("parameter shapes do not match widths")]
    ShapeMismatch,
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Inferno,
    Classifier,
}

/// Weights are stored `fan_in x fan_out`, biases as `1 x fan_out` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    widths: Vec<usize>,
    tau: f64,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

pub fn standard_widths(outputs: usize) -> Vec<usize> {
    vec![INPUT_DIM, HIDDEN, HIDDEN, outputs]
}

fn check_widths(widths: &[usize]) -> Result<(), NnError> {
    let ok = widths.len() >= 2 && widths[0] == INPUT_DIM && *widths.last().unwrap() >= 2 && widths.iter().all(|&w| w > 0);
    if ok {
        Ok(())
    } else {
        Err(NnError::InvalidWidths(widths.to_vec()))
    }
}

/// Glorot-uniform half-width for a `fan_in x fan_out` matrix.
pub fn init_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn init_params(seed: u64, widths: &[usize], tau: f64) -> Result<NetworkParams, NnError> {
    check_widths(widths)?;
    if !(tau > 0.0) {
        return Err(NnError::NonPositiveTemperature(tau));
    }
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for (layer, pair) in widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = init_bound(fan_in, fan_out);
        let mut g = rng::stream(seed, "nn/init", layer as u64);
        let data = (0..fan_in * fan_out).map(|_| g.random_range(-bound..=bound)).collect();
        weights.push(Tensor::new(fan_in, fan_out, data));
        biases.push(Tensor::zeros(1, fan_out));
    }
    Ok(NetworkParams { widths: widths.to_vec(), tau, weights, biases })
}

impl NetworkParams {
    pub fn from_parts(widths: Vec<usize>, tau: f64, weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self, NnError> {
        check_widths(&widths)?;
        if !(tau > 0.0) {
            return Err(NnError::NonPositiveTemperature(tau));
        }
        let layers = widths.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(NnError::ShapeMismatch);
        }
        for (l, pair) in widths.windows(2).enumerate() {
            if weights[l].shape() != (pair[0], pair[1]) || biases[l].shape() != (1, pair[1]) {
                return Err(NnError::ShapeMismatch);
            }
        }
        Ok(Self { widths, tau, weights, biases })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn outputs(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).all(Tensor::all_finite)
    }

    /// Tensors in the order used by [`NetworkGraph::leaves`].
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b])
    }

    /// `φ -= lr * grad`, with gradients in [`NetworkParams::tensors`] order.
    pub fn apply_update(&mut self, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), 2 * self.weights.len(), "gradient count");
        for (l, (w, b)) in self.weights.iter_mut().zip(self.biases.iter_mut()).enumerate() {
            w.axpy(-lr, &grads[2 * l]);
            b.axpy(-lr, &grads[2 * l + 1]);
        }
    }

    /// Record the parameters as tape leaves.
    pub fn on_tape<'t>(&self, tape: &'t Tape) -> NetworkGraph<'t> {
        NetworkGraph {
            weights: self.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.leaf(b.clone())).collect(),
            tau: self.tau,
        }
    }

    /// Logits for a batch, without graph recording.
    pub fn logits(&self, batch: &[Observation]) -> Result<Tensor, NnError> {
        let x = synthgen::to_tensor(batch);
        if !x.all_finite() {
            return Err(NnError::NonFiniteInput);
        }
        let last = self.weights.len() - 1;
        let mut h = x;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = matmul(&h, w);
            for r in 0..z.rows() {
                for c in 0..z.cols() {
                    let v = z.get(r, c) + b.get(0, c);
                    z.set(r, c, if l < last && v <= 0.0 { 0.0 } else { v });
                }
            }
            h = z;
        }
        Ok(h)
    }

    /// Logits for an arbitrarily large sample, evaluated in chunks.
    pub fn logits_chunked(&self, data: &[Observation], exec: Execution) -> Result<Tensor, NnError> {
        let parts = exec.map_chunks(data, EVAL_CHUNK, |chunk| self.logits(chunk));
        let mut out = Vec::with_capacity(data.len() * self.outputs());
        for part in parts {
            out.extend_from_slice(part?.data());
        }
        Ok(Tensor::new(data.len(), self.outputs(), out))
    }

    /// Tempered softmax probabilities, one row per observation.
    pub fn probabilities(&self, data: &[Observation], exec: Execution) -> Result<Tensor, NnError> {
        let logits = self.logits_chunked(data, exec)?;
        let mut out = Vec::with_capacity(logits.len());
        for r in 0..logits.rows() {
            out.extend(softmax_probs(logits.row_slice(r), self.tau)?);
        }
        Ok(Tensor::new(logits.rows(), logits.cols(), out))
    }
}

/// Network parameters recorded on a tape.
pub struct NetworkGraph<'t> {
    weights: Vec<Var<'t>>,
    biases: Vec<Var<'t>>,
    tau: f64,
}

impl<'t> NetworkGraph<'t> {
    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Leaves in [`NetworkParams::tensors`] order.
    pub fn leaves(&self) -> Vec<Var<'t>> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [*w, *b]).collect()
    }

    /// Logits, carrying whatever parameter tangents the input carries.
    pub fn forward(&self, input: &SecondOrder<Var<'t>>) -> Result<SecondOrder<Var<'t>>, NnError> {
        if !input.value().with_value(Tensor::all_finite) {
            return Err(NnError::NonFiniteInput);
        }
        let last = self.weights.len() - 1;
        let mut h = *input;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.matmul(*w).add_const(*b);
            if l < last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Tempered softmax of the logits.
    pub fn probabilities(&self, input: &SecondOrder<Var<'t>>) -> Result<SecondOrder<Var<'t>>, NnError> {
        Ok(self.forward(input)?.softmax(self.tau))
    }

    /// Mean negative log-probability of the true class. Output 0 is the
    /// signal class, output 1 background.
    pub fn cross_entropy(&self, batch: &[Observation], labels: &[Label]) -> Result<Var<'t>, NnError> {
        assert_eq!(batch.len(), labels.len(), "labels per observation");
        let tape = self.weights[0].tape();
        let input = synthgen::constant_input(tape, batch, 0)?;
        let logits = self.forward(&input)?.value();
        let k = logits.shape().1;
        let mut onehot = Tensor::zeros(batch.len(), k);
        for (r, l) in labels.iter().enumerate() {
            onehot.set(r, class_index(*l), 1.0);
        }
        let picked = (logits.log_softmax(self.tau) * tape.constant(onehot)).sum();
        Ok(picked.scale(-1.0 / batch.len().max(1) as f64))
    }
}

pub fn class_index(label: Label) -> usize {
    match label {
        Label::Signal => 0,
        Label::Background => 1,
    }
}

/// `exp(l_i / tau) / sum_j exp(l_j / tau)`, computed with max subtraction.
pub fn softmax_probs(logits: &[f64], tau: f64) -> Result<Vec<f64>, NnError> {
    if !(tau > 0.0) {
        return Err(NnError::NonPositiveTemperature(tau));
    }
    let m = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / tau));
    let e: Vec<f64> = logits.iter().map(|&v| (v / tau - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// Cross-entropy of given class probabilities, for checks outside a tape.
pub fn cross_entropy_value(probs: &Tensor, labels: &[Label]) -> f64 {
    let n = labels.len().max(1) as f64;
    labels.iter().enumerate().map(|(r, l)| -probs.get(r, class_index(*l)).ln()).sum::<f64>() / n
}

#[cfg(test)]
mod tests;
