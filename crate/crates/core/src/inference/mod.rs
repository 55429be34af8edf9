//! Expected uncertainties for a fixed summary statistic: binned Asimov
//! likelihoods on held-out samples, nuisance profiling, interval widths,
//! benchmark tables and robustness scans.

mod profile;
mod table;

pub use profile::{
    constrained_nll, interval_width, minimize_nuisances, profile_interval, profile_nll, IntervalResult,
    MinimizerOutcome, ProfileCurve, ProfileObjective, ProfilePoint, SGrid, Side,
};
pub use table::{
    benchmark_table, percentile, robustness_scan, write_scan_csv, BenchmarkTable, ScanPoint, TableRow, WidthSummary,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{invert_small_matrix, AdError, SecondOrder, SmallMatrix};
use crate::exec::Execution;
use crate::nn::{ModelFile, ModelFileError, ModelKind, NetworkParams, NnError};
use crate::oracle::{self, OracleError};
use crate::statmodel::{hard_assignments, BenchmarkSpec, Param, StatError, ThetaPoint, EXPECTATION_FLOOR};
use crate::synthgen::{Label, LabeledDataset, Observation, BACKGROUND_MEAN, BACKGROUND_VARIANCE};

pub const DEFAULT_DELTA: f64 = 0.5;
pub const CLASSIFIER_BINS: usize = 10;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("no ΔNLL crossing on the {0:?} side of the minimum")]
    Unbounded(Side),
    #[error("empty evaluation sample for the {0}")]
    EmptySample(&'static str),
    #[error("invalid parameter point {0:?}")]
    InvalidTheta(ThetaPoint),
    #[error("oracle: {0}")]
    Oracle(String),
    #[error(transparent)]
    Stat(#[from] StatError),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Model(#[from] ModelFileError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

impl From<OracleError> for InferenceError {
    fn from(e: OracleError) -> Self {
        InferenceError::Oracle(e.to_string())
    }
}

/// A hard-binned summary statistic.
#[derive(Clone, Debug, PartialEq)]
pub enum Statistic {
    /// Bin = argmax of the network outputs.
    Argmax(NetworkParams),
    /// Uniform bins on the network's signal probability.
    SignalProbability { params: NetworkParams, bins: usize },
    /// Uniform bins on the Bayes-optimal classifier at fixed nuisances.
    Optimal { r: f64, lambda: f64, bins: usize },
}

/// Uniform bin of a probability on `[0, 1]`; exactly 1 falls in the top bin.
pub fn probability_bin(p: f64, bins: usize) -> usize {
    ((p.max(0.0) * bins as f64).floor() as usize).min(bins - 1)
}

impl Statistic {
    pub fn from_model(model: &ModelFile) -> Result<Self, InferenceError> {
        let params = model.params()?;
        Ok(match model.kind {
            ModelKind::Inferno => Statistic::Argmax(params),
            ModelKind::Classifier => Statistic::SignalProbability { params, bins: CLASSIFIER_BINS },
        })
    }

    pub fn optimal() -> Self {
        Statistic::Optimal { r: 0.0, lambda: crate::synthgen::LAMBDA0, bins: CLASSIFIER_BINS }
    }

    pub fn bins(&self) -> usize {
        match self {
            Statistic::Argmax(p) => p.outputs(),
            Statistic::SignalProbability { bins, .. } | Statistic::Optimal { bins, .. } => *bins,
        }
    }

    pub fn descriptor(&self) -> String {
        match self {
            Statistic::Argmax(p) => format!("argmax-{}", p.outputs()),
            Statistic::SignalProbability { bins, .. } => format!("classifier-{bins}"),
            Statistic::Optimal { bins, .. } => format!("optimal-{bins}"),
        }
    }

    pub fn assign(&self, data: &[Observation], exec: Execution) -> Result<Vec<usize>, InferenceError> {
        match self {
            Statistic::Argmax(p) => Ok(hard_assignments(&p.logits_chunked(data, exec)?)),
            Statistic::SignalProbability { params, bins } => {
                let probs = params.probabilities(data, exec)?;
                Ok((0..probs.rows()).map(|i| probability_bin(probs.get(i, 0), *bins)).collect())
            }
            Statistic::Optimal { r, lambda, bins } => {
                let out: Vec<Result<Vec<usize>, OracleError>> = exec.map_chunks(data, 8192, |c| {
                    c.iter().map(|x| Ok(probability_bin(oracle::optimal_classifier(x, *r, *lambda)?, *bins))).collect()
                });
                let mut all = Vec::with_capacity(data.len());
                for part in out {
                    all.extend(part?);
                }
                Ok(all)
            }
        }
    }
}

/// Held-out samples per component, with the nuisance values the background
/// was generated at.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub signal: Vec<Observation>,
    pub background: Vec<Observation>,
    pub r: f64,
    pub lambda: f64,
}

impl EvalSample {
    pub fn from_dataset(data: &LabeledDataset) -> Self {
        Self { signal: data.of(Label::Signal), background: data.of(Label::Background), r: data.r0, lambda: data.lambda0 }
    }
}

const CHUNK: usize = 16_384;

/// Binned Poisson NLL with the observed counts fixed to their expectation
/// at `truth`. The background histogram at other nuisance values comes from
/// reweighting the evaluation sample by `f_b(x|r,λ) / f_b(x|r_ref,λ_ref)`,
/// self-normalised so each component histogram sums to one.
#[derive(Clone, Debug)]
pub struct BinnedObjective {
    bins: usize,
    signal_fraction: Vec<f64>,
    bkg_bin: Vec<u32>,
    bkg_x0: Vec<f64>,
    bkg_x2: Vec<f64>,
    reference: (f64, f64),
    truth: ThetaPoint,
    observed: Vec<f64>,
    exec: Execution,
}

impl BinnedObjective {
    pub fn new(stat: &Statistic, eval: &EvalSample, truth: ThetaPoint, exec: Execution) -> Result<Self, InferenceError> {
        let sig = stat.assign(&eval.signal, exec)?;
        let bkg = stat.assign(&eval.background, exec)?;
        Self::from_assignments(stat.bins(), &sig, &bkg, eval, truth, exec)
    }

    pub fn from_assignments(
        bins: usize,
        signal_bins: &[usize],
        background_bins: &[usize],
        eval: &EvalSample,
        truth: ThetaPoint,
        exec: Execution,
    ) -> Result<Self, InferenceError> {
        if signal_bins.is_empty() {
            return Err(InferenceError::EmptySample("signal"));
        }
        if background_bins.is_empty() {
            return Err(InferenceError::EmptySample("background"));
        }
        let mut signal_fraction = vec![0.0; bins];
        for &b in signal_bins {
            signal_fraction[b] += 1.0;
        }
        signal_fraction.iter_mut().for_each(|v| *v /= signal_bins.len() as f64);
        let mut out = Self {
            bins,
            signal_fraction,
            bkg_bin: background_bins.iter().map(|&b| b as u32).collect(),
            bkg_x0: eval.background.iter().map(|x| x.x0).collect(),
            bkg_x2: eval.background.iter().map(|x| x.x2).collect(),
            reference: (eval.r, eval.lambda),
            truth,
            observed: Vec::new(),
            exec,
        };
        out = out.with_truth(truth)?;
        Ok(out)
    }

    /// Same statistic and sample, with the Asimov data regenerated at `truth`.
    pub fn with_truth(mut self, truth: ThetaPoint) -> Result<Self, InferenceError> {
        if !truth.is_valid() {
            return Err(InferenceError::InvalidTheta(truth));
        }
        self.observed = self.expected(&truth)?;
        self.truth = truth;
        Ok(self)
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn truth(&self) -> ThetaPoint {
        self.truth
    }

    pub fn observed(&self) -> &[f64] {
        &self.observed
    }

    pub fn signal_fraction(&self) -> &[f64] {
        &self.signal_fraction
    }

    pub fn expected(&self, theta: &ThetaPoint) -> Result<Vec<f64>, InferenceError> {
        Ok(self.expected_so(theta, &[])?.into_iter().map(|m| m.value()).collect())
    }

    /// Per-bin sums of `w`, `w·a`, `w·c`, `w·a²`, `w·c²`, `w·a·c` with
    /// `a = ∂_r ln f_b` and `c = ∂_λ ln f_b`.
    fn moments(&self, r: f64, lambda: f64) -> Vec<[f64; 6]> {
        let (r0, l0) = self.reference;
        let bins = self.bins;
        let n = self.bkg_bin.len();
        let blocks = n.div_ceil(CHUNK);
        let parts = self.exec.map_range(blocks, |blk| {
            let mut m = vec![[0.0; 6]; bins];
            for k in blk * CHUNK..n.min((blk + 1) * CHUNK) {
                let (x0, x2) = (self.bkg_x0[k], self.bkg_x2[k]);
                let d = x0 - BACKGROUND_MEAN[0] - r;
                let d0 = x0 - BACKGROUND_MEAN[0] - r0;
                let lw = -0.5 * (d * d - d0 * d0) / BACKGROUND_VARIANCE[0] + (lambda / l0).ln() - (lambda - l0) * x2;
                let w = lw.exp();
                let a = d / BACKGROUND_VARIANCE[0];
                let c = 1.0 / lambda - x2;
                let e = &mut m[self.bkg_bin[k] as usize];
                e[0] += w;
                e[1] += w * a;
                e[2] += w * c;
                e[3] += w * a * a;
                e[4] += w * c * c;
                e[5] += w * a * c;
            }
            m
        });
        let mut total = vec![[0.0; 6]; bins];
        for p in parts {
            for (t, v) in total.iter_mut().zip(p) {
                for q in 0..6 {
                    t[q] += v[q];
                }
            }
        }
        total
    }

    /// Expected counts with derivatives along `dirs`.
    /// `s` may be negative here, as the profile can need it.
    pub fn expected_so(&self, theta: &ThetaPoint, dirs: &[Param]) -> Result<Vec<SecondOrder<f64>>, InferenceError> {
        if !(theta.s.is_finite() && ThetaPoint { s: 0.0, ..*theta }.is_valid()) {
            return Err(InferenceError::InvalidTheta(*theta));
        }
        let dims = dirs.len();
        let pos = |p: Param| dirs.iter().position(|&d| d == p);
        let var = |p: Param| match pos(p) {
            Some(i) => SecondOrder::variable(theta.get(p), i, dims),
            None => SecondOrder::constant(theta.get(p), dims),
        };
        let (ir, il) = (pos(Param::R), pos(Param::Lambda));
        let m = self.moments(theta.r, theta.lambda);
        let inv_var = 1.0 / BACKGROUND_VARIANCE[0];
        let inv_l2 = 1.0 / (theta.lambda * theta.lambda);
        let mut hist = Vec::with_capacity(self.bins);
        for e in &m {
            let mut grad = Vec::new();
            let mut hess = Vec::new();
            if let Some(i) = ir {
                grad.push((i, e[1]));
                hess.push(((i, i), e[3] - e[0] * inv_var));
            }
            if let Some(j) = il {
                grad.push((j, e[2]));
                hess.push(((j, j), e[4] - e[0] * inv_l2));
            }
            if let (Some(i), Some(j)) = (ir, il) {
                hess.push(((i.min(j), i.max(j)), e[5]));
            }
            hist.push(SecondOrder::from_parts(e[0], dims, grad, hess)?);
        }
        let mut norm = SecondOrder::constant(0.0, dims)?;
        for h in &hist {
            norm = norm.add(h);
        }
        let (s, b) = (var(Param::S)?, var(Param::B)?);
        Ok(hist
            .iter()
            .zip(&self.signal_fraction)
            .map(|(h, &fs)| s.scale(fs).add(&b.mul(&h.div(&norm))))
            .collect())
    }

    /// Quadratic-approximation width `2·sqrt([H⁻¹]_ss)` at the truth.
    pub fn fisher_width(&self, spec: &BenchmarkSpec) -> Result<f64, InferenceError> {
        let nll = constrained_nll(self, spec, &self.truth, &spec.free)?;
        let k = spec.free.len();
        let h = SmallMatrix::from_fn(k, |i, j| nll.second(i, j).unwrap_or(0.0));
        Ok(2.0 * invert_small_matrix(&h)?.matrix.get(0, 0).sqrt())
    }
}

impl ProfileObjective for BinnedObjective {
    fn evaluate(&self, theta: &ThetaPoint, dirs: &[Param]) -> Result<SecondOrder<f64>, InferenceError> {
        let mut nll = SecondOrder::constant(0.0, dirs.len())?;
        for (mu, &n) in self.expected_so(theta, dirs)?.iter().zip(&self.observed) {
            if n <= 0.0 && mu.value() <= 0.0 {
                continue;
            }
            let mu = mu.clamp_min(EXPECTATION_FLOOR);
            nll = nll.add(&mu.sub(&mu.ln().scale(n)));
        }
        Ok(nll)
    }
}

/// Profile curve, interval and quadratic-approximation width of one
/// statistic under one benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub benchmark: u8,
    pub descriptor: String,
    pub interval: IntervalResult,
    pub fisher_width: f64,
    pub curve: ProfileCurve,
    pub failed_points: usize,
}

pub fn evaluate(
    obj: &BinnedObjective,
    spec: &BenchmarkSpec,
    descriptor: &str,
    grid: SGrid,
) -> Result<Evaluation, InferenceError> {
    let truth = obj.truth();
    let (curve, interval) = profile_interval(obj, spec, &truth, grid, DEFAULT_DELTA)?;
    let fisher_width = obj.fisher_width(spec).unwrap_or(f64::NAN);
    Ok(Evaluation {
        benchmark: spec.id,
        descriptor: descriptor.to_string(),
        interval,
        fisher_width,
        failed_points: curve.failed_points(),
        curve,
    })
}

#[cfg(test)]
mod tests;
