//! Closed-form ground truth for the synthetic mixture: densities, the
//! Bayes-optimal classifier, the extended likelihood and its expected
//! Fisher information.

pub mod quadrature;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{invert_small_matrix, AdError, SecondOrder, SmallMatrix};
use crate::exec::Execution;
use crate::inference::{InferenceError, ProfileObjective};
use crate::statmodel::{BenchmarkSpec, Param, ThetaPoint};
use crate::synthgen::{
    mixture_sample, GenError, Observation, BACKGROUND_MEAN, BACKGROUND_VARIANCE, SIGNAL_MEAN, SIGNAL_RATE,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("exponential rate must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("both densities vanish at {0:?}")]
    UndefinedRatio([f64; 3]),
    #[error("invalid yields s={s}, b={b}")]
    InvalidYields { s: f64, b: f64 },
    #[error("mixture density vanishes at {0:?}")]
    ZeroLikelihood([f64; 3]),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("singular Fisher information: {0}")]
    Singular(#[from] AdError),
    #[error(transparent)]
    Generator(#[from] GenError),
}

fn ln_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (x - mean) * (x - mean) / var - 0.5 * (2.0 * PI * var).ln()
}

pub fn ln_signal_density(x: &Observation) -> f64 {
    if x.x2 < 0.0 {
        return f64::NEG_INFINITY;
    }
    ln_normal(x.x0, SIGNAL_MEAN[0], 1.0) + ln_normal(x.x1, SIGNAL_MEAN[1], 1.0) + SIGNAL_RATE.ln() - SIGNAL_RATE * x.x2
}

pub fn ln_background_density(x: &Observation, r: f64, lambda: f64) -> Result<f64, OracleError> {
    if !(lambda > 0.0) {
        return Err(OracleError::NonPositiveRate(lambda));
    }
    if x.x2 < 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(ln_normal(x.x0, BACKGROUND_MEAN[0] + r, BACKGROUND_VARIANCE[0])
        + ln_normal(x.x1, BACKGROUND_MEAN[1], BACKGROUND_VARIANCE[1])
        + lambda.ln()
        - lambda * x.x2)
}

pub fn signal_density(x: &Observation) -> f64 {
    ln_signal_density(x).exp()
}

pub fn background_density(x: &Observation, r: f64, lambda: f64) -> Result<f64, OracleError> {
    Ok(ln_background_density(x, r, lambda)?.exp())
}

/// `f_s / f_b`; infinite where the background vanishes.
pub fn density_ratio(x: &Observation, r: f64, lambda: f64) -> Result<f64, OracleError> {
    let ls = ln_signal_density(x);
    let lb = ln_background_density(x, r, lambda)?;
    if ls == f64::NEG_INFINITY && lb == f64::NEG_INFINITY {
        return Err(OracleError::UndefinedRatio(x.as_array()));
    }
    Ok((ls - lb).exp())
}

/// `f_s / (f_s + f_b)`, evaluated as a logistic of the log ratio.
pub fn optimal_classifier(x: &Observation, r: f64, lambda: f64) -> Result<f64, OracleError> {
    let ls = ln_signal_density(x);
    let lb = ln_background_density(x, r, lambda)?;
    if ls == f64::NEG_INFINITY && lb == f64::NEG_INFINITY {
        return Err(OracleError::UndefinedRatio(x.as_array()));
    }
    Ok(1.0 / (1.0 + (lb - ls).exp()))
}

/// Normalised mixture `p(x) = (s f_s + b f_b) / (s + b)`.
pub fn mixture_density(x: &Observation, theta: &ThetaPoint) -> Result<f64, OracleError> {
    check_yields(theta)?;
    let nu = theta.s * signal_density(x) + theta.b * background_density(x, theta.r, theta.lambda)?;
    Ok(nu / (theta.s + theta.b))
}

fn check_yields(theta: &ThetaPoint) -> Result<(), OracleError> {
    if !(theta.s >= 0.0 && theta.b > 0.0) {
        return Err(OracleError::InvalidYields { s: theta.s, b: theta.b });
    }
    if !(theta.lambda > 0.0) {
        return Err(OracleError::NonPositiveRate(theta.lambda));
    }
    Ok(())
}

/// Negative log of the extended likelihood, without the `ln n!` term:
/// `(s + b) − Σ ln(s f_s(x) + b f_b(x))`.
pub fn extended_nll(data: &[Observation], theta: &ThetaPoint) -> Result<f64, OracleError> {
    check_yields(theta)?;
    let mut nll = theta.s + theta.b;
    for x in data {
        let nu = theta.s * signal_density(x) + theta.b * background_density(x, theta.r, theta.lambda)?;
        if !(nu > 0.0) {
            return Err(OracleError::ZeroLikelihood(x.as_array()));
        }
        nll -= nu.ln();
    }
    Ok(nll)
}

/// `ln(s f_s + b f_b)` with derivatives along `dirs`.
pub fn ln_intensity(x: &Observation, theta: &ThetaPoint, dirs: &[Param]) -> Result<SecondOrder<f64>, OracleError> {
    check_yields(theta)?;
    let dims = dirs.len();
    let var = |p: Param| -> Result<SecondOrder<f64>, AdError> {
        match dirs.iter().position(|&d| d == p) {
            Some(i) => SecondOrder::variable(theta.get(p), i, dims),
            None => SecondOrder::constant(theta.get(p), dims),
        }
    };
    let (s, r, lambda, b) = (var(Param::S)?, var(Param::R)?, var(Param::Lambda)?, var(Param::B)?);
    let d0 = r.offset(BACKGROUND_MEAN[0]).neg().offset(x.x0);
    let ln_fb = d0
        .mul(&d0)
        .scale(-0.5 / BACKGROUND_VARIANCE[0])
        .offset(ln_normal(x.x1, BACKGROUND_MEAN[1], BACKGROUND_VARIANCE[1]) - 0.5 * (2.0 * PI * BACKGROUND_VARIANCE[0]).ln())
        .add(&lambda.ln())
        .sub(&lambda.scale(x.x2));
    let nu = s.scale(signal_density(x)).add(&b.mul(&ln_fb.exp()));
    if !(nu.value() > 0.0) {
        return Err(OracleError::ZeroLikelihood(x.as_array()));
    }
    Ok(nu.ln())
}

/// Gradient of `ln(s f_s + b f_b)` in the order of `Param::ALL`.
pub fn score(x: &Observation, theta: &ThetaPoint) -> Result<[f64; 4], OracleError> {
    let fs = signal_density(x);
    let fb = background_density(x, theta.r, theta.lambda)?;
    let nu = theta.s * fs + theta.b * fb;
    if !(nu > 0.0) {
        return Err(OracleError::ZeroLikelihood(x.as_array()));
    }
    let a = (x.x0 - BACKGROUND_MEAN[0] - theta.r) / BACKGROUND_VARIANCE[0];
    let c = 1.0 / theta.lambda - x.x2;
    let bf = theta.b * fb / nu;
    Ok([fs / nu, bf * a, bf * c, fb / nu])
}

/// Expected Fisher information of the extended likelihood, restricted to the
/// benchmark's free parameters, plus constraint curvatures:
/// `(s + b) · E[∂ ln ν ∂ ln νᵀ]` estimated from `samples`.
pub fn fisher_from_samples(samples: &[Observation], theta: &ThetaPoint, spec: &BenchmarkSpec) -> Result<Vec<Vec<f64>>, OracleError> {
    let idx: Vec<usize> = spec.free.iter().map(|p| Param::ALL.iter().position(|q| q == p).expect("known parameter")).collect();
    let k = idx.len();
    let mut acc = vec![vec![0.0; k]; k];
    for x in samples {
        let g = score(x, theta)?;
        for i in 0..k {
            for j in 0..=i {
                acc[i][j] += g[idx[i]] * g[idx[j]];
            }
        }
    }
    let n = samples.len().max(1) as f64;
    let total = theta.s + theta.b;
    let mut info = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..=i {
            info[i][j] = total * acc[i][j] / n;
            info[j][i] = info[i][j];
        }
    }
    for c in &spec.constraints {
        let d = spec.free.iter().position(|&p| p == c.param).expect("constraints apply to free parameters");
        info[d][d] += 1.0 / (c.width * c.width);
    }
    Ok(info)
}

/// Full width `2·sqrt([I⁻¹]_ss)` of the ΔNLL = 0.5 interval for a
/// quadratic likelihood with information `info`.
pub fn width_from_fisher(info: &[Vec<f64>]) -> Result<f64, OracleError> {
    let m = SmallMatrix::from_fn(info.len(), |i, j| info[i][j]);
    let inv = invert_small_matrix(&m)?;
    Ok(2.0 * inv.matrix.get(0, 0).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticResult {
    pub benchmark: u8,
    pub width: f64,
    pub standard_error: f64,
    pub samples: usize,
    pub fisher: Vec<Vec<f64>>,
}

pub const ANALYTIC_BATCHES: usize = 20;

/// Expected width for the extended likelihood at `theta`, with the Monte
/// Carlo standard error estimated from the spread of batch-wise widths.
pub fn analytic_expected_uncertainty(
    spec: &BenchmarkSpec,
    theta: &ThetaPoint,
    samples: usize,
    seed: u64,
) -> Result<AnalyticResult, OracleError> {
    let sample = mixture_sample(Some(samples), theta.s, theta.b, theta.r, theta.lambda, seed)?;
    analytic_from_sample(spec, theta, &sample.observations)
}

pub fn analytic_from_sample(spec: &BenchmarkSpec, theta: &ThetaPoint, sample: &[Observation]) -> Result<AnalyticResult, OracleError> {
    if sample.len() < ANALYTIC_BATCHES * 10 {
        return Err(OracleError::TooFewSamples { need: ANALYTIC_BATCHES * 10, got: sample.len() });
    }
    let chunk = sample.len().div_ceil(ANALYTIC_BATCHES);
    let per_batch: Vec<Result<Vec<Vec<f64>>, OracleError>> =
        Execution::default().map_chunks(sample, chunk, |c| fisher_from_samples(c, theta, spec));
    let mut batch_widths = Vec::with_capacity(per_batch.len());
    for f in &per_batch {
        batch_widths.push(width_from_fisher(f.as_ref().map_err(Clone::clone)?)?);
    }
    let fisher = fisher_from_samples(sample, theta, spec)?;
    let width = width_from_fisher(&fisher)?;
    let m = batch_widths.len() as f64;
    let mean = batch_widths.iter().sum::<f64>() / m;
    let var = batch_widths.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / (m - 1.0);
    Ok(AnalyticResult { benchmark: spec.id, width, standard_error: (var / m).sqrt(), samples: sample.len(), fisher })
}

/// Unbinned Asimov objective: the extended NLL with the data replaced by its
/// expectation at `truth`, estimated over a sample drawn at `truth`:
/// `(s + b) − (s_t + b_t) · mean ln ν_θ(x)`.
pub struct UnbinnedAsimov {
    sample: Vec<Observation>,
    truth_total: f64,
    exec: Execution,
}

impl UnbinnedAsimov {
    pub fn new(truth: &ThetaPoint, samples: usize, seed: u64) -> Result<Self, OracleError> {
        let sample = mixture_sample(Some(samples), truth.s, truth.b, truth.r, truth.lambda, seed)?;
        Ok(Self { sample: sample.observations, truth_total: truth.s + truth.b, exec: Execution::default() })
    }
}

impl ProfileObjective for UnbinnedAsimov {
    fn evaluate(&self, theta: &ThetaPoint, dirs: &[Param]) -> Result<SecondOrder<f64>, InferenceError> {
        let dims = dirs.len();
        let partial: Vec<Result<SecondOrder<f64>, OracleError>> = self.exec.map_chunks(&self.sample, 8192, |c| {
            let mut acc = SecondOrder::constant(0.0, dims)?;
            for x in c {
                acc = acc.add(&ln_intensity(x, theta, dirs)?);
            }
            Ok(acc)
        });
        let mut sum = SecondOrder::constant(0.0, dims)?;
        for p in partial {
            sum = sum.add(&p.map_err(|e| InferenceError::Oracle(e.to_string()))?);
        }
        let var = |p: Param| match dirs.iter().position(|&d| d == p) {
            Some(i) => SecondOrder::variable(theta.get(p), i, dims),
            None => SecondOrder::constant(theta.get(p), dims),
        };
        let total = var(Param::S)?.add(&var(Param::B)?);
        Ok(total.sub(&sum.scale(self.truth_total / self.sample.len() as f64)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyReport {
    pub mu: f64,
    pub max_residual: f64,
    pub tested: usize,
    /// Points where the background density vanishes (`t = 1`).
    pub excluded: usize,
}

/// Largest `|p(x|μ) − f_b(x)·(1 − μ + μ·t/(1 − t))|` with
/// `t = f_s / (f_s + f_b)`, which should vanish identically.
pub fn sufficiency_residual(points: &[Observation], mu: f64, r: f64, lambda: f64) -> Result<SufficiencyReport, OracleError> {
    let mut max_residual: f64 = 0.0;
    let (mut tested, mut excluded) = (0, 0);
    for x in points {
        let fs = signal_density(x);
        let fb = background_density(x, r, lambda)?;
        let t = optimal_classifier(x, r, lambda)?;
        if t >= 1.0 || fb == 0.0 {
            excluded += 1;
            continue;
        }
        let mixture = (1.0 - mu) * fb + mu * fs;
        let factorised = fb * (1.0 - mu + mu * t / (1.0 - t));
        max_residual = max_residual.max((mixture - factorised).abs());
        tested += 1;
    }
    Ok(SufficiencyReport { mu, max_residual, tested, excluded })
}

/// `∫ f dx` for the signal and background densities by 64-point
/// tensor-product Gauss–Hermite × Gauss–Laguerre quadrature.
pub fn quadrature_normalisation(r: f64, lambda: f64) -> Result<(f64, f64), OracleError> {
    if !(lambda > 0.0) {
        return Err(OracleError::NonPositiveRate(lambda));
    }
    let (hx, hw) = quadrature::gauss_hermite(64);
    let (lx, lw) = quadrature::gauss_laguerre(64);
    let integrate = |means: [f64; 2], vars: [f64; 2], rate: f64, f: &dyn Fn(&Observation) -> Result<f64, OracleError>| {
        let (s0, s1) = ((2.0 * vars[0]).sqrt(), (2.0 * vars[1]).sqrt());
        let mut total = 0.0;
        for (u, wu) in hx.iter().zip(&hw) {
            for (v, wv) in hx.iter().zip(&hw) {
                for (t, wt) in lx.iter().zip(&lw) {
                    let x = Observation::new(means[0] + s0 * u, means[1] + s1 * v, t / rate);
                    let jac = s0 * s1 / rate * (u * u + v * v + t).exp();
                    total += wu * wv * wt * jac * f(&x)?;
                }
            }
        }
        Ok::<f64, OracleError>(total)
    };
    let sig = integrate(SIGNAL_MEAN, [1.0, 1.0], SIGNAL_RATE, &|x| Ok(signal_density(x)))?;
    let bkg = integrate(
        [BACKGROUND_MEAN[0] + r, BACKGROUND_MEAN[1]],
        BACKGROUND_VARIANCE,
        lambda,
        &|x| background_density(x, r, lambda),
    )?;
    Ok((sig, bkg))
}

#[cfg(test)]
mod tests;
