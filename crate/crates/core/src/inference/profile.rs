//! Profile likelihood in the signal yield and ΔNLL interval extraction.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::InferenceError;
use crate::autodiff::{invert_small_matrix, SecondOrder, SmallMatrix};
use crate::statmodel::{BenchmarkSpec, Param, ThetaPoint};

/// Negative log-likelihood as a function of θ, without constraint terms.
pub trait ProfileObjective: Sync {
    /// Value plus first and second derivatives along `dirs`.
    fn evaluate(&self, theta: &ThetaPoint, dirs: &[Param]) -> Result<SecondOrder<f64>, InferenceError>;

    fn value(&self, theta: &ThetaPoint) -> Result<f64, InferenceError> {
        Ok(self.evaluate(theta, &[])?.value())
    }
}

const LOWER_BOUND: f64 = 1e-3;
const MAX_NEWTON: usize = 60;
const MAX_FAILED_NEWTON: usize = 3;

fn lower_bound(p: Param) -> f64 {
    match p {
        Param::R => f64::NEG_INFINITY,
        Param::S => 0.0,
        Param::Lambda | Param::B => LOWER_BOUND,
    }
}

/// Objective plus the benchmark's Gaussian constraint terms.
pub fn constrained_nll(
    obj: &dyn ProfileObjective,
    spec: &BenchmarkSpec,
    theta: &ThetaPoint,
    dirs: &[Param],
) -> Result<SecondOrder<f64>, InferenceError> {
    let mut out = obj.evaluate(theta, dirs)?;
    for c in &spec.constraints {
        let z = SecondOrder::constant(theta.get(c.param), dirs.len())?;
        let z = match dirs.iter().position(|&p| p == c.param) {
            Some(d) => SecondOrder::variable(theta.get(c.param), d, dirs.len())?,
            None => z,
        };
        let z = z.offset(-c.mean).scale(1.0 / c.width);
        out = out.add(&z.mul(&z).scale(0.5));
    }
    Ok(out)
}

fn constrained_value(obj: &dyn ProfileObjective, spec: &BenchmarkSpec, theta: &ThetaPoint) -> Result<f64, InferenceError> {
    Ok(constrained_nll(obj, spec, theta, &[])?.value())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimizerOutcome {
    pub theta: ThetaPoint,
    pub nll: f64,
    pub converged: bool,
    pub iterations: usize,
    pub used_fallback: bool,
}

/// Minimise over the benchmark's free nuisance parameters at fixed `s`.
///
/// Box-bounded Newton with backtracking, started from `start`; after three
/// steps that fail to decrease the objective, golden-section coordinate
/// descent takes over.
pub fn minimize_nuisances(
    obj: &dyn ProfileObjective,
    spec: &BenchmarkSpec,
    s: f64,
    start: &ThetaPoint,
) -> Result<MinimizerOutcome, InferenceError> {
    let nuis: Vec<Param> = spec.free.iter().copied().filter(|&p| p != Param::S).collect();
    let mut theta = start.with(Param::S, s);
    for &p in &nuis {
        theta.set(p, theta.get(p).max(lower_bound(p)));
    }
    if nuis.is_empty() {
        let nll = constrained_value(obj, spec, &theta)?;
        return Ok(MinimizerOutcome { theta, nll, converged: nll.is_finite(), iterations: 0, used_fallback: false });
    }
    let k = nuis.len();
    let mut failed = 0;
    let mut iterations = 0;
    while iterations < MAX_NEWTON {
        iterations += 1;
        let so = constrained_nll(obj, spec, &theta, &nuis)?;
        let f = so.value();
        let g: Vec<f64> = (0..k).map(|i| so.derivative(i).unwrap_or(0.0)).collect();
        let h = SmallMatrix::from_fn(k, |i, j| so.second(i, j).unwrap_or(0.0));
        let inv = if positive_definite(&h) { invert_small_matrix(&h).ok() } else { None };
        let Some(inv) = inv else {
            failed += 1;
            if failed >= MAX_FAILED_NEWTON {
                break;
            }
            continue;
        };
        let step: Vec<f64> = (0..k).map(|i| -(0..k).map(|j| inv.matrix.get(i, j) * g[j]).sum::<f64>()).collect();
        let slope: f64 = g.iter().zip(&step).map(|(a, b)| a * b).sum();
        // Newton decrement, in units of the objective
        if -slope / 2.0 < 1e-10 && slope <= 0.0 {
            return Ok(MinimizerOutcome { theta, nll: f, converged: true, iterations, used_fallback: false });
        }
        if slope >= 0.0 || !slope.is_finite() {
            failed += 1;
            if failed >= MAX_FAILED_NEWTON {
                break;
            }
            continue;
        }
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut trial = theta;
            for (i, &p) in nuis.iter().enumerate() {
                trial.set(p, (theta.get(p) + alpha * step[i]).max(lower_bound(p)));
            }
            let ft = constrained_value(obj, spec, &trial)?;
            if ft.is_finite() && ft <= f + 1e-4 * alpha * slope {
                theta = trial;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            failed += 1;
            if failed >= MAX_FAILED_NEWTON {
                break;
            }
        }
    }
    let (theta, nll, converged) = golden_coordinate_descent(obj, spec, &nuis, theta)?;
    Ok(MinimizerOutcome { theta, nll, converged, iterations, used_fallback: true })
}

fn positive_definite(h: &SmallMatrix<f64>) -> bool {
    let n = h.size();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut v = h.get(i, j);
            for k in 0..j {
                v -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(v > 0.0) {
                    return false;
                }
                l[i][i] = v.sqrt();
            } else {
                l[i][j] = v / l[j][j];
            }
        }
    }
    true
}

fn golden_coordinate_descent(
    obj: &dyn ProfileObjective,
    spec: &BenchmarkSpec,
    nuis: &[Param],
    mut theta: ThetaPoint,
) -> Result<(ThetaPoint, f64, bool), InferenceError> {
    let scale = |p: Param| match p {
        Param::R => 1.0,
        Param::Lambda => 1.0,
        Param::B => 100.0,
        Param::S => 10.0,
    };
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut f = constrained_value(obj, spec, &theta)?;
    for _round in 0..30 {
        let before = f;
        for &p in nuis {
            let x0 = theta.get(p);
            let (mut a, mut b) = ((x0 - scale(p)).max(lower_bound(p)), x0 + scale(p));
            let eval = |x: f64| constrained_value(obj, spec, &theta.with(p, x));
            let mut c = b - inv_phi * (b - a);
            let mut d = a + inv_phi * (b - a);
            let (mut fc, mut fd) = (eval(c)?, eval(d)?);
            for _ in 0..80 {
                if fc < fd {
                    b = d;
                    d = c;
                    fd = fc;
                    c = b - inv_phi * (b - a);
                    fc = eval(c)?;
                } else {
                    a = c;
                    c = d;
                    fc = fd;
                    d = a + inv_phi * (b - a);
                    fd = eval(d)?;
                }
                if (b - a).abs() < 1e-10 * scale(p) {
                    break;
                }
            }
            let x = 0.5 * (a + b);
            let fx = eval(x)?;
            if fx < f {
                theta.set(p, x);
                f = fx;
            }
        }
        if (before - f).abs() <= 1e-12 * f.abs().max(1.0) {
            return Ok((theta, f, f.is_finite()));
        }
    }
    Ok((theta, f, false))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub s: f64,
    pub nll: f64,
    pub converged: bool,
    pub nuisances: ThetaPoint,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfileCurve {
    /// Sorted by `s`.
    pub points: Vec<ProfilePoint>,
}

impl ProfileCurve {
    /// Curve from a closed-form function, for testing the interval logic.
    pub fn from_fn(grid: &[f64], f: impl Fn(f64) -> f64) -> Self {
        let points = grid
            .iter()
            .map(|&s| ProfilePoint { s, nll: f(s), converged: true, nuisances: ThetaPoint::NOMINAL.with(Param::S, s) })
            .collect();
        Self { points }
    }

    fn usable(&self) -> Vec<(f64, f64)> {
        self.points.iter().filter(|p| p.converged && p.nll.is_finite()).map(|p| (p.s, p.nll)).collect()
    }

    pub fn minimum(&self) -> Option<ProfilePoint> {
        self.points.iter().filter(|p| p.converged && p.nll.is_finite()).min_by(|a, b| a.nll.total_cmp(&b.nll)).copied()
    }

    pub fn failed_points(&self) -> usize {
        self.points.iter().filter(|p| !p.converged).count()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(out);
        writeln!(w, "s,nll,delta_nll,converged")?;
        let min = self.minimum().map(|p| p.nll).unwrap_or(f64::NAN);
        for p in &self.points {
            writeln!(w, "{},{},{},{}", p.s, p.nll, p.nll - min, p.converged)?;
        }
        w.flush()
    }
}

/// Evenly spaced grid over `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for SGrid {
    fn default() -> Self {
        Self { lo: 10.0, hi: 90.0, step: 0.5 }
    }
}

impl SGrid {
    pub fn values(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| self.lo + i as f64 * self.step).collect()
    }
}

/// Profile over `grid`, warm-starting outward from the grid point nearest
/// the true signal yield.
pub fn profile_nll(
    obj: &dyn ProfileObjective,
    spec: &BenchmarkSpec,
    grid: &[f64],
    truth: &ThetaPoint,
) -> Result<ProfileCurve, InferenceError> {
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    if grid.is_empty() {
        return Ok(ProfileCurve::default());
    }
    let centre = grid
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - truth.s).abs().total_cmp(&(b.1 - truth.s).abs()))
        .map(|(i, _)| i)
        .expect("non-empty grid");
    let mut points = vec![None; grid.len()];
    let mut run = |indices: &mut dyn Iterator<Item = usize>| -> Result<(), InferenceError> {
        let mut start = *truth;
        for i in indices {
            let out = minimize_nuisances(obj, spec, grid[i], &start)?;
            if out.converged {
                start = out.theta;
            }
            points[i] = Some(ProfilePoint { s: grid[i], nll: out.nll, converged: out.converged, nuisances: out.theta });
        }
        Ok(())
    };
    run(&mut (centre..grid.len()))?;
    run(&mut (0..centre).rev())?;
    Ok(ProfileCurve { points: points.into_iter().map(|p| p.expect("every grid point visited")).collect() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalResult {
    pub lower: f64,
    pub upper: f64,
    pub width: f64,
    pub s_min: f64,
    pub delta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Lower,
    Upper,
}

/// Fritsch–Carlson slopes for a monotone piecewise cubic through the data.
fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    let mut d = vec![0.0; n];
    if n == 2 {
        d[0] = delta[0];
        d[1] = delta[0];
        return d;
    }
    for i in 1..n - 1 {
        if delta[i - 1] * delta[i] > 0.0 {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
        }
    }
    let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
        let v = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if v.signum() != d0.signum() {
            0.0
        } else if d0.signum() != d1.signum() && v.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            v
        }
    };
    d[0] = end(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = end(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}

fn hermite(x0: f64, x1: f64, y0: f64, y1: f64, d0: f64, d1: f64, x: f64) -> f64 {
    let h = x1 - x0;
    let t = (x - x0) / h;
    let (t2, t3) = (t * t, t * t * t);
    (2.0 * t3 - 3.0 * t2 + 1.0) * y0 + (t3 - 2.0 * t2 + t) * h * d0 + (-2.0 * t3 + 3.0 * t2) * y1 + (t3 - t2) * h * d1
}

/// Vertex of the parabola through the lowest point and its neighbours,
/// kept within the neighbouring grid points.
fn refine_minimum(x: &[f64], y: &[f64], i: usize) -> (f64, f64) {
    if i == 0 || i + 1 >= x.len() {
        return (x[i], y[i]);
    }
    let (x0, x1, x2) = (x[i - 1], x[i], x[i + 1]);
    let (y0, y1, y2) = (y[i - 1], y[i], y[i + 1]);
    let d01 = (y1 - y0) / (x1 - x0);
    let d12 = (y2 - y1) / (x2 - x1);
    let a = (d12 - d01) / (x2 - x0);
    if !(a > 0.0) {
        return (x1, y1);
    }
    let v = (0.5 * (x0 + x1) - d01 / (2.0 * a)).clamp(x0, x2);
    let yv = y0 + d01 * (v - x0) + a * (v - x0) * (v - x1);
    (v, yv.min(y1))
}

/// Crossings of `min + delta`, located on a monotone cubic interpolant of
/// the converged points; width is `s⁺ − s⁻`.
pub fn interval_width(curve: &ProfileCurve, delta: f64) -> Result<IntervalResult, InferenceError> {
    let pts = curve.usable();
    if pts.len() < 3 {
        return Err(InferenceError::Unbounded(Side::Lower));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    let d = pchip_slopes(&x, &y);
    let imin = (0..y.len()).min_by(|&a, &b| y[a].total_cmp(&y[b])).expect("non-empty");
    let (s_min, y_min) = refine_minimum(&x, &y, imin);
    let target = y_min + delta;
    let root = |i: usize, j: usize| {
        // the interpolant is monotone between i and j with target bracketed
        let (mut a, mut b) = (x[i], x[j]);
        let f = |s: f64| hermite(x[i], x[j], y[i], y[j], d[i], d[j], s) - target;
        let rising = f(b) > f(a);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if (f(m) < 0.0) == rising {
                a = m;
            } else {
                b = m;
            }
        }
        0.5 * (a + b)
    };
    let upper = (imin + 1..x.len()).find(|&j| y[j] >= target).map(|j| root(j - 1, j)).ok_or(InferenceError::Unbounded(Side::Upper))?;
    let lower = (0..imin).rev().find(|&j| y[j] >= target).map(|j| root(j, j + 1)).ok_or(InferenceError::Unbounded(Side::Lower))?;
    Ok(IntervalResult { lower, upper, width: upper - lower, s_min, delta })
}

/// Profile on `grid`, widening it up to seven times when a crossing is not
/// bracketed.
pub fn profile_interval(
    obj: &dyn ProfileObjective,
    spec: &BenchmarkSpec,
    truth: &ThetaPoint,
    grid: SGrid,
    delta: f64,
) -> Result<(ProfileCurve, IntervalResult), InferenceError> {
    let mut grid = grid;
    let mut last_err = None;
    for _ in 0..8 {
        let curve = profile_nll(obj, spec, &grid.values(), truth)?;
        match interval_width(&curve, delta) {
            Ok(iv) => return Ok((curve, iv)),
            Err(InferenceError::Unbounded(side)) => {
                let extend = (grid.hi - grid.lo).max(20.0);
                // weak statistics can need s < 0; the expected counts stay
                // positive there while the background dominates every bin
                match side {
                    Side::Lower => grid.lo -= extend,
                    Side::Upper => grid.hi += extend,
                }
                last_err = Some(InferenceError::Unbounded(side));
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("loop ran"))
}
