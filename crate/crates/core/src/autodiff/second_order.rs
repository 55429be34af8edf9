//! Forward-mode second-order propagation over up to four parameter
//! directions.
//!
//! A [`SecondOrder`] carries a value, its first derivatives and the packed
//! upper triangle of its Hessian with respect to a handful of inference
//! parameters. Every slot is itself a [`Field`] element, so when the slots
//! are tape nodes the Hessian entries stay differentiable with respect to
//! whatever else lives on the tape (the network weights).
//!
//! Slots that are structurally zero are stored as `None` and never
//! materialised, which keeps the cost proportional to the directions that
//! actually reach a quantity.

use super::tape::Var;
use super::AdError;

/// Maximum number of second-order directions.
pub const MAX_DIRECTIONS: usize = 4;
const PACKED: usize = MAX_DIRECTIONS * (MAX_DIRECTIONS + 1) / 2;

/// Arithmetic required of a slot type.
pub trait Field: Copy {
    /// Representative primal value, used for pivoting and conditioning.
    /// For tensors this is the first entry.
    fn primal(&self) -> f64;
    fn add(self, o: Self) -> Self;
    fn sub(self, o: Self) -> Self;
    fn mul(self, o: Self) -> Self;
    fn div(self, o: Self) -> Self;
    fn neg(self) -> Self;
    fn scale(self, c: f64) -> Self;
    fn offset(self, c: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    /// `self * [gate > threshold]` with the indicator treated as constant.
    fn mask_above(self, gate: Self, threshold: f64) -> Self;
    fn clamp_min(self, floor: f64) -> Self;
    /// A constant of the same shape as `self` filled with `c`.
    fn constant_like(self, c: f64) -> Self;
}

impl Field for f64 {
    fn primal(&self) -> f64 {
        *self
    }
    fn add(self, o: Self) -> Self {
        self + o
    }
    fn sub(self, o: Self) -> Self {
        self - o
    }
    fn mul(self, o: Self) -> Self {
        self * o
    }
    fn div(self, o: Self) -> Self {
        self / o
    }
    fn neg(self) -> Self {
        -self
    }
    fn scale(self, c: f64) -> Self {
        self * c
    }
    fn offset(self, c: f64) -> Self {
        self + c
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn mask_above(self, gate: Self, threshold: f64) -> Self {
        if gate > threshold {
            self
        } else {
            0.0
        }
    }
    fn clamp_min(self, floor: f64) -> Self {
        self.max(floor)
    }
    fn constant_like(self, c: f64) -> Self {
        c
    }
}

impl<'t> Field for Var<'t> {
    fn primal(&self) -> f64 {
        self.with_value(|t| t.data()[0])
    }
    fn add(self, o: Self) -> Self {
        self + o
    }
    fn sub(self, o: Self) -> Self {
        self - o
    }
    fn mul(self, o: Self) -> Self {
        self * o
    }
    fn div(self, o: Self) -> Self {
        self / o
    }
    fn neg(self) -> Self {
        -self
    }
    fn scale(self, c: f64) -> Self {
        Var::scale(self, c)
    }
    fn offset(self, c: f64) -> Self {
        Var::offset(self, c)
    }
    fn exp(self) -> Self {
        Var::exp(self)
    }
    fn ln(self) -> Self {
        Var::ln(self)
    }
    fn mask_above(self, gate: Self, threshold: f64) -> Self {
        Var::mask_above(self, gate, threshold)
    }
    fn clamp_min(self, floor: f64) -> Self {
        Var::clamp_min(self, floor)
    }
    fn constant_like(self, c: f64) -> Self {
        let (r, cols) = self.shape();
        self.tape().constant(super::Tensor::filled(r, cols, c))
    }
}

#[inline]
fn packed(i: usize, j: usize) -> usize {
    let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
    hi * (hi + 1) / 2 + lo
}

fn opt_add<T: Field>(a: Option<T>, b: Option<T>) -> Option<T> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.add(b)),
        (a, None) => a,
        (None, b) => b,
    }
}

fn opt_mul<T: Field>(a: Option<T>, b: Option<T>) -> Option<T> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.mul(b)),
        _ => None,
    }
}

/// Value with first and second derivatives over `dims` directions.
#[derive(Clone, Copy, Debug)]
pub struct SecondOrder<T> {
    dims: usize,
    value: T,
    grad: [Option<T>; MAX_DIRECTIONS],
    hess: [Option<T>; PACKED],
}

impl<T: Field> SecondOrder<T> {
    pub fn constant(value: T, dims: usize) -> Result<Self, AdError> {
        if dims > MAX_DIRECTIONS {
            return Err(AdError::TooManyDirections(dims));
        }
        Ok(Self { dims, value, grad: [None; MAX_DIRECTIONS], hess: [None; PACKED] })
    }

    /// Independent variable along direction `dir` (unit tangent).
    pub fn variable(value: T, dir: usize, dims: usize) -> Result<Self, AdError> {
        let mut out = Self::constant(value, dims)?;
        if dir >= dims {
            return Err(AdError::TooManyDirections(dir + 1));
        }
        out.grad[dir] = Some(value.constant_like(1.0));
        Ok(out)
    }

    /// Assemble from explicit slots. `hess` is indexed by `(i, j)` with `i <= j`.
    pub fn from_parts(
        value: T,
        dims: usize,
        grad: impl IntoIterator<Item = (usize, T)>,
        hess: impl IntoIterator<Item = ((usize, usize), T)>,
    ) -> Result<Self, AdError> {
        let mut out = Self::constant(value, dims)?;
        for (i, g) in grad {
            if i >= dims {
                return Err(AdError::TooManyDirections(i + 1));
            }
            out.grad[i] = Some(g);
        }
        for ((i, j), h) in hess {
            if i >= dims || j >= dims {
                return Err(AdError::TooManyDirections(i.max(j) + 1));
            }
            out.hess[packed(i, j)] = Some(h);
        }
        Ok(out)
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn value(&self) -> T {
        self.value
    }

    pub fn derivative(&self, i: usize) -> Option<T> {
        self.grad[i]
    }

    /// `d^2 / d_i d_j`; `second(i, j)` and `second(j, i)` read the same slot.
    pub fn second(&self, i: usize, j: usize) -> Option<T> {
        self.hess[packed(i, j)]
    }

    pub fn has_tangents(&self) -> bool {
        self.grad.iter().chain(self.hess.iter()).any(Option::is_some)
    }

    /// Apply `f` to every populated slot.
    pub fn map<U: Field>(&self, mut f: impl FnMut(T) -> U) -> SecondOrder<U> {
        SecondOrder {
            dims: self.dims,
            value: f(self.value),
            grad: self.grad.map(|g| g.map(&mut f)),
            hess: self.hess.map(|h| h.map(&mut f)),
        }
    }

    fn check_dims(&self, o: &Self) {
        assert_eq!(self.dims, o.dims, "second-order operands with different direction counts");
    }

    pub fn add(&self, o: &Self) -> Self {
        self.check_dims(o);
        let mut out = *self;
        out.value = self.value.add(o.value);
        for i in 0..MAX_DIRECTIONS {
            out.grad[i] = opt_add(self.grad[i], o.grad[i]);
        }
        for i in 0..PACKED {
            out.hess[i] = opt_add(self.hess[i], o.hess[i]);
        }
        out
    }

    pub fn neg(&self) -> Self {
        self.map(Field::neg)
    }

    pub fn sub(&self, o: &Self) -> Self {
        self.add(&o.neg())
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v.scale(c))
    }

    pub fn offset(&self, c: f64) -> Self {
        let mut out = *self;
        out.value = self.value.offset(c);
        out
    }

    /// Multiply every slot by a quantity that does not depend on the
    /// directions.
    pub fn mul_const(&self, c: T) -> Self {
        self.map(|v| v.mul(c))
    }

    pub fn mul(&self, o: &Self) -> Self {
        self.check_dims(o);
        let (a, b) = (self, o);
        let mut out = Self { dims: self.dims, value: a.value.mul(b.value), grad: [None; MAX_DIRECTIONS], hess: [None; PACKED] };
        for i in 0..self.dims {
            out.grad[i] = opt_add(opt_mul(a.grad[i], Some(b.value)), opt_mul(Some(a.value), b.grad[i]));
        }
        for j in 0..self.dims {
            for i in 0..=j {
                let p = packed(i, j);
                let mut h = opt_add(opt_mul(a.hess[p], Some(b.value)), opt_mul(Some(a.value), b.hess[p]));
                h = opt_add(h, opt_mul(a.grad[i], b.grad[j]));
                h = opt_add(h, opt_mul(a.grad[j], b.grad[i]));
                out.hess[p] = h;
            }
        }
        out
    }

    /// Chain rule for a scalar function with value `f`, first derivative
    /// `d1` and second derivative `d2` (`None` when identically zero).
    fn chain(&self, f: T, d1: T, d2: Option<T>) -> Self {
        let mut out = Self { dims: self.dims, value: f, grad: [None; MAX_DIRECTIONS], hess: [None; PACKED] };
        for i in 0..self.dims {
            out.grad[i] = opt_mul(self.grad[i], Some(d1));
        }
        for j in 0..self.dims {
            for i in 0..=j {
                let p = packed(i, j);
                let first = opt_mul(self.hess[p], Some(d1));
                let second = opt_mul(opt_mul(self.grad[i], self.grad[j]), d2);
                out.hess[p] = opt_add(first, second);
            }
        }
        out
    }

    pub fn exp(&self) -> Self {
        let e = self.value.exp();
        self.chain(e, e, Some(e))
    }

    pub fn ln(&self) -> Self {
        let inv = self.value.constant_like(1.0).div(self.value);
        let d2 = inv.mul(inv).neg();
        self.chain(self.value.ln(), inv, Some(d2))
    }

    pub fn recip(&self) -> Self {
        let inv = self.value.constant_like(1.0).div(self.value);
        let inv2 = inv.mul(inv);
        let d1 = inv2.neg();
        let d2 = inv2.mul(inv).scale(2.0);
        self.chain(inv, d1, Some(d2))
    }

    pub fn div(&self, o: &Self) -> Self {
        if !o.has_tangents() {
            return self.map(|v| v.div(o.value));
        }
        self.mul(&o.recip())
    }

    /// `max(x, 0)`; the derivative at exactly zero is 0 and the second
    /// derivative vanishes away from the kink.
    pub fn relu(&self) -> Self {
        let gate = self.value;
        self.map(|v| v.mask_above(gate, 0.0))
    }

    /// `max(x, floor)` with derivatives passed through only where `x > floor`.
    pub fn clamp_min(&self, floor: f64) -> Self {
        let gate = self.value;
        let mut out = self.map(|v| v.mask_above(gate, floor));
        out.value = self.value.clamp_min(floor);
        out
    }
}

impl<T> SecondOrder<T> {
    /// Apply `f` to every populated slot, without arithmetic requirements on
    /// either side. Used to move values between tapes.
    pub fn map_slots<U>(&self, mut f: impl FnMut(&T) -> U) -> SecondOrder<U> {
        SecondOrder {
            dims: self.dims,
            value: f(&self.value),
            grad: std::array::from_fn(|i| self.grad[i].as_ref().map(&mut f)),
            hess: std::array::from_fn(|i| self.hess[i].as_ref().map(&mut f)),
        }
    }
}

impl SecondOrder<super::Tensor> {
    /// Slot-wise `self += other`; a slot missing on one side counts as zero.
    pub fn accumulate(&mut self, other: &Self) {
        assert_eq!(self.dims, other.dims, "second-order operands with different direction counts");
        self.value.axpy(1.0, &other.value);
        let slots = self.grad.iter_mut().zip(&other.grad).chain(self.hess.iter_mut().zip(&other.hess));
        for (mine, theirs) in slots {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.axpy(1.0, t),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }
}

impl<'t> SecondOrder<Var<'t>> {
    /// `self @ w` where `w` carries no direction dependence.
    pub fn matmul(&self, w: Var<'t>) -> Self {
        self.map(|v| v.matmul(w))
    }

    /// Add a direction-independent term (e.g. a bias row) to the value slot.
    pub fn add_const(&self, b: Var<'t>) -> Self {
        let mut out = *self;
        out.value = self.value + b;
        out
    }

    pub fn sum_rows(&self) -> Self {
        self.map(Var::sum_rows)
    }

    pub fn sum(&self) -> Self {
        self.map(Var::sum)
    }

    pub fn element(&self, row: usize, col: usize) -> Self {
        self.map(|v| v.element(row, col))
    }

    /// Row-wise `softmax(self / tau)`.
    pub fn softmax(&self, tau: f64) -> Self {
        if !self.has_tangents() {
            return self.map(|v| v.softmax(tau));
        }
        let shifted = self.value.with_value(|t| {
            let m: Vec<f64> = (0..t.rows())
                .map(|r| t.row_slice(r).iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / tau)))
                .collect();
            super::Tensor::column(m)
        });
        // The max shift is constant in every direction; softmax is invariant to it.
        let shift = self.value.tape().constant(shifted);
        let mut y = self.scale(1.0 / tau);
        y.value = y.value - shift;
        let e = y.exp();
        let total = e.map(Var::sum_cols);
        e.mul(&total.recip())
    }
}

/// Small dense square matrix of [`Field`] elements.
#[derive(Clone, Debug)]
pub struct SmallMatrix<T> {
    n: usize,
    data: Vec<T>,
}

impl<T: Field> SmallMatrix<T> {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j));
            }
        }
        Self { n, data }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.n + j] = v;
    }

    pub fn primal(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| (0..self.n).map(|j| self.get(i, j).primal()).collect()).collect()
    }

    pub fn map<U: Field>(&self, f: impl FnMut(&T) -> U) -> SmallMatrix<U> {
        SmallMatrix { n: self.n, data: self.data.iter().map(f).collect() }
    }
}

/// Full Hessian block of `output` over its directions. Structurally zero
/// entries are materialised as constants.
pub fn hessian_block<T: Field>(output: &SecondOrder<T>) -> Result<SmallMatrix<T>, AdError> {
    let k = output.dims();
    if k > MAX_DIRECTIONS {
        return Err(AdError::TooManyDirections(k));
    }
    let zero = output.value().constant_like(0.0);
    Ok(SmallMatrix::from_fn(k, |i, j| output.second(i, j).unwrap_or(zero)))
}

/// Condition number above which the ridge is applied.
pub const CONDITION_LIMIT: f64 = 1e8;
const RIDGE_FRACTION: f64 = 1e-6;

/// Result of [`invert_small_matrix`].
#[derive(Clone, Debug)]
pub struct Inverse<T> {
    pub matrix: SmallMatrix<T>,
    /// 1-norm condition estimate of the input.
    pub condition: f64,
    /// Set when a ridge had to be added to the diagonal.
    pub ridged: bool,
}

fn invert_primal(m: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut inv: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[piv][col] == 0.0 || !a[piv][col].is_finite() {
            return None;
        }
        a.swap(col, piv);
        inv.swap(col, piv);
        let p = a[col][col];
        for j in 0..n {
            a[col][j] /= p;
            inv[col][j] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                for j in 0..n {
                    a[r][j] -= f * a[col][j];
                    inv[r][j] -= f * inv[col][j];
                }
            }
        }
    }
    Some(inv)
}

fn norm1(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    (0..n).map(|j| (0..n).map(|i| m[i][j].abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// 1-norm condition number; infinite for singular input.
pub fn condition_number(m: &[Vec<f64>]) -> f64 {
    match invert_primal(m) {
        Some(inv) => norm1(m) * norm1(&inv),
        None => f64::INFINITY,
    }
}

/// Gauss-Jordan inverse carried out in `T`, so the result is differentiable
/// wherever `T` is (the tape then realises `d(M^-1) = -M^-1 dM M^-1`).
///
/// When the condition estimate exceeds [`CONDITION_LIMIT`] a ridge of
/// `1e-6 * trace / k` is added to the diagonal and `ridged` is set.
pub fn invert_small_matrix<T: Field>(m: &SmallMatrix<T>) -> Result<Inverse<T>, AdError> {
    let n = m.size();
    if n > MAX_DIRECTIONS {
        return Err(AdError::TooManyDirections(n));
    }
    if n == 0 {
        return Err(AdError::Singular);
    }
    let p = m.primal();
    for i in 0..n {
        for j in 0..i {
            let (a, b) = (p[i][j], p[j][i]);
            if (a - b).abs() > 1e-9 * (a.abs() + b.abs()).max(f64::MIN_POSITIVE) {
                return Err(AdError::NotSymmetric);
            }
        }
    }
    let condition = condition_number(&p);
    let mut work = m.clone();
    let ridged = !(condition <= CONDITION_LIMIT);
    if ridged {
        let trace: f64 = (0..n).map(|i| p[i][i]).sum();
        let eps = RIDGE_FRACTION * trace / n as f64;
        if !(eps > 0.0) {
            return Err(AdError::Singular);
        }
        for i in 0..n {
            let d = work.get(i, i).offset(eps);
            work.set(i, i, d);
        }
    }

    let one = m.get(0, 0).constant_like(1.0);
    let zero = m.get(0, 0).constant_like(0.0);
    let mut a: Vec<Vec<T>> = (0..n).map(|i| (0..n).map(|j| work.get(i, j)).collect()).collect();
    let mut inv: Vec<Vec<T>> = (0..n).map(|i| (0..n).map(|j| if i == j { one } else { zero }).collect()).collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| a[x][col].primal().abs().total_cmp(&a[y][col].primal().abs()))
            .expect("non-empty range");
        let pv = a[piv][col].primal();
        if pv == 0.0 || !pv.is_finite() {
            return Err(AdError::Singular);
        }
        a.swap(col, piv);
        inv.swap(col, piv);
        let p = a[col][col];
        for j in 0..n {
            a[col][j] = a[col][j].div(p);
            inv[col][j] = inv[col][j].div(p);
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                for j in 0..n {
                    a[r][j] = a[r][j].sub(f.mul(a[col][j]));
                    inv[r][j] = inv[r][j].sub(f.mul(inv[col][j]));
                }
            }
        }
    }
    Ok(Inverse { matrix: SmallMatrix::from_fn(n, |i, j| inv[i][j]), condition, ridged })
}
