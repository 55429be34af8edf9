//! Reverse-mode tape over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and the backward sweep simply walks it in reverse.
//! A tape is owned by one thread; independent tapes share nothing.

use std::cell::{Ref, RefCell};
use std::ops;

use super::tensor::{gemm, Tensor};
use super::AdError;

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    /// `input * [gate > threshold]`; the gate receives no gradient.
    MaskAbove { input: usize, gate: usize, threshold: f64 },
    ClampMin(usize, f64),
    MatMul(usize, usize),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    Softmax(usize, f64),
    LogSoftmax(usize, f64),
    PoissonNll { expected: usize, observed: usize },
    Element { input: usize, row: usize, col: usize },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Relu(..) => "max-with-zero",
            Op::MaskAbove { .. } => "mask",
            Op::ClampMin(..) => "clamp-min",
            Op::MatMul(..) => "matrix-multiply",
            Op::SumAll(..) | Op::SumRows(..) | Op::SumCols(..) => "reduce-sum",
            Op::Softmax(..) => "softmax-with-temperature",
            Op::LogSoftmax(..) => "log-softmax-with-temperature",
            Op::PoissonNll { .. } => "poisson-nll",
            Op::Element { .. } => "element",
        }
    }

    fn inputs(&self) -> [Option<usize>; 2] {
        match *self {
            Op::Leaf | Op::Constant => [None, None],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => [Some(a), Some(b)],
            Op::PoissonNll { expected, observed } => [Some(expected), Some(observed)],
            // the gate is not differentiated through
            Op::MaskAbove { input, .. } => [Some(input), None],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Relu(a)
            | Op::ClampMin(a, _)
            | Op::SumAll(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _)
            | Op::Element { input: a, .. } => [Some(a), None],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    /// Whether any leaf is upstream; adjoints are only formed for live nodes.
    live: bool,
}

/// Computation graph recorded during a forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let live = matches!(op, Op::Leaf) || op.inputs().iter().flatten().any(|&i| nodes[i].live);
        nodes.push(Node { op, value, live });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Constant, value)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn unary(&self, a: usize, op: Op, f: impl Fn(f64) -> f64) -> Var<'_> {
        let v = self.value_ref(a).map(f);
        self.push(op, v)
    }

    fn binary(&self, a: usize, b: usize, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'_> {
        let v = {
            let nodes = self.nodes.borrow();
            broadcast_zip(&nodes[a].value, &nodes[b].value, f)
        };
        self.push(op, v)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients, AdError> {
        assert!(std::ptr::eq(self, output.tape), "output belongs to another tape");
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.shape() != (1, 1) {
            let (rows, cols) = out.value.shape();
            return Err(AdError::NonScalarOutput { rows, cols });
        }
        let mut adj: Vec<Option<Tensor>> = Vec::new();
        adj.resize_with(output.id + 1, || None);
        if out.live {
            adj[output.id] = Some(Tensor::scalar(1.0));
        }
        let live = |i: usize| nodes[i].live;
        let accumulate = |adj: &mut [Option<Tensor>], id: usize, g: Tensor| {
            if live(id) {
                accumulate(adj, id, g)
            }
        };

        for id in (0..=output.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if !g.all_finite() {
                return Err(AdError::NonFinite { kind: node.op.kind() });
            }
            let val = |i: usize| &nodes[i].value;
            match node.op {
                Op::Leaf => adj[id] = Some(g),
                Op::Constant => {}
                Op::Add(a, b) => {
                    accumulate(&mut adj, a, reduce_to(&g, val(a).shape()));
                    accumulate(&mut adj, b, reduce_to(&g, val(b).shape()));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, a, reduce_to(&g, val(a).shape()));
                    accumulate(&mut adj, b, reduce_to(&g, val(b).shape()).map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let ga = broadcast_zip(&g, val(b), |g, b| g * b);
                    let gb = broadcast_zip(&g, val(a), |g, a| g * a);
                    accumulate(&mut adj, a, reduce_to(&ga, val(a).shape()));
                    accumulate(&mut adj, b, reduce_to(&gb, val(b).shape()));
                }
                Op::Div(a, b) => {
                    let ga = broadcast_zip(&g, val(b), |g, b| g / b);
                    // d(a/b)/db = -(a/b)/b
                    let q = &node.value;
                    let gq = zip_same(&g, q, |g, q| g * q);
                    let gb = broadcast_zip(&gq, val(b), |gq, b| -gq / b);
                    accumulate(&mut adj, a, reduce_to(&ga, val(a).shape()));
                    accumulate(&mut adj, b, reduce_to(&gb, val(b).shape()));
                }
                Op::Neg(a) => accumulate(&mut adj, a, g.map(|v| -v)),
                Op::Scale(a, c) => accumulate(&mut adj, a, g.map(|v| v * c)),
                Op::Offset(a) => accumulate(&mut adj, a, g),
                Op::Exp(a) => accumulate(&mut adj, a, zip_same(&g, &node.value, |g, e| g * e)),
                Op::Log(a) => accumulate(&mut adj, a, zip_same(&g, val(a), |g, x| g / x)),
                Op::Relu(a) => {
                    // derivative at exactly zero is taken as 0
                    accumulate(&mut adj, a, zip_same(&g, val(a), |g, x| if x > 0.0 { g } else { 0.0 }))
                }
                Op::MaskAbove { input, gate, threshold } => {
                    let ga = broadcast_zip(&g, val(gate), |g, z| if z > threshold { g } else { 0.0 });
                    accumulate(&mut adj, input, reduce_to(&ga, val(input).shape()));
                }
                Op::ClampMin(a, floor) => {
                    accumulate(&mut adj, a, zip_same(&g, val(a), |g, x| if x > floor { g } else { 0.0 }))
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(a), val(b));
                    if live(a) {
                        let mut ga = Tensor::zeros(va.rows(), va.cols());
                        gemm(1.0, &g, false, vb, true, 0.0, &mut ga);
                        accumulate(&mut adj, a, ga);
                    }
                    if live(b) {
                        let mut gb = Tensor::zeros(vb.rows(), vb.cols());
                        gemm(1.0, va, true, &g, false, 0.0, &mut gb);
                        accumulate(&mut adj, b, gb);
                    }
                }
                Op::SumAll(a) => {
                    let (r, c) = val(a).shape();
                    accumulate(&mut adj, a, Tensor::filled(r, c, g.item()));
                }
                Op::SumRows(a) | Op::SumCols(a) => {
                    let (r, c) = val(a).shape();
                    accumulate(&mut adj, a, broadcast_zip(&Tensor::zeros(r, c), &g, |_, g| g));
                }
                Op::Softmax(a, tau) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for c in 0..y.cols() {
                            ga.set(r, c, yr[c] * (gr[c] - dot) / tau);
                        }
                    }
                    accumulate(&mut adj, a, ga);
                }
                Op::LogSoftmax(a, tau) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                        let gsum: f64 = gr.iter().sum();
                        for c in 0..y.cols() {
                            ga.set(r, c, (gr[c] - yr[c].exp() * gsum) / tau);
                        }
                    }
                    accumulate(&mut adj, a, ga);
                }
                Op::PoissonNll { expected, observed } => {
                    let gs = g.item();
                    let (e, o) = (val(expected), val(observed));
                    accumulate(&mut adj, expected, zip_same(e, o, |e, o| gs * (1.0 - o / e)));
                    accumulate(&mut adj, observed, e.map(|e| -gs * e.ln()));
                }
                Op::Element { input, row, col } => {
                    let (r, c) = val(input).shape();
                    let mut ga = Tensor::zeros(r, c);
                    ga.set(row, col, g.item());
                    accumulate(&mut adj, input, ga);
                }
            }
        }
        Ok(Gradients { adjoints: adj })
    }

    /// Gradient of a scalar output with respect to `leaves`, concatenated in
    /// order (row-major within each leaf).
    pub fn gradient(&self, output: Var<'_>, leaves: &[Var<'_>]) -> Result<Vec<f64>, AdError> {
        let grads = self.backward(output)?;
        let mut out = Vec::new();
        for leaf in leaves {
            out.extend_from_slice(grads.get(*leaf).data());
        }
        Ok(out)
    }
}

fn accumulate(adj: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut adj[id] {
        Some(acc) => acc.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `var`; zeros when the output does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        match self.adjoints.get(var.id).and_then(Option::as_ref) {
            Some(t) => t.clone(),
            None => {
                let (r, c) = var.shape();
                Tensor::zeros(r, c)
            }
        }
    }
}

fn broadcast_dim(a: usize, b: usize) -> usize {
    if a == b {
        a
    } else if a == 1 {
        b
    } else if b == 1 {
        a
    } else {
        panic!("cannot broadcast dimensions {a} and {b}")
    }
}

fn zip_same(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data)
}

/// Elementwise combination with broadcasting of unit dimensions.
fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return zip_same(a, b, f);
    }
    let rows = broadcast_dim(a.rows(), b.rows());
    let cols = broadcast_dim(a.cols(), b.cols());
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let ra = if a.rows() == 1 { 0 } else { r };
        let rb = if b.rows() == 1 { 0 } else { r };
        for c in 0..cols {
            let ca = if a.cols() == 1 { 0 } else { c };
            let cb = if b.cols() == 1 { 0 } else { c };
            data.push(f(a.get(ra, ca), b.get(rb, cb)));
        }
    }
    Tensor::new(rows, cols, data)
}

/// Sum a broadcast gradient back down to an operand's shape.
fn reduce_to(g: &Tensor, shape: (usize, usize)) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape.0, shape.1);
    for r in 0..g.rows() {
        let ro = if shape.0 == 1 { 0 } else { r };
        for c in 0..g.cols() {
            let co = if shape.1 == 1 { 0 } else { c };
            let v = out.get(ro, co) + g.get(r, c);
            out.set(ro, co, v);
        }
    }
    out
}

fn softmax_rows(x: &Tensor, tau: f64, log: bool) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row_slice(r);
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / tau));
        let z: f64 = row.iter().map(|&v| (v / tau - m).exp()).sum();
        let lz = z.ln();
        for c in 0..x.cols() {
            let l = row[c] / tau - m - lz;
            out.set(r, c, if log { l } else { l.exp() });
        }
    }
    out
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_ref(self.id).clone()
    }

    /// Borrow the primal value without copying.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.value_ref(self.id))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.value_ref(self.id).shape()
    }

    /// Primal value of a 1x1 node.
    pub fn item(&self) -> f64 {
        self.tape.value_ref(self.id).item()
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t> {
        let v = self.value();
        self.tape.constant(v)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Scale(self.id, c), |v| v * c)
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Offset(self.id), |v| v + c)
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Log(self.id), f64::ln)
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Relu(self.id), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn clamp_min(self, floor: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::ClampMin(self.id, floor), |v| v.max(floor))
    }

    /// `self * [gate > threshold]`, treating the gate as piecewise constant.
    pub fn mask_above(self, gate: Var<'t>, threshold: f64) -> Var<'t> {
        self.tape.binary(
            self.id,
            gate.id,
            Op::MaskAbove { input: self.id, gate: gate.id, threshold },
            |x, z| if z > threshold { x } else { 0.0 },
        )
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
            let mut out = Tensor::zeros(a.rows(), b.cols());
            gemm(1.0, a, false, b, false, 0.0, &mut out);
            out
        };
        self.tape.push(Op::MatMul(self.id, rhs.id), v)
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.with_value(Tensor::sum);
        self.tape.push(Op::SumAll(self.id), Tensor::scalar(s))
    }

    /// Sum over rows, giving a `1 x cols` row.
    pub fn sum_rows(self) -> Var<'t> {
        let v = self.with_value(|t| {
            let mut out = vec![0.0; t.cols()];
            for r in 0..t.rows() {
                for (o, v) in out.iter_mut().zip(t.row_slice(r)) {
                    *o += v;
                }
            }
            Tensor::row(out)
        });
        self.tape.push(Op::SumRows(self.id), v)
    }

    /// Sum over columns, giving a `rows x 1` column.
    pub fn sum_cols(self) -> Var<'t> {
        let v = self.with_value(|t| Tensor::column((0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect()));
        self.tape.push(Op::SumCols(self.id), v)
    }

    /// Row-wise `softmax(self / tau)`.
    pub fn softmax(self, tau: f64) -> Var<'t> {
        let v = self.with_value(|t| softmax_rows(t, tau, false));
        self.tape.push(Op::Softmax(self.id, tau), v)
    }

    /// Row-wise `log softmax(self / tau)`.
    pub fn log_softmax(self, tau: f64) -> Var<'t> {
        let v = self.with_value(|t| softmax_rows(t, tau, true));
        self.tape.push(Op::LogSoftmax(self.id, tau), v)
    }

    /// `sum_i expected_i - observed_i * ln(expected_i)`, with `self` as the
    /// expectation.
    pub fn poisson_nll(self, observed: Var<'t>) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            let (e, o) = (&nodes[self.id].value, &nodes[observed.id].value);
            assert_eq!(e.shape(), o.shape(), "poisson_nll shapes differ");
            e.data().iter().zip(o.data()).map(|(&e, &o)| e - o * e.ln()).sum::<f64>()
        };
        self.tape.push(Op::PoissonNll { expected: self.id, observed: observed.id }, Tensor::scalar(v))
    }

    /// Entry `(row, col)` as a 1x1 node.
    pub fn element(self, row: usize, col: usize) -> Var<'t> {
        let v = self.with_value(|t| t.get(row, col));
        self.tape.push(Op::Element { input: self.id, row, col }, Tensor::scalar(v))
    }
}

macro_rules! var_binop {
    ($trait:ident, $method:ident, $op:ident, $f:expr) => {
        impl<'t> ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                assert!(std::ptr::eq(self.tape, rhs.tape), "operands on different tapes");
                self.tape.binary(self.id, rhs.id, Op::$op(self.id, rhs.id), $f)
            }
        }
    };
}

var_binop!(Add, add, Add, |a, b| a + b);
var_binop!(Sub, sub, Sub, |a, b| a - b);
var_binop!(Mul, mul, Mul, |a, b| a * b);
var_binop!(Div, div, Div, |a, b| a / b);

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Neg(self.id), |v| -v)
    }
}

impl<'t> ops::Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}

impl<'t> ops::Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.offset(rhs)
    }
}

impl<'t> ops::Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.offset(-rhs)
    }
}
