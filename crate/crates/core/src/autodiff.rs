//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`]s. [`Tape::grad`]
//! walks the record backwards, and each backward rule is itself expressed with
//! recorded operations, so the returned gradients are ordinary `Var`s that can
//! be differentiated again (reverse-over-reverse). This is what the meta-gradient
//! of the condensation objective needs: the matching loss is a function of
//! parameter gradients, and its derivative with respect to the synthetic
//! features passes through those gradients.
//!
//! ReLU is treated as having zero second derivative everywhere.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{AutodiffError, ShapeError};
use crate::tensor::{CsrMatrix, Tensor};

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    MulConst(usize, Rc<Tensor>),
    PowConst(usize, f64),
    Exp(usize),
    Sigmoid(usize),
    Relu(usize),
    MatMul(usize, usize),
    Transpose(usize),
    SpMM(Rc<CsrMatrix>, Rc<CsrMatrix>, usize),
    AddRowBias(usize, usize),
    SumAll(usize),
    Expand(usize),
    SumCols(usize),
    BroadcastCols(usize),
    SumRows(usize),
    BroadcastRows(usize),
    GatherRows(usize, Rc<Vec<usize>>),
    ScatterRows(usize, Rc<Vec<usize>>),
    SliceCols(usize, usize),
    PadCols(usize, usize),
    Reshape(usize),
    LogSumExpRows(usize),
}

impl Op {
    fn parents(&self) -> ([usize; 2], usize) {
        use Op::*;
        match *self {
            Leaf => ([0, 0], 0),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) | AddRowBias(a, b) => {
                ([a, b], 2)
            }
            Neg(a)
            | Scale(a, _)
            | MulConst(a, _)
            | PowConst(a, _)
            | Exp(a)
            | Sigmoid(a)
            | Relu(a)
            | Transpose(a)
            | SpMM(_, _, a)
            | SumAll(a)
            | Expand(a)
            | SumCols(a)
            | BroadcastCols(a)
            | SumRows(a)
            | BroadcastRows(a)
            | GatherRows(a, _)
            | ScatterRows(a, _)
            | SliceCols(a, _)
            | PadCols(a, _)
            | Reshape(a)
            | LogSumExpRows(a) => ([a, 0], 1),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Append-only record of a computation.
///
/// A tape is single-threaded; independent computations use independent tapes.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.nodes.borrow().len())
    }
}

/// Handle to a recorded value.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
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

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records an input. Inputs and constants are both leaves; whether a leaf
    /// is differentiated is decided by the `wrt` list passed to [`Tape::grad`].
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The backward pass is recorded on this tape, so the results can be fed
    /// into further computation and differentiated again. Leaves that do not
    /// influence `output` get a zero gradient.
    pub fn grad<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>, AutodiffError> {
        let out_shape = output.shape();
        if out_shape != [1, 1] {
            return Err(AutodiffError::NonScalarOutput {
                rows: out_shape[0],
                cols: out_shape[1],
            });
        }
        let end = output.id + 1;

        // Only nodes downstream of some `wrt` need an adjoint.
        let mut live = vec![false; end];
        for w in wrt {
            if w.id < end {
                live[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for (i, node) in nodes[..end].iter().enumerate() {
                if live[i] {
                    continue;
                }
                let (ps, n) = node.op.parents();
                live[i] = ps[..n].iter().any(|&p| live[p]);
            }
        }

        let mut adjoint: Vec<Option<Var<'t>>> = vec![None; end];
        if live[output.id] {
            adjoint[output.id] = Some(self.constant(Tensor::scalar(1.0)));
        }
        for id in (0..end).rev() {
            let Some(g) = adjoint[id] else { continue };
            let op = self.nodes.borrow()[id].op.clone();
            let (ps, n) = op.parents();
            if !ps[..n].iter().any(|&p| live[p]) {
                continue;
            }
            let out = Var { tape: self, id };
            for (parent, contribution) in self.backward_rule(&op, g, out) {
                if !live[parent] {
                    continue;
                }
                adjoint[parent] = Some(match adjoint[parent] {
                    Some(acc) => acc.add(contribution),
                    None => contribution,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|w| match adjoint.get(w.id).copied().flatten() {
                Some(g) => g,
                None => {
                    let [r, c] = w.shape();
                    self.constant(Tensor::zeros(r, c))
                }
            })
            .collect())
    }

    fn backward_rule<'t>(&'t self, op: &Op, g: Var<'t>, out: Var<'t>) -> Vec<(usize, Var<'t>)> {
        let v = |id| Var { tape: self, id };
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g), (*b, g)],
            Op::Sub(a, b) => vec![(*a, g), (*b, g.neg())],
            Op::Mul(a, b) => vec![(*a, g.mul(v(*b))), (*b, g.mul(v(*a)))],
            Op::Div(a, b) => vec![(*a, g.div(v(*b))), (*b, g.mul(out).div(v(*b)).neg())],
            Op::Neg(a) => vec![(*a, g.neg())],
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::MulConst(a, m) => vec![(*a, g.mul_const_rc(Rc::clone(m)))],
            Op::PowConst(a, p) => {
                if *p == 0.0 {
                    vec![]
                } else if *p == 1.0 {
                    vec![(*a, g)]
                } else {
                    vec![(*a, g.mul(v(*a).powf(*p - 1.0).scale(*p)))]
                }
            }
            Op::Exp(a) => vec![(*a, g.mul(out))],
            Op::Sigmoid(a) => vec![(*a, g.mul(out.sub(out.mul(out))))],
            Op::Relu(a) => {
                let mask = v(*a).value().map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                vec![(*a, g.mul_const(mask))]
            }
            Op::MatMul(a, b) => vec![
                (*a, g.matmul(v(*b).t())),
                (*b, v(*a).t().matmul(g)),
            ],
            Op::Transpose(a) => vec![(*a, g.t())],
            Op::SpMM(s, st, a) => vec![(*a, g.spmm_rc(Rc::clone(st), Rc::clone(s)))],
            Op::AddRowBias(a, b) => vec![(*a, g), (*b, g.sum_rows())],
            Op::SumAll(a) => {
                let [r, c] = v(*a).shape();
                vec![(*a, g.expand(r, c))]
            }
            Op::Expand(a) => vec![(*a, g.sum())],
            Op::SumCols(a) => {
                let c = v(*a).shape()[1];
                vec![(*a, g.broadcast_cols(c))]
            }
            Op::BroadcastCols(a) => vec![(*a, g.sum_cols())],
            Op::SumRows(a) => {
                let r = v(*a).shape()[0];
                vec![(*a, g.broadcast_rows(r))]
            }
            Op::BroadcastRows(a) => vec![(*a, g.sum_rows())],
            Op::GatherRows(a, idx) => {
                let r = v(*a).shape()[0];
                vec![(*a, g.scatter_rows_rc(Rc::clone(idx), r))]
            }
            Op::ScatterRows(a, idx) => vec![(*a, g.gather_rows_rc(Rc::clone(idx)))],
            Op::SliceCols(a, lo) => {
                let total = v(*a).shape()[1];
                vec![(*a, g.pad_cols(*lo, total))]
            }
            Op::PadCols(a, lo) => {
                let w = v(*a).shape()[1];
                vec![(*a, g.slice_cols(*lo, *lo + w))]
            }
            Op::Reshape(a) => {
                let [r, c] = v(*a).shape();
                vec![(*a, g.reshape(r, c))]
            }
            Op::LogSumExpRows(a) => {
                let x = v(*a);
                let c = x.shape()[1];
                let softmax = x.sub(out.broadcast_cols(c)).exp();
                vec![(*a, g.broadcast_cols(c).mul(softmax))]
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> [usize; 2] {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    /// Scalar value of a `1×1` var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Same value, cut from the recorded history.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op)
    }

    fn check_same(&self, other: &Var<'t>, what: &str) {
        let (a, b) = (self.shape(), other.shape());
        assert_eq!(a, b, "{what}: shapes {a:?} and {b:?} differ");
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.check_same(&other, "add");
        let value = self.value().add(&other.value());
        self.unary(value, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.check_same(&other, "sub");
        let value = self.value().sub(&other.value());
        self.unary(value, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.check_same(&other, "mul");
        let value = self.value().zip_map(&other.value(), |a, b| a * b);
        self.unary(value, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.check_same(&other, "div");
        let value = self.value().zip_map(&other.value(), |a, b| a / b);
        self.unary(value, Op::Div(self.id, other.id))
    }

    pub fn neg(self) -> Var<'t> {
        let value = self.value().map(|a| -a);
        self.unary(value, Op::Neg(self.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = self.value().scale(c);
        self.unary(value, Op::Scale(self.id, c))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(self, m: Tensor) -> Var<'t> {
        self.mul_const_rc(Rc::new(m))
    }

    fn mul_const_rc(self, m: Rc<Tensor>) -> Var<'t> {
        assert_eq!(self.shape(), m.shape(), "mul_const shape mismatch");
        let value = self.value().zip_map(&m, |a, b| a * b);
        self.unary(value, Op::MulConst(self.id, m))
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        let value = self.value().map(|a| a.powf(p));
        self.unary(value, Op::PowConst(self.id, p))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.powf(0.5)
    }

    pub fn exp(self) -> Var<'t> {
        let value = self.value().map(f64::exp);
        self.unary(value, Op::Exp(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let value = self.value().map(sigmoid);
        self.unary(value, Op::Sigmoid(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        let value = self.value().map(|a| if a > 0.0 { a } else { 0.0 });
        self.unary(value, Op::Relu(self.id))
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let value = self.value().matmul(&other.value());
        self.unary(value, Op::MatMul(self.id, other.id))
    }

    pub fn t(self) -> Var<'t> {
        let value = self.value().transpose();
        self.unary(value, Op::Transpose(self.id))
    }

    /// `sparse · self` for a constant sparse matrix.
    pub fn spmm(self, sparse: Rc<CsrMatrix>) -> Var<'t> {
        let transposed = Rc::new(sparse.transpose());
        self.spmm_rc(sparse, transposed)
    }

    fn spmm_rc(self, sparse: Rc<CsrMatrix>, transposed: Rc<CsrMatrix>) -> Var<'t> {
        let value = sparse.matmul_dense(&self.value());
        self.unary(value, Op::SpMM(sparse, transposed, self.id))
    }

    /// Adds a `1×c` row vector to every row.
    pub fn add_row(self, bias: Var<'t>) -> Var<'t> {
        let [r, c] = self.shape();
        assert_eq!(bias.shape(), [1, c], "bias must be 1x{c}");
        let b = bias.value();
        let mut value = (*self.value()).clone();
        for i in 0..r {
            for (x, &bv) in value.row_mut(i).iter_mut().zip(b.as_slice()) {
                *x += bv;
            }
        }
        self.unary(value, Op::AddRowBias(self.id, bias.id))
    }

    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum());
        self.unary(value, Op::SumAll(self.id))
    }

    fn expand(self, rows: usize, cols: usize) -> Var<'t> {
        let value = Tensor::filled(rows, cols, self.item());
        self.unary(value, Op::Expand(self.id))
    }

    /// Row sums: `r×c → r×1`.
    pub fn sum_cols(self) -> Var<'t> {
        let x = self.value();
        let value = Tensor::from_fn(x.rows(), 1, |i, _| x.row(i).iter().sum());
        self.unary(value, Op::SumCols(self.id))
    }

    /// Repeats an `r×1` column `cols` times.
    pub fn broadcast_cols(self, cols: usize) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.cols(), 1, "broadcast_cols needs a column vector");
        let value = Tensor::from_fn(x.rows(), cols, |i, _| x.get(i, 0));
        self.unary(value, Op::BroadcastCols(self.id))
    }

    /// Column sums: `r×c → 1×c`.
    pub fn sum_rows(self) -> Var<'t> {
        let x = self.value();
        let mut value = Tensor::zeros(1, x.cols());
        for i in 0..x.rows() {
            for (acc, &v) in value.as_mut_slice().iter_mut().zip(x.row(i)) {
                *acc += v;
            }
        }
        self.unary(value, Op::SumRows(self.id))
    }

    /// Repeats a `1×c` row `rows` times.
    pub fn broadcast_rows(self, rows: usize) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.rows(), 1, "broadcast_rows needs a row vector");
        let value = Tensor::from_fn(rows, x.cols(), |_, j| x.get(0, j));
        self.unary(value, Op::BroadcastRows(self.id))
    }

    pub fn gather_rows(self, index: &[usize]) -> Var<'t> {
        self.gather_rows_rc(Rc::new(index.to_vec()))
    }

    fn gather_rows_rc(self, index: Rc<Vec<usize>>) -> Var<'t> {
        let value = self.value().gather_rows(&index);
        self.unary(value, Op::GatherRows(self.id, index))
    }

    fn scatter_rows_rc(self, index: Rc<Vec<usize>>, rows: usize) -> Var<'t> {
        let x = self.value();
        let mut value = Tensor::zeros(rows, x.cols());
        for (k, &i) in index.iter().enumerate() {
            for (acc, &v) in value.row_mut(i).iter_mut().zip(x.row(k)) {
                *acc += v;
            }
        }
        self.unary(value, Op::ScatterRows(self.id, index))
    }

    pub fn slice_cols(self, lo: usize, hi: usize) -> Var<'t> {
        let value = self.value().slice_cols(lo, hi);
        self.unary(value, Op::SliceCols(self.id, lo))
    }

    /// Places the columns at offset `lo` of a zero matrix `total` wide.
    pub fn pad_cols(self, lo: usize, total: usize) -> Var<'t> {
        let x = self.value();
        assert!(lo + x.cols() <= total, "pad_cols overflow");
        let mut value = Tensor::zeros(x.rows(), total);
        for i in 0..x.rows() {
            value.row_mut(i)[lo..lo + x.cols()].copy_from_slice(x.row(i));
        }
        self.unary(value, Op::PadCols(self.id, lo))
    }

    /// Horizontal concatenation `[self ‖ other]`.
    pub fn concat_cols(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.shape()[1], other.shape()[1]);
        self.pad_cols(0, a + b).add(other.pad_cols(a, a + b))
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        let value = self.value().reshape(rows, cols);
        self.unary(value, Op::Reshape(self.id))
    }

    /// Numerically stable `log Σ_j exp(x_ij)` per row: `r×c → r×1`.
    pub fn logsumexp_rows(self) -> Var<'t> {
        let x = self.value();
        let value = Tensor::from_fn(x.rows(), 1, |i, _| {
            let row = x.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
        });
        self.unary(value, Op::LogSumExpRows(self.id))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inputs of a [`DifferentiableExpr`] as recorded on one tape.
pub struct Bindings<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bindings<'t> {
    /// # Panics
    /// If `name` is not an input of the expression.
    pub fn var(&self, name: &str) -> Var<'t> {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("expression has no input named `{name}`"),
        }
    }
}

type Builder = dyn for<'t> Fn(&'t Tape, &Bindings<'t>) -> Var<'t>;

/// A replayable computation over named inputs.
///
/// The builder is re-run on a fresh tape for every query, so repeated queries
/// with identical inputs are bit-for-bit identical and never mutate the inputs.
pub struct DifferentiableExpr {
    inputs: BTreeMap<String, Tensor>,
    build: Box<Builder>,
}

impl DifferentiableExpr {
    pub fn new<F>(inputs: impl IntoIterator<Item = (String, Tensor)>, build: F) -> Self
    where
        F: for<'t> Fn(&'t Tape, &Bindings<'t>) -> Var<'t> + 'static,
    {
        Self {
            inputs: inputs.into_iter().collect(),
            build: Box::new(build),
        }
    }

    pub fn input(&self, name: &str) -> Option<&Tensor> {
        self.inputs.get(name)
    }

    pub fn set_input(&mut self, name: &str, value: Tensor) -> Result<(), AutodiffError> {
        let slot = self
            .inputs
            .get_mut(name)
            .ok_or_else(|| AutodiffError::UnknownInput(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(ShapeError::new(format!(
                "input `{name}` is {:?}, got {:?}",
                slot.shape(),
                value.shape()
            ))
            .into());
        }
        *slot = value;
        Ok(())
    }

    fn record<'t>(&self, tape: &'t Tape, inputs: &BTreeMap<String, Tensor>) -> (Bindings<'t>, Var<'t>) {
        let vars = inputs
            .iter()
            .map(|(k, v)| (k.clone(), tape.var(v.clone())))
            .collect();
        let bindings = Bindings { vars };
        let out = (self.build)(tape, &bindings);
        (bindings, out)
    }

    fn check_name(&self, name: &str) -> Result<(), AutodiffError> {
        if self.inputs.contains_key(name) {
            Ok(())
        } else {
            Err(AutodiffError::UnknownInput(name.to_string()))
        }
    }

    pub fn eval(&self) -> Tensor {
        let tape = Tape::new();
        let (_, out) = self.record(&tape, &self.inputs);
        (*out.value()).clone()
    }

    fn eval_with(&self, inputs: &BTreeMap<String, Tensor>) -> Tensor {
        let tape = Tape::new();
        let (_, out) = self.record(&tape, inputs);
        (*out.value()).clone()
    }

    /// `∂ output / ∂ wrt`, shaped like the input.
    pub fn gradient(&self, wrt: &str) -> Result<Tensor, AutodiffError> {
        self.check_name(wrt)?;
        let tape = Tape::new();
        let (b, out) = self.record(&tape, &self.inputs);
        let g = tape.grad(out, &[b.var(wrt)])?;
        Ok((*g[0].value()).clone())
    }

    /// `∂/∂ outer_wrt` of `reduce(∂ output / ∂ inner_wrt)`.
    pub fn second_order_gradient<R>(&self, inner_wrt: &str, reduce: R, outer_wrt: &str) -> Result<Tensor, AutodiffError>
    where
        R: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
    {
        self.check_name(inner_wrt)?;
        self.check_name(outer_wrt)?;
        let tape = Tape::new();
        let (b, out) = self.record(&tape, &self.inputs);
        let inner = tape.grad(out, &[b.var(inner_wrt)])?[0];
        let reduced = reduce(&tape, inner);
        let g = tape.grad(reduced, &[b.var(outer_wrt)])?;
        Ok((*g[0].value()).clone())
    }

    /// Central finite differences of the scalar output with respect to `wrt`.
    pub fn numerical_gradient(&self, wrt: &str, step: f64) -> Result<Tensor, AutodiffError> {
        self.check_name(wrt)?;
        let base = self.inputs[wrt].clone();
        let mut inputs = self.inputs.clone();
        let mut out = Tensor::zeros(base.rows(), base.cols());
        for k in 0..base.len() {
            let mut plus = base.clone();
            plus.as_mut_slice()[k] += step;
            inputs.insert(wrt.to_string(), plus);
            let fp = self.eval_with(&inputs).item();
            let mut minus = base.clone();
            minus.as_mut_slice()[k] -= step;
            inputs.insert(wrt.to_string(), minus);
            let fm = self.eval_with(&inputs).item();
            out.as_mut_slice()[k] = (fp - fm) / (2.0 * step);
        }
        Ok(out)
    }

    /// Largest relative disagreement between the analytic gradient and central
    /// finite differences; see [`relative_error`].
    pub fn finite_difference_check(&self, wrt: &str, step: f64) -> Result<f64, AutodiffError> {
        assert!(step > 0.0, "finite-difference step must be positive");
        let analytic = self.gradient(wrt)?;
        let numeric = self.numerical_gradient(wrt, step)?;
        Ok(relative_error(&analytic, &numeric))
    }
}

/// `max_i |a_i − n_i| / max(|a_i|, |n_i|, 1e-3·‖n‖_∞, 1e-12)`.
///
/// Components several orders of magnitude below the largest one are measured
/// against a floor tied to the gradient's scale, where central differences are
/// dominated by roundoff.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let floor = (1e-3 * numeric.max_abs()).max(1e-12);
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn expr1(name: &str, value: Tensor, f: impl for<'t> Fn(&'t Tape, &Bindings<'t>) -> Var<'t> + 'static) -> DifferentiableExpr {
        DifferentiableExpr::new([(name.to_string(), value)], f)
    }

    #[test]
    fn square_at_three() {
        let e = expr1("x", Tensor::scalar(3.0), |_, b| {
            let x = b.var("x");
            x.mul(x)
        });
        assert_eq!(e.gradient("x").unwrap().item(), 6.0);
    }

    #[test]
    fn sum_of_squares() {
        let e = expr1("x", Tensor::row_vector(&[1.0, -2.0, 0.5]), |_, b| {
            let x = b.var("x");
            x.mul(x).sum()
        });
        assert_eq!(e.gradient("x").unwrap().as_slice(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn two_class_cross_entropy() {
        let e = expr1("z", Tensor::row_vector(&[0.0, 0.0]), |_, b| {
            let z = b.var("z");
            let picked = z.mul_const(Tensor::row_vector(&[1.0, 0.0])).sum();
            z.logsumexp_rows().sum().sub(picked)
        });
        let g = e.gradient("z").unwrap();
        assert!((g.get(0, 0) + 0.5).abs() < 1e-15);
        assert!((g.get(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let e = expr1("x", Tensor::row_vector(&[1.0, 2.0]), |_, b| b.var("x").scale(2.0));
        assert!(matches!(
            e.gradient("x"),
            Err(AutodiffError::NonScalarOutput { rows: 1, cols: 2 })
        ));
    }

    #[test]
    fn unknown_input_is_a_lookup_error() {
        let e = expr1("x", Tensor::scalar(1.0), |_, b| b.var("x"));
        assert_eq!(e.gradient("y"), Err(AutodiffError::UnknownInput("y".into())));
    }

    #[test]
    fn cube_second_derivative() {
        let e = expr1("x", Tensor::scalar(2.0), |_, b| {
            let x = b.var("x");
            x.mul(x).mul(x)
        });
        let g = e.second_order_gradient("x", |_, g| g, "x").unwrap();
        assert!((g.item() - 12.0).abs() < 1e-10);
    }

    #[test]
    fn mixed_partial() {
        let e = DifferentiableExpr::new(
            [("x".to_string(), Tensor::scalar(3.0)), ("y".to_string(), Tensor::scalar(5.0))],
            |_, b| {
                let x = b.var("x");
                x.mul(x).mul(b.var("y"))
            },
        );
        let g = e.second_order_gradient("x", |_, g| g, "y").unwrap();
        assert!((g.item() - 6.0).abs() < 1e-10);
    }

    #[test]
    fn squared_gradient_norm_matches_finite_differences() {
        let e = expr1("x", Tensor::row_vector(&[1.0, 2.0]), |_, b| {
            let x = b.var("x");
            x.mul(x).sum()
        });
        let g = e
            .second_order_gradient("x", |_, g| g.mul(g).sum(), "x")
            .unwrap();
        // Oracle: central differences of ‖∇f‖² = 4‖x‖².
        let h = 1e-5;
        let phi = |x: [f64; 2]| 4.0 * (x[0] * x[0] + x[1] * x[1]);
        let fd = [
            (phi([1.0 + h, 2.0]) - phi([1.0 - h, 2.0])) / (2.0 * h),
            (phi([1.0, 2.0 + h]) - phi([1.0, 2.0 - h])) / (2.0 * h),
        ];
        assert!((fd[0] - 8.0).abs() < 1e-6 && (fd[1] - 16.0).abs() < 1e-6);
        assert!((g.get(0, 0) - 8.0).abs() < 1e-10);
        assert!((g.get(0, 1) - 16.0).abs() < 1e-10);
    }

    #[test]
    fn quadratic_finite_difference_is_tight() {
        let e = expr1("x", Tensor::scalar(1.0), |_, b| {
            let x = b.var("x");
            x.mul(x)
        });
        assert!(e.finite_difference_check("x", 1e-5).unwrap() <= 1e-9);
    }

    #[test]
    fn unreachable_leaf_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(2.0));
        let y = tape.var(Tensor::row_vector(&[1.0, 1.0]));
        let out = x.mul(x);
        let g = tape.grad(out, &[y]).unwrap();
        assert_eq!(g[0].value().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(2.0));
        let out = x.mul(x.detach());
        let g = tape.grad(out, &[x]).unwrap();
        assert_eq!(g[0].item(), 2.0);
    }

    #[test]
    fn structural_ops_roundtrip_gradients() {
        let e = expr1("x", Tensor::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.1 - 0.3), |tape, b| {
            let x = b.var("x");
            let w = tape.constant(Tensor::from_fn(3, 4, |i, j| ((i + 1) * (j + 2)) as f64 * 0.05));
            let sliced = x.slice_cols(1, 3).pad_cols(1, 4);
            let gathered = x.gather_rows(&[2, 0, 2]).sum_rows().broadcast_rows(3);
            let shaped = x.reshape(4, 3).t().reshape(3, 4);
            let bias = x.gather_rows(&[1]);
            let col = x.sum_cols().broadcast_cols(4);
            sliced
                .add(gathered)
                .add(shaped.add_row(bias))
                .add(col)
                .mul(w)
                .sigmoid()
                .logsumexp_rows()
                .sum()
        });
        assert!(e.finite_difference_check("x", 1e-6).unwrap() < 1e-7);
    }
}
