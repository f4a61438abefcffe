//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order. [`Tape::backward`] walks the record in reverse, accumulating
//! gradients for every variable that transitively depends on a parameter,
//! and then releases the recorded closures. A fresh tape is built for every
//! training step.
//!
//! Broadcasting is deliberately narrow: binary operations accept two tensors
//! of equal shape, or a one-element tensor paired with any tensor. Anything
//! else is a [`Error::ShapeMismatch`].
//!
//! Every operation checks its output for NaN/Inf and reports
//! [`Error::NonFinite`] instead of letting non-finite values propagate.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::ops::Range;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Operand, Tensor};

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    op: &'static str,
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// A handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.index];
        f.debug_struct("Var")
            .field("index", &self.index)
            .field("op", &node.op)
            .field("shape", &node.value.shape())
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of the matching shape when the loss does
    /// not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.value().shape()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Sqrt,
    Sigmoid,
    Tanh,
    Softplus,
    /// Standard Gaussian cumulative distribution function.
    NormalCdf,
    /// `max(x, c)`; the subgradient at `x == c` is zero.
    MaxScalar(f64),
    AddScalar(f64),
    MulScalar(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Standard Gaussian CDF, `Φ(x) = erfc(-x/√2)/2`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Softplus => "softplus",
            UnaryOp::NormalCdf => "normal_cdf",
            UnaryOp::MaxScalar(_) => "max_scalar",
            UnaryOp::AddScalar(_) => "add_scalar",
            UnaryOp::MulScalar(_) => "mul_scalar",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Softplus => softplus(x),
            UnaryOp::NormalCdf => normal_cdf(x),
            UnaryOp::MaxScalar(c) => x.max(c),
            UnaryOp::AddScalar(c) => x + c,
            UnaryOp::MulScalar(c) => x * c,
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Neg => -1.0,
            UnaryOp::Exp => y,
            UnaryOp::Log => 1.0 / x,
            UnaryOp::Sqrt => 0.5 / y,
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Tanh => 1.0 - y * y,
            UnaryOp::Softplus => sigmoid(x),
            UnaryOp::NormalCdf => normal_pdf(x),
            UnaryOp::MaxScalar(c) => {
                if x > c {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::AddScalar(_) => 1.0,
            UnaryOp::MulScalar(c) => c,
        }
    }

    fn check_domain(self, x: &Tensor) -> Result<()> {
        match self {
            UnaryOp::Log if x.data().iter().any(|&v| v <= 0.0) => {
                Err(Error::domain("log", "argument must be positive"))
            }
            UnaryOp::Sqrt if x.data().iter().any(|&v| v < 0.0) => {
                Err(Error::domain("sqrt", "argument must be non-negative"))
            }
            _ => Ok(()),
        }
    }
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }

    /// Partial derivatives `(∂/∂a, ∂/∂b)`.
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            BinaryOp::Add => (1.0, 1.0),
            BinaryOp::Sub => (1.0, -1.0),
            BinaryOp::Mul => (b, a),
            BinaryOp::Div => (1.0 / b, -a / (b * b)),
        }
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Reduces a broadcast gradient back onto a one-element operand.
fn unbroadcast(grad: Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        grad
    } else {
        Tensor::full(shape, grad.sum())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded operations, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a value that is not differentiated.
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.leaf(value, false)
    }

    /// Records a trainable leaf; its gradient is populated by [`Tape::backward`].
    pub fn param(&self, value: Tensor) -> Result<Var<'_>> {
        self.leaf(value, true)
    }

    pub fn scalar(&self, value: f64) -> Result<Var<'_>> {
        self.constant(Tensor::scalar(value))
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Result<Var<'_>> {
        self.record("leaf", value, &[], requires_grad, None)
    }

    fn record(
        &self,
        op: &'static str,
        value: Tensor,
        inputs: &[usize],
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Result<Var<'_>> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        check_finite(op, &value)?;
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node {
            op,
            value: Rc::new(value),
            inputs: inputs.to_vec(),
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Ok(Var { tape: self, index })
    }

    /// Records an operation with a caller-supplied vector-Jacobian product.
    ///
    /// `backward` receives the gradient of the output and a mask of which
    /// inputs need a gradient, and returns one optional gradient per input.
    pub(crate) fn custom<'t>(
        &'t self,
        op: &'static str,
        inputs: &[Var<'t>],
        value: Tensor,
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Result<Var<'t>> {
        let mut ids = Vec::with_capacity(inputs.len());
        let mut requires_grad = false;
        {
            let nodes = self.nodes.borrow();
            for v in inputs {
                if !std::ptr::eq(v.tape, self) {
                    return Err(Error::ForeignVar);
                }
                requires_grad |= nodes[v.index].requires_grad;
                ids.push(v.index);
            }
        }
        self.record(op, value, &ids, requires_grad, Some(Box::new(backward)))
    }

    /// Runs the reverse pass from a scalar `loss` and clears the tape.
    ///
    /// After this call every operation on the tape fails with
    /// [`Error::TapeConsumed`]; recorded values stay readable.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::ForeignVar);
        }
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let mut nodes = self.nodes.borrow_mut();
        let loss_value = nodes[loss.index].value.clone();
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if nodes[loss.index].requires_grad {
            grads[loss.index] = Some(Tensor::ones(loss_value.shape()));
        }
        for i in (0..=loss.index).rev() {
            let node = &nodes[i];
            let (Some(backward), Some(grad)) = (node.backward.as_ref(), grads[i].as_ref()) else {
                continue;
            };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&j| nodes[j].requires_grad)
                .collect();
            let input_grads = backward(grad, &needs);
            for ((&j, need), g) in node.inputs.iter().zip(needs).zip(input_grads) {
                let Some(g) = g.filter(|_| need) else {
                    continue;
                };
                check_finite(node.op, &g)?;
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for node in nodes.iter_mut() {
            node.backward = None;
        }
        self.consumed.set(true);
        Ok(Gradients { grads })
    }
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.index].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.index].value.shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.index].requires_grad
    }

    pub fn unary(self, op: UnaryOp) -> Result<Var<'t>> {
        let x = self.value();
        op.check_domain(&x)?;
        let y = x.map(|v| op.apply(v));
        let y_saved = Rc::new(y.clone());
        self.tape.custom(op.name(), &[self], y, move |g, _| {
            let d = x
                .zip_map(&y_saved, |xv, yv| op.derivative(xv, yv))
                .expect("unary shapes");
            vec![Some(g.zip_map(&d, |a, b| a * b).expect("unary grad shapes"))]
        })
    }

    pub fn binary(self, other: Var<'t>, op: BinaryOp) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let out_shape = if a.shape() == b.shape() || b.is_scalar_like() {
            a.shape().to_vec()
        } else if a.is_scalar_like() {
            b.shape().to_vec()
        } else {
            return Err(Error::ShapeMismatch {
                op: op.name(),
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        };
        if op == BinaryOp::Div && b.data().contains(&0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        let n: usize = out_shape.iter().product();
        let at = |t: &Tensor, i: usize| if t.len() == 1 { t.data()[0] } else { t.data()[i] };
        let data: Vec<f64> = (0..n).map(|i| op.apply(at(&a, i), at(&b, i))).collect();
        let value = Tensor::new(out_shape.clone(), data)?;
        self.tape.custom(op.name(), &[self, other], value, move |g, needs| {
            let mut ga = Vec::with_capacity(if needs[0] { n } else { 0 });
            let mut gb = Vec::with_capacity(if needs[1] { n } else { 0 });
            for i in 0..n {
                let (da, db) = op.partials(at(&a, i), at(&b, i));
                if needs[0] {
                    ga.push(g.data()[i] * da);
                }
                if needs[1] {
                    gb.push(g.data()[i] * db);
                }
            }
            let wrap = |v: Vec<f64>, shape: &[usize]| {
                unbroadcast(Tensor::new(out_shape.clone(), v).expect("grad shape"), shape)
            };
            vec![
                needs[0].then(|| wrap(ga, a.shape())),
                needs[1].then(|| wrap(gb, b.shape())),
            ]
        })
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Div)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Neg)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Log)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Sqrt)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Tanh)
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Softplus)
    }

    pub fn normal_cdf(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::NormalCdf)
    }

    pub fn max_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary(UnaryOp::MaxScalar(c))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary(UnaryOp::AddScalar(c))
    }

    pub fn mul_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary(UnaryOp::MulScalar(c))
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let value = a.matmul(&b)?;
        self.tape.custom("matmul", &[self, other], value, move |g, needs| {
            let ga = needs[0].then(|| {
                let mut out = vec![0.0; m * k];
                gemm(
                    Operand::plain(g.data(), m, n),
                    Operand::transposed(b.data(), k, n),
                    &mut out,
                );
                Tensor::matrix(m, k, out).expect("matmul grad shape")
            });
            let gb = needs[1].then(|| {
                let mut out = vec![0.0; k * n];
                gemm(
                    Operand::transposed(a.data(), m, k),
                    Operand::plain(g.data(), m, n),
                    &mut out,
                );
                Tensor::matrix(k, n, out).expect("matmul grad shape")
            });
            vec![ga, gb]
        })
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.is_empty() {
            return Err(Error::Empty("sum"));
        }
        let shape = x.shape().to_vec();
        self.tape
            .custom("sum", &[self], Tensor::scalar(x.sum()), move |g, _| {
                vec![Some(Tensor::full(&shape, g.data()[0]))]
            })
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.is_empty() {
            return Err(Error::Empty("mean"));
        }
        let n = x.len() as f64;
        let shape = x.shape().to_vec();
        self.tape
            .custom("mean", &[self], Tensor::scalar(x.sum() / n), move |g, _| {
                vec![Some(Tensor::full(&shape, g.data()[0] / n))]
            })
    }

    /// Population standard deviation over all elements (divides by N).
    ///
    /// The gradient at zero spread is taken as zero.
    pub fn std(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.is_empty() {
            return Err(Error::Empty("std"));
        }
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        self.tape
            .custom("std", &[self], Tensor::scalar(sd), move |g, _| {
                let scale = if sd > 0.0 { g.data()[0] / (n * sd) } else { 0.0 };
                vec![Some(x.map(|v| (v - mean) * scale))]
            })
    }

    /// Minimum over all elements and the first index attaining it.
    ///
    /// The subgradient is routed entirely to that index.
    pub fn min_with_index(self) -> Result<(Var<'t>, usize)> {
        let x = self.value();
        if x.is_empty() {
            return Err(Error::Empty("min"));
        }
        let (idx, min) = x
            .data()
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |(bi, bv), (i, v)| {
                if v < bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
        let shape = x.shape().to_vec();
        let var = self
            .tape
            .custom("min", &[self], Tensor::scalar(min), move |g, _| {
                let mut out = Tensor::zeros(&shape);
                out.data_mut()[idx] = g.data()[0];
                vec![Some(out)]
            })?;
        Ok((var, idx))
    }

    pub fn min(self) -> Result<Var<'t>> {
        self.min_with_index().map(|(v, _)| v)
    }

    /// Sum of a matrix along `axis` (0 collapses rows, 1 collapses columns).
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = x.dims2()?;
        let out = match axis {
            0 if r > 0 => (0..c)
                .map(|j| (0..r).map(|i| x.data()[i * c + j]).sum())
                .collect(),
            1 if c > 0 => (0..r)
                .map(|i| x.data()[i * c..(i + 1) * c].iter().sum())
                .collect(),
            0 | 1 => return Err(Error::Empty("sum_axis")),
            _ => {
                return Err(Error::InvalidShape {
                    op: "sum_axis",
                    detail: format!("axis {axis} out of range for a matrix"),
                })
            }
        };
        self.tape
            .custom("sum_axis", &[self], Tensor::vector(out), move |g, _| {
                let mut grad = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        grad[i * c + j] = if axis == 0 { g.data()[j] } else { g.data()[i] };
                    }
                }
                vec![Some(Tensor::matrix(r, c, grad).expect("sum_axis grad"))]
            })
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let (r, c) = self.value().dims2()?;
        let n = if axis == 0 { r } else { c };
        self.sum_axis(axis)?.mul_scalar(1.0 / n as f64)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let x = self.value();
        let original = x.shape().to_vec();
        let value = (*x).clone().reshape(shape)?;
        self.tape.custom("reshape", &[self], value, move |g, _| {
            vec![Some(g.clone().reshape(original.clone()).expect("reshape grad"))]
        })
    }

    /// Contiguous sub-range of a vector.
    pub fn slice(self, range: Range<usize>) -> Result<Var<'t>> {
        let x = self.value();
        if x.ndim() != 1 || range.end > x.len() || range.start > range.end {
            return Err(Error::InvalidShape {
                op: "slice",
                detail: format!("range {range:?} invalid for shape {:?}", x.shape()),
            });
        }
        let n = x.len();
        let value = Tensor::vector(x.data()[range.clone()].to_vec());
        self.tape.custom("slice", &[self], value, move |g, _| {
            let mut out = vec![0.0; n];
            out[range.clone()].copy_from_slice(g.data());
            vec![Some(Tensor::vector(out))]
        })
    }

    /// Element `i` of a vector as a scalar.
    pub fn index(self, i: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.ndim() != 1 || i >= x.len() {
            return Err(Error::InvalidShape {
                op: "index",
                detail: format!("index {i} invalid for shape {:?}", x.shape()),
            });
        }
        let n = x.len();
        self.tape
            .custom("index", &[self], Tensor::scalar(x.data()[i]), move |g, _| {
                let mut out = vec![0.0; n];
                out[i] = g.data()[0];
                vec![Some(Tensor::vector(out))]
            })
    }

    /// Row `i` of a matrix, shaped `[1, cols]`.
    pub fn row(self, i: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = x.dims2()?;
        let value = Tensor::matrix(1, c, x.row(i)?.to_vec())?;
        self.tape.custom("row", &[self], value, move |g, _| {
            let mut out = vec![0.0; r * c];
            out[i * c..(i + 1) * c].copy_from_slice(g.data());
            vec![Some(Tensor::matrix(r, c, out).expect("row grad"))]
        })
    }

    /// Tiles a `[c]` or `[1, c]` tensor into `[rows, c]`.
    pub fn repeat_rows(self, rows: usize) -> Result<Var<'t>> {
        let x = self.value();
        let c = match x.shape() {
            [c] | [1, c] => *c,
            other => {
                return Err(Error::InvalidShape {
                    op: "repeat_rows",
                    detail: format!("expected a row vector, shape is {other:?}"),
                })
            }
        };
        let shape = x.shape().to_vec();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(x.data());
        }
        let value = Tensor::matrix(rows, c, data)?;
        self.tape.custom("repeat_rows", &[self], value, move |g, _| {
            let mut out = vec![0.0; c];
            for row in g.data().chunks(c) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            vec![Some(Tensor::new(shape.clone(), out).expect("repeat grad"))]
        })
    }

    /// `self · rhs + bias` with the bias row repeated over every output row.
    pub fn affine(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let out = self.matmul(weight)?;
        let rows = out.value().dims2()?.0;
        out.add(bias.repeat_rows(rows)?)
    }
}

/// Concatenates along the leading axis. One-element scalars count as `[1]`.
pub fn concat<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or(Error::Empty("concat"))?;
    let tape = first.tape;
    let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
    let trailing = |t: &Tensor| -> Vec<usize> {
        if t.ndim() <= 1 {
            Vec::new()
        } else {
            t.shape()[1..].to_vec()
        }
    };
    let lead = |t: &Tensor| if t.ndim() == 0 { 1 } else { t.shape()[0] };
    let tail = trailing(&values[0]);
    let mut rows = 0;
    let mut data = Vec::new();
    let mut sizes = Vec::with_capacity(values.len());
    for v in &values {
        if trailing(v) != tail {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: values[0].shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        rows += lead(v);
        sizes.push((v.len(), v.shape().to_vec()));
        data.extend_from_slice(v.data());
    }
    let mut shape = vec![rows];
    shape.extend(tail);
    let value = Tensor::new(shape, data)?;
    tape.custom("concat", parts, value, move |g, needs| {
        let mut offset = 0;
        sizes
            .iter()
            .zip(needs)
            .map(|((len, shape), &need)| {
                let chunk = &g.data()[offset..offset + len];
                offset += len;
                need.then(|| Tensor::new(shape.clone(), chunk.to_vec()).expect("concat grad"))
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_var<'t>(tape: &'t Tape, v: &[f64]) -> Var<'t> {
        tape.param(Tensor::vector(v.to_vec())).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let zero = tape.scalar(0.0).unwrap();
        assert_eq!(zero.sigmoid().unwrap().item().unwrap(), 0.5);
        assert_eq!(zero.exp().unwrap().item().unwrap(), 1.0);
        let a = vec_var(&tape, &[1.0, 2.0]);
        let b = vec_var(&tape, &[3.0, 4.0]);
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn elementwise_errors() {
        let tape = Tape::new();
        let a = vec_var(&tape, &[1.0, 2.0]);
        let b = vec_var(&tape, &[1.0, 2.0, 3.0]);
        assert!(matches!(a.add(b), Err(Error::ShapeMismatch { .. })));
        let neg = vec_var(&tape, &[-1.0, 2.0]);
        assert!(matches!(neg.log(), Err(Error::Domain { .. })));
        assert!(matches!(neg.sqrt(), Err(Error::Domain { .. })));
        let z = vec_var(&tape, &[1.0, 0.0]);
        assert!(matches!(a.div(z), Err(Error::Domain { .. })));
        let big = tape.scalar(1000.0).unwrap();
        assert!(matches!(big.exp(), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn scalar_broadcast_both_sides() {
        let tape = Tape::new();
        let s = tape.param(Tensor::scalar(2.0)).unwrap();
        let v = vec_var(&tape, &[1.0, 2.0, 3.0]);
        let left = s.mul(v).unwrap();
        let right = v.sub(s).unwrap();
        assert_eq!(left.value().data(), &[2.0, 4.0, 6.0]);
        assert_eq!(right.value().data(), &[-1.0, 0.0, 1.0]);
        let loss = left.add(right).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        // d/ds [Σ s·v_i + Σ (v_i − s)] = Σ v_i − 3
        assert_eq!(grads.wrt(s).data(), &[3.0]);
        assert_eq!(grads.wrt(v).data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let pick = tape
            .constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap())
            .unwrap();
        let col = tape
            .constant(Tensor::matrix(2, 1, vec![0.0, 5.0]).unwrap())
            .unwrap();
        assert_eq!(pick.matmul(col).unwrap().value().data(), &[0.0]);
        let bad = tape.constant(Tensor::matrix(3, 1, vec![0.0; 3]).unwrap()).unwrap();
        assert!(pick.matmul(bad).is_err());
    }

    #[test]
    fn matmul_gradient_is_ones_times_b_transpose() {
        let tape = Tape::new();
        let a = tape
            .param(Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.0, 1.5, 3.0]).unwrap())
            .unwrap();
        let b = tape
            .constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        let loss = a.matmul(b).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        let expected = Tensor::ones(&[2, 2])
            .matmul(&b.value().transpose().unwrap())
            .unwrap();
        assert_eq!(grads.wrt(a), expected);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn reductions_examples() {
        let tape = Tape::new();
        let c = vec_var(&tape, &[2.0, 2.0, 2.0]);
        assert_eq!(c.mean().unwrap().item().unwrap(), 2.0);
        assert_eq!(c.std().unwrap().item().unwrap(), 0.0);
        let x = vec_var(&tape, &[3.0, 1.0, 2.0]);
        let (m, idx) = x.min_with_index().unwrap();
        assert_eq!((m.item().unwrap(), idx), (1.0, 1));
        let grads = tape.backward(m).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn min_ties_route_to_first_index() {
        let tape = Tape::new();
        let x = vec_var(&tape, &[2.0, 1.0, 1.0]);
        let (m, idx) = x.min_with_index().unwrap();
        assert_eq!(idx, 1);
        let grads = tape.backward(m).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn empty_reductions_fail() {
        let tape = Tape::new();
        let e = tape.param(Tensor::vector(Vec::new())).unwrap();
        assert!(matches!(e.mean(), Err(Error::Empty(_))));
        assert!(matches!(e.min(), Err(Error::Empty(_))));
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let w = vec_var(&tape, &[0.3, -2.0, 7.0]);
        let grads = tape.backward(w.sum().unwrap()).unwrap();
        assert_eq!(grads.wrt(w).data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let w = vec_var(&tape, &[1.0, 2.0]);
        let grads = tape.backward(w.square().unwrap().sum().unwrap()).unwrap();
        assert_eq!(grads.wrt(w).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_consumes_tape() {
        let tape = Tape::new();
        let w = vec_var(&tape, &[1.0, 2.0]);
        assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));
        let loss = w.sum().unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(w.exp(), Err(Error::TapeConsumed)));
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
        assert_eq!(loss.item().unwrap(), 3.0);
    }

    #[test]
    fn foreign_vars_are_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = vec_var(&t1, &[1.0]);
        let b = vec_var(&t2, &[1.0]);
        assert!(matches!(a.add(b), Err(Error::ForeignVar)));
    }

    #[test]
    fn concat_and_structural_ops() {
        let tape = Tape::new();
        let a = tape.param(Tensor::scalar(1.0)).unwrap();
        let b = vec_var(&tape, &[2.0, 3.0]);
        let v = concat(&[a, b]).unwrap();
        assert_eq!(v.shape(), vec![3]);
        let w = tape.constant(Tensor::vector(vec![1.0, 10.0, 100.0])).unwrap();
        let loss = v.mul(w).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(a).data(), &[1.0]);
        assert_eq!(grads.wrt(b).data(), &[10.0, 100.0]);
    }

    #[test]
    fn sum_axis_both_directions() {
        let tape = Tape::new();
        let m = tape
            .param(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        assert_eq!(m.sum_axis(0).unwrap().value().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(m.sum_axis(1).unwrap().value().data(), &[6.0, 15.0]);
        assert_eq!(m.mean_axis(1).unwrap().value().data(), &[2.0, 5.0]);
        assert!(m.sum_axis(2).is_err());
    }

    #[test]
    fn constants_do_not_record_closures() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = a.exp().unwrap();
        assert!(!b.requires_grad());
        let grads = tape.backward(b.sum().unwrap()).unwrap();
        assert!(grads.get(a).is_none());
    }

    #[test]
    fn normal_cdf_reference_values() {
        assert_eq!(normal_cdf(0.0), 0.5);
        assert!((normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((normal_cdf(-1.0) - 0.158_655_253_931_457_05).abs() < 1e-15);
    }
}
