//! Operation recording and reverse-mode gradient propagation.

use std::cell::{Cell, RefCell};

use super::tensor::{
    broadcast_kind, concat_values, matmul_values, slice_values, zip_values, Broadcast,
};
use super::{DiffError, Tensor};

/// Recorded expression for one tape node. Operand references are node ids,
/// which always point at earlier entries, so recording order is a valid
/// topological order.
#[derive(Clone, Debug)]
enum Expr {
    Leaf { trainable: bool },
    MatMul(usize, usize),
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Scale(usize, f64),
    Concat(usize, usize),
    Slice { src: usize, start: usize, len: usize },
    Sum(usize),
    Mean(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    Square(usize),
}

struct Node {
    value: Tensor,
    expr: Expr,
}

/// A single-threaded record of one forward pass.
///
/// Every op appends a node; `backward` replays the nodes in reverse exactly
/// once each, so gradients are deterministic for a given tape. Tensors handed
/// out by [`Var::value`] are plain copies and safe to share across threads;
/// the tape itself must stay on one thread.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    check_finite: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            check_finite: Cell::new(false),
        }
    }

    /// Enables a per-op scan that rejects NaN/Inf results. Off by default;
    /// intended for debugging diverging runs.
    pub fn set_finite_checks(&self, enabled: bool) {
        self.check_finite.set(enabled);
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, value: Tensor, expr: Expr) -> Result<Var<'_>, DiffError> {
        if self.check_finite.get() && !value.is_finite() {
            return Err(DiffError::NonFinite {
                op: expr_name(&expr),
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, expr });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Records a non-trainable leaf (an input or other constant).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Expr::Leaf { trainable: false })
            .expect("leaf recording cannot fail")
    }

    /// Records a trainable leaf; `backward` reports a gradient for it even
    /// when the loss never touches it (all zeros in that case).
    pub fn trainable(&self, value: Tensor) -> Var<'_> {
        self.push(value, Expr::Leaf { trainable: true })
            .expect("leaf recording cannot fail")
    }

    /// Constant scalar of shape `[1]`.
    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Constant `[rows, 1]` column of ones, used to broadcast row vectors
    /// over a batch via matmul.
    pub fn ones_column(&self, rows: usize) -> Var<'_> {
        self.constant(Tensor::full(&[rows, 1], 1.0))
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    /// Computes gradients of a scalar `loss` with respect to every node,
    /// traversing the tape once in reverse recording order.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, DiffError> {
        if !std::ptr::eq(self, loss.tape) {
            return Err(DiffError::TapeMismatch);
        }
        let nodes = self.nodes.borrow();
        if !nodes[loss.id].value.is_scalar() {
            return Err(DiffError::NonScalar {
                shape: nodes[loss.id].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let upstream = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            match node.expr {
                Expr::Leaf { .. } => {
                    grads[id] = Some(upstream);
                    continue;
                }
                Expr::MatMul(a, b) => {
                    let av = &nodes[a].value;
                    let bv = &nodes[b].value;
                    accumulate(&mut grads, a, matmul_grad_lhs(&upstream, bv));
                    accumulate(&mut grads, b, matmul_grad_rhs(av, &upstream));
                }
                Expr::Add(a, b, kind) => {
                    accumulate(&mut grads, a, reduce_for(&nodes[a].value, &upstream, kind, true));
                    accumulate(&mut grads, b, reduce_for(&nodes[b].value, &upstream, kind, false));
                }
                Expr::Sub(a, b, kind) => {
                    accumulate(&mut grads, a, reduce_for(&nodes[a].value, &upstream, kind, true));
                    let neg = upstream.map(|g| -g);
                    accumulate(&mut grads, b, reduce_for(&nodes[b].value, &neg, kind, false));
                }
                Expr::Mul(a, b, kind) => {
                    let av = &nodes[a].value;
                    let bv = &nodes[b].value;
                    let ga = zip_values(&upstream, bv, mul_kind(kind, false), |g, y| g * y);
                    let gb = zip_values(&upstream, av, mul_kind(kind, true), |g, x| g * x);
                    accumulate(&mut grads, a, reduce_sum_to(av, ga));
                    accumulate(&mut grads, b, reduce_sum_to(bv, gb));
                }
                Expr::Scale(a, c) => {
                    accumulate(&mut grads, a, upstream.map(|g| g * c));
                }
                Expr::Concat(a, b) => {
                    let wa = *nodes[a].value.shape().last().unwrap();
                    let wb = *nodes[b].value.shape().last().unwrap();
                    let ga = slice_values(&upstream, 0, wa).expect("concat grad split");
                    let gb = slice_values(&upstream, wa, wb).expect("concat grad split");
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Expr::Slice { src, start, len } => {
                    let src_shape = nodes[src].value.shape().to_vec();
                    let width = *src_shape.last().unwrap();
                    let rows: usize = src_shape[..src_shape.len() - 1].iter().product();
                    let mut g = Tensor::zeros(&src_shape);
                    for r in 0..rows {
                        let dst = &mut g.data_mut()[r * width + start..r * width + start + len];
                        dst.copy_from_slice(&upstream.data()[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut grads, src, g);
                }
                Expr::Sum(a) => {
                    let g = upstream.data()[0];
                    accumulate(&mut grads, a, Tensor::full(nodes[a].value.shape(), g));
                }
                Expr::Mean(a) => {
                    let n = nodes[a].value.len().max(1) as f64;
                    let g = upstream.data()[0] / n;
                    accumulate(&mut grads, a, Tensor::full(nodes[a].value.shape(), g));
                }
                Expr::Exp(a) => {
                    let g = zip_values(&upstream, &node.value, Broadcast::None, |g, y| g * y);
                    accumulate(&mut grads, a, g);
                }
                Expr::Log(a) => {
                    let g = zip_values(&upstream, &nodes[a].value, Broadcast::None, |g, x| g / x);
                    accumulate(&mut grads, a, g);
                }
                Expr::Sigmoid(a) => {
                    let g = zip_values(&upstream, &node.value, Broadcast::None, |g, s| {
                        g * s * (1.0 - s)
                    });
                    accumulate(&mut grads, a, g);
                }
                Expr::Tanh(a) => {
                    let g = zip_values(&upstream, &node.value, Broadcast::None, |g, t| {
                        g * (1.0 - t * t)
                    });
                    accumulate(&mut grads, a, g);
                }
                Expr::Softplus(a) => {
                    let g = zip_values(&upstream, &nodes[a].value, Broadcast::None, |g, x| {
                        g * sigmoid(x)
                    });
                    accumulate(&mut grads, a, g);
                }
                Expr::Square(a) => {
                    let g = zip_values(&upstream, &nodes[a].value, Broadcast::None, |g, x| {
                        g * 2.0 * x
                    });
                    accumulate(&mut grads, a, g);
                }
            }
        }

        // Trainable leaves always get an entry, so unused parameters report
        // an exact zero gradient.
        for (id, node) in nodes.iter().enumerate() {
            if let Expr::Leaf { trainable: true } = node.expr {
                if grads[id].is_none() {
                    grads[id] = Some(Tensor::zeros(node.value.shape()));
                }
            }
        }

        Ok(Gradients { grads })
    }
}

fn expr_name(expr: &Expr) -> &'static str {
    match expr {
        Expr::Leaf { .. } => "leaf",
        Expr::MatMul(..) => "matmul",
        Expr::Add(..) => "add",
        Expr::Sub(..) => "sub",
        Expr::Mul(..) => "mul",
        Expr::Scale(..) => "scale",
        Expr::Concat(..) => "concat",
        Expr::Slice { .. } => "slice",
        Expr::Sum(..) => "sum",
        Expr::Mean(..) => "mean",
        Expr::Exp(..) => "exp",
        Expr::Log(..) => "log",
        Expr::Sigmoid(..) => "sigmoid",
        Expr::Tanh(..) => "tanh",
        Expr::Softplus(..) => "softplus",
        Expr::Square(..) => "square",
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// dL/dA for C = A·B given dL/dC: `g · Bᵀ`.
fn matmul_grad_lhs(upstream: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (upstream.shape()[0], upstream.shape()[1]);
    let k = b.shape()[0];
    let mut out = Tensor::zeros(&[m, k]);
    for i in 0..m {
        for p in 0..k {
            let mut acc = 0.0;
            for j in 0..n {
                acc += upstream.data()[i * n + j] * b.data()[p * n + j];
            }
            out.data_mut()[i * k + p] = acc;
        }
    }
    out
}

/// dL/dB for C = A·B given dL/dC: `Aᵀ · g`.
fn matmul_grad_rhs(a: &Tensor, upstream: &Tensor) -> Tensor {
    let (m, n) = (upstream.shape()[0], upstream.shape()[1]);
    let k = a.shape()[1];
    let mut out = Tensor::zeros(&[k, n]);
    for i in 0..m {
        for p in 0..k {
            let aip = a.data()[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for j in 0..n {
                out.data_mut()[p * n + j] += aip * upstream.data()[i * n + j];
            }
        }
    }
    out
}

/// Broadcast kind for the gradient-side products in `Mul`.
fn mul_kind(kind: Broadcast, other_is_lhs: bool) -> Broadcast {
    // upstream always has the full output shape; the multiplier may be the
    // scalar operand.
    match (kind, other_is_lhs) {
        (Broadcast::LeftScalar, true) | (Broadcast::RightScalar, false) => Broadcast::RightScalar,
        _ => Broadcast::None,
    }
}

/// Collapses an upstream gradient onto a scalar operand by total sum. The
/// result always carries the operand's exact shape, even when the upstream
/// is itself single-element with a different rank.
fn reduce_sum_to(operand: &Tensor, grad: Tensor) -> Tensor {
    if operand.is_scalar() {
        Tensor::new(operand.shape().to_vec(), vec![grad.data().iter().sum()])
            .expect("scalar reduction")
    } else {
        grad
    }
}

fn reduce_for(operand: &Tensor, upstream: &Tensor, kind: Broadcast, is_lhs: bool) -> Tensor {
    let scalar_side = matches!(
        (kind, is_lhs),
        (Broadcast::LeftScalar, true) | (Broadcast::RightScalar, false)
    );
    if scalar_side {
        reduce_sum_to(operand, upstream.clone())
    } else {
        upstream.clone()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
    debug_assert!(
        grads[id].as_ref().map_or(true, |g| g.shape() == delta.shape()),
        "gradient shape drift at node {id}"
    );
    match &mut grads[id] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Gradient of a scalar loss with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient tensor for `var`, or `None` when the loss never reached it
    /// and it is not a trainable leaf.
    pub fn wrt_opt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient tensor for `var`, materializing zeros for unreached nodes.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.wrt_opt(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&var.shape()),
        }
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl<'t> Var<'t> {
    pub(crate) fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self) -> Result<f64, DiffError> {
        self.value().scalar_value()
    }

    fn same_tape(&self, other: Var<'t>) -> Result<(), DiffError> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(DiffError::TapeMismatch)
        }
    }

    fn binary(
        &self,
        other: Var<'t>,
        op: &'static str,
        expr: impl Fn(usize, usize, Broadcast) -> Expr,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>, DiffError> {
        self.same_tape(other)?;
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id].value;
        let b = &nodes[other.id].value;
        let kind = broadcast_kind(a, b, op)?;
        let value = zip_values(a, b, kind, f);
        drop(nodes);
        self.tape.push(value, expr(self.id, other.id, kind))
    }

    fn unary(
        &self,
        expr: impl Fn(usize) -> Expr,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var<'t>, DiffError> {
        let value = self.tape.nodes.borrow()[self.id].value.map(f);
        self.tape.push(value, expr(self.id))
    }

    /// Matrix product for rank-2 operands.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.same_tape(other)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            matmul_values(&nodes[self.id].value, &nodes[other.id].value)?
        };
        self.tape.push(value, Expr::MatMul(self.id, other.id))
    }

    /// Elementwise sum; one operand may be a single-element scalar.
    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.binary(other, "add", Expr::Add, |x, y| x + y)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.binary(other, "subtract", Expr::Sub, |x, y| x - y)
    }

    /// Elementwise (Hadamard) product; one operand may be a scalar.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.binary(other, "multiply", Expr::Mul, |x, y| x * y)
    }

    /// Multiplication by a compile-time-known constant.
    pub fn scale(&self, c: f64) -> Result<Var<'t>, DiffError> {
        let value = self.tape.nodes.borrow()[self.id].value.map(|x| x * c);
        self.tape.push(value, Expr::Scale(self.id, c))
    }

    /// Concatenation along the last axis.
    pub fn concat(&self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.same_tape(other)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            concat_values(&nodes[self.id].value, &nodes[other.id].value)?
        };
        self.tape.push(value, Expr::Concat(self.id, other.id))
    }

    /// Contiguous slice `[start, start+len)` along the last axis.
    pub fn slice(&self, start: usize, len: usize) -> Result<Var<'t>, DiffError> {
        let value = slice_values(&self.tape.nodes.borrow()[self.id].value, start, len)?;
        self.tape.push(
            value,
            Expr::Slice {
                src: self.id,
                start,
                len,
            },
        )
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&self) -> Result<Var<'t>, DiffError> {
        let value = Tensor::scalar(self.tape.nodes.borrow()[self.id].value.data().iter().sum());
        self.tape.push(value, Expr::Sum(self.id))
    }

    /// Mean of all elements, as a `[1]` scalar.
    pub fn mean(&self) -> Result<Var<'t>, DiffError> {
        let nodes = self.tape.nodes.borrow();
        let t = &nodes[self.id].value;
        let n = t.len().max(1) as f64;
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / n);
        drop(nodes);
        self.tape.push(value, Expr::Mean(self.id))
    }

    pub fn exp(&self) -> Result<Var<'t>, DiffError> {
        self.unary(Expr::Exp, f64::exp)
    }

    /// Natural logarithm; rejects non-positive inputs.
    pub fn log(&self) -> Result<Var<'t>, DiffError> {
        {
            let nodes = self.tape.nodes.borrow();
            if nodes[self.id].value.data().iter().any(|&x| x <= 0.0) {
                return Err(DiffError::Domain {
                    op: "log",
                    detail: "input has non-positive entries".into(),
                });
            }
        }
        self.unary(Expr::Log, f64::ln)
    }

    pub fn sigmoid(&self) -> Result<Var<'t>, DiffError> {
        self.unary(Expr::Sigmoid, sigmoid)
    }

    pub fn tanh(&self) -> Result<Var<'t>, DiffError> {
        self.unary(Expr::Tanh, f64::tanh)
    }

    pub fn softplus(&self) -> Result<Var<'t>, DiffError> {
        self.unary(Expr::Softplus, softplus)
    }

    pub fn square(&self) -> Result<Var<'t>, DiffError> {
        self.unary(Expr::Square, |x| x * x)
    }
}
