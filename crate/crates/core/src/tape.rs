//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and parent ids, so
//! the tape is topologically ordered by construction. [`Tape::backward`] sweeps
//! it once in reverse. A fresh tape is built for every training step.
//!
//! Broadcasting is restricted to a one-element operand against any tensor and a
//! row vector (`[n]` or `[1, n]`) against an `[m, n]` matrix.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::special;
use crate::tensor::{check_finite, gemm_nn, gemm_nt, gemm_tn, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Neg,
    Tanh,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Exp,
    Log,
    Square,
    Sqrt,
    Erf,
    Softplus,
    /// `min(x, c)`; the gradient is zero where the bound is active.
    ClampMax(f64),
    Scale(f64),
    Offset(f64),
}

impl UnaryOp {
    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Relu => "relu",
            UnaryOp::LeakyRelu(_) => "leaky_relu",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Square => "square",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Erf => "erf",
            UnaryOp::Softplus => "softplus",
            UnaryOp::ClampMax(_) => "clamp_max",
            UnaryOp::Scale(_) => "scale",
            UnaryOp::Offset(_) => "offset",
        }
    }

    fn forward(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            UnaryOp::Sigmoid => special::sigmoid(x),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Square => x * x,
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Erf => special::erf(x),
            UnaryOp::Softplus => special::softplus(x),
            UnaryOp::ClampMax(c) => x.min(c),
            UnaryOp::Scale(c) => c * x,
            UnaryOp::Offset(c) => x + c,
        }
    }

    // Local derivative given input x and output y.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Neg => -1.0,
            UnaryOp::Tanh => 1.0 - y * y,
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Exp => y,
            UnaryOp::Log => 1.0 / x,
            UnaryOp::Square => 2.0 * x,
            UnaryOp::Sqrt => 0.5 / y,
            UnaryOp::Erf => special::erf_derivative(x),
            UnaryOp::Softplus => special::sigmoid(x),
            UnaryOp::ClampMax(c) => {
                if x < c {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Scale(c) => c,
            UnaryOp::Offset(_) => 1.0,
        }
    }

    fn check_domain(self, x: f64) -> Result<()> {
        let bad = match self {
            UnaryOp::Log => x <= 0.0,
            UnaryOp::Sqrt => x < 0.0,
            _ => false,
        };
        if bad {
            Err(TensorError::Domain {
                op: self.name(),
                detail: format!("argument {x} outside the domain"),
            })
        } else {
            Ok(())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    pub fn name(self) -> &'static str {
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
}

/// How the right-hand operand (or left) is expanded to the output shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
    LhsRow,
    RhsRow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
enum Op {
    Param,
    Constant,
    MatMul(usize, usize),
    Binary(BinaryOp, Broadcast, usize, usize),
    Unary(UnaryOp, usize),
    Reduce(Reduction, Option<usize>, usize),
    ConcatCols(usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Binary(b, ..) => b.name(),
            Op::Unary(u, _) => u.name(),
            Op::Reduce(Reduction::Sum, ..) => "sum",
            Op::Reduce(Reduction::Mean, ..) => "mean",
            Op::ConcatCols(..) => "concat",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Scales the backward rule of one named primitive. Used only to prove that
/// the gradient checker notices a broken derivative.
#[derive(Clone, Copy, Debug)]
pub struct FaultInjection {
    pub op: &'static str,
    pub factor: f64,
}

/// Gradients produced by one backward sweep, indexed by node.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it was reached.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    fault: Option<FaultInjection>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: FaultInjection) -> Self {
        let mut tape = Self::new();
        tape.fault = Some(fault);
        tape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        check_finite(op.name(), value.data())?;
        self.nodes.push(Node { value, op });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn node(&self, var: Var) -> Result<&Node> {
        if var.tape != self.id {
            return Err(TensorError::ForeignVar);
        }
        self.nodes.get(var.index).ok_or(TensorError::ForeignVar)
    }

    /// Registers a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Param });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// A constant copy of `var`'s current value, cut from the graph.
    pub fn detach(&mut self, var: Var) -> Result<Var> {
        let value = self.node(var)?.value.clone();
        Ok(self.constant(value))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.node(var).expect("variable from another tape").value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, var: Var) -> Result<f64> {
        self.node(var)?.value.item()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.node(a)?.value.dims2()?;
        let (k2, n) = self.node(b)?.value.dims2()?;
        if k != k2 {
            return Err(TensorError::Shape(format!(
                "matmul inner dimensions differ: [{m}x{k}] x [{k2}x{n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.index, b.index))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        let bv = &self.node(b)?.value;
        let mode = broadcast_mode(av.shape(), bv.shape())?;
        if op == BinaryOp::Div {
            if let Some(i) = bv.data().iter().position(|&v| v == 0.0) {
                return Err(TensorError::Domain {
                    op: "div",
                    detail: format!("division by zero at divisor index {i}"),
                });
            }
        }
        let (ad, bd) = (av.data(), bv.data());
        let (shape, data): (Vec<usize>, Vec<f64>) = match mode {
            Broadcast::Same => (
                av.shape().to_vec(),
                ad.iter().zip(bd).map(|(&x, &y)| op.apply(x, y)).collect(),
            ),
            Broadcast::RhsScalar => (av.shape().to_vec(), ad.iter().map(|&x| op.apply(x, bd[0])).collect()),
            Broadcast::LhsScalar => (bv.shape().to_vec(), bd.iter().map(|&y| op.apply(ad[0], y)).collect()),
            Broadcast::RhsRow => {
                let n = bd.len();
                (
                    av.shape().to_vec(),
                    ad.iter().enumerate().map(|(i, &x)| op.apply(x, bd[i % n])).collect(),
                )
            }
            Broadcast::LhsRow => {
                let n = ad.len();
                (
                    bv.shape().to_vec(),
                    bd.iter().enumerate().map(|(i, &y)| op.apply(ad[i % n], y)).collect(),
                )
            }
        };
        self.push(Tensor::new(shape, data)?, Op::Binary(op, mode, a.index, b.index))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        for &x in av.data() {
            op.check_domain(x)?;
        }
        let out = av.map(|x| op.forward(x));
        self.push(out, Op::Unary(op, a.index))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(UnaryOp::LeakyRelu(slope), a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn erf(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Erf, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Softplus, a)
    }

    pub fn clamp_max(&mut self, a: Var, bound: f64) -> Result<Var> {
        self.unary(UnaryOp::ClampMax(bound), a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.unary(UnaryOp::Scale(factor), a)
    }

    pub fn offset(&mut self, a: Var, shift: f64) -> Result<Var> {
        self.unary(UnaryOp::Offset(shift), a)
    }

    pub fn reduce(&mut self, kind: Reduction, a: Var, axis: Option<usize>) -> Result<Var> {
        let av = &self.node(a)?.value;
        let out = match axis {
            None => {
                let s = av.sum();
                let v = match kind {
                    Reduction::Sum => s,
                    Reduction::Mean => s / av.len() as f64,
                };
                Tensor::scalar(v)
            }
            Some(axis) => {
                let (outer, size, inner) = axis_split(av.shape(), axis)?;
                let mut data = vec![0.0; outer * inner];
                let src = av.data();
                for o in 0..outer {
                    for s in 0..size {
                        let base = (o * size + s) * inner;
                        for i in 0..inner {
                            data[o * inner + i] += src[base + i];
                        }
                    }
                }
                if kind == Reduction::Mean {
                    for v in &mut data {
                        *v /= size as f64;
                    }
                }
                let mut shape = av.shape().to_vec();
                shape.remove(axis);
                Tensor::new(shape, data)?
            }
        };
        self.push(out, Op::Reduce(kind, axis, a.index))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::Sum, a, None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::Mean, a, None)
    }

    /// Column-wise concatenation of `[m×p]` and `[m×q]` into `[m×(p+q)]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.node(a)?.value.dims2()?;
        let (m2, q) = self.node(b)?.value.dims2()?;
        if m != m2 {
            return Err(TensorError::Shape(format!(
                "concat leading dimensions differ: {m} vs {m2}"
            )));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(&ad[i * p..(i + 1) * p]);
            data.extend_from_slice(&bd[i * q..(i + 1) * q]);
        }
        self.push(Tensor::new(vec![m, p + q], data)?, Op::ConcatCols(a.index, b.index))
    }

    /// Gradients of a scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.node(loss)?;
        let mut needs = vec![false; loss.index + 1];
        for i in 0..=loss.index {
            needs[i] = match self.nodes[i].op {
                Op::Param => true,
                Op::Constant => false,
                ref op => parents(op).iter().any(|&p| needs[p]),
            };
        }
        self.sweep(loss, needs)
    }

    /// Gradients of `loss` restricted to what `targets` need: subgraphs that
    /// cannot reach any target are skipped.
    pub fn backward_wrt(&self, loss: Var, targets: &[Var]) -> Result<Gradients> {
        self.node(loss)?;
        let mut needs = vec![false; loss.index + 1];
        for t in targets {
            self.node(*t)?;
            if t.index <= loss.index {
                needs[t.index] = true;
            }
        }
        for i in 0..=loss.index {
            if !needs[i] {
                needs[i] = parents(&self.nodes[i].op).iter().any(|&p| needs[p]);
            }
        }
        self.sweep(loss, needs)
    }

    fn sweep(&self, loss: Var, needs: Vec<bool>) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.index].value;
        if !loss_value.is_scalar() {
            return Err(TensorError::NonScalar(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(Tensor::filled(loss_value.shape(), 1.0));

        for i in (0..=loss.index).rev() {
            if !needs[i] {
                continue;
            }
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let fault = match self.fault {
                Some(f) if f.op == node.op.name() => f.factor,
                _ => 1.0,
            };
            match node.op {
                Op::Param | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.nodes[a].value.dims2()?;
                    let n = node.value.shape()[1];
                    if needs[a] {
                        let mut ga = vec![0.0; m * k];
                        gemm_nt(upstream.data(), self.nodes[b].value.data(), &mut ga, m, n, k);
                        accumulate(&mut grads, a, self.nodes[a].value.shape(), ga, fault);
                    }
                    if needs[b] {
                        let mut gb = vec![0.0; k * n];
                        gemm_tn(self.nodes[a].value.data(), upstream.data(), &mut gb, m, k, n);
                        accumulate(&mut grads, b, self.nodes[b].value.shape(), gb, fault);
                    }
                }
                Op::Binary(op, mode, a, b) => {
                    let av = &self.nodes[a].value;
                    let bv = &self.nodes[b].value;
                    let g = upstream.data();
                    let count = g.len();
                    let lhs_at = |j: usize| match mode {
                        Broadcast::LhsScalar => av.data()[0],
                        Broadcast::LhsRow => av.data()[j % av.len()],
                        _ => av.data()[j],
                    };
                    let rhs_at = |j: usize| match mode {
                        Broadcast::RhsScalar => bv.data()[0],
                        Broadcast::RhsRow => bv.data()[j % bv.len()],
                        _ => bv.data()[j],
                    };
                    if needs[a] {
                        let mut ga = vec![0.0; av.len()];
                        for j in 0..count {
                            let local = match op {
                                BinaryOp::Add | BinaryOp::Sub => 1.0,
                                BinaryOp::Mul => rhs_at(j),
                                BinaryOp::Div => 1.0 / rhs_at(j),
                            };
                            ga[j % av.len()] += g[j] * local;
                        }
                        accumulate(&mut grads, a, av.shape(), ga, fault);
                    }
                    if needs[b] {
                        let mut gb = vec![0.0; bv.len()];
                        for j in 0..count {
                            let local = match op {
                                BinaryOp::Add => 1.0,
                                BinaryOp::Sub => -1.0,
                                BinaryOp::Mul => lhs_at(j),
                                BinaryOp::Div => {
                                    let r = rhs_at(j);
                                    -lhs_at(j) / (r * r)
                                }
                            };
                            gb[j % bv.len()] += g[j] * local;
                        }
                        accumulate(&mut grads, b, bv.shape(), gb, fault);
                    }
                }
                Op::Unary(op, a) => {
                    if needs[a] {
                        let x = self.nodes[a].value.data();
                        let y = node.value.data();
                        let ga: Vec<f64> = upstream
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(j, &g)| g * op.derivative(x[j], y[j]))
                            .collect();
                        accumulate(&mut grads, a, self.nodes[a].value.shape(), ga, fault);
                    }
                }
                Op::Reduce(kind, axis, a) => {
                    if needs[a] {
                        let av = &self.nodes[a].value;
                        let g = upstream.data();
                        let ga = match axis {
                            None => {
                                let scale = match kind {
                                    Reduction::Sum => 1.0,
                                    Reduction::Mean => 1.0 / av.len() as f64,
                                };
                                vec![g[0] * scale; av.len()]
                            }
                            Some(axis) => {
                                let (outer, size, inner) = axis_split(av.shape(), axis)?;
                                let scale = match kind {
                                    Reduction::Sum => 1.0,
                                    Reduction::Mean => 1.0 / size as f64,
                                };
                                let mut ga = vec![0.0; av.len()];
                                for o in 0..outer {
                                    for s in 0..size {
                                        let base = (o * size + s) * inner;
                                        for i in 0..inner {
                                            ga[base + i] = g[o * inner + i] * scale;
                                        }
                                    }
                                }
                                ga
                            }
                        };
                        accumulate(&mut grads, a, av.shape(), ga, fault);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (m, p) = self.nodes[a].value.dims2()?;
                    let q = self.nodes[b].value.dims2()?.1;
                    let g = upstream.data();
                    if needs[a] {
                        let ga: Vec<f64> = (0..m)
                            .flat_map(|i| g[i * (p + q)..i * (p + q) + p].iter().copied())
                            .collect();
                        accumulate(&mut grads, a, self.nodes[a].value.shape(), ga, fault);
                    }
                    if needs[b] {
                        let gb: Vec<f64> = (0..m)
                            .flat_map(|i| g[i * (p + q) + p..(i + 1) * (p + q)].iter().copied())
                            .collect();
                        accumulate(&mut grads, b, self.nodes[b].value.shape(), gb, fault);
                    }
                }
            }
            // Leaves keep their gradient for the caller; interior nodes are done.
            if matches!(node.op, Op::Param | Op::Constant) || i == loss.index {
                grads[i] = Some(upstream);
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                check_finite("backward", g.data()).map_err(|e| match e {
                    TensorError::NonFinite { value, .. } => TensorError::NonFinite {
                        op: "backward",
                        index: i,
                        value,
                    },
                    other => other,
                })?;
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }
}

fn parents(op: &Op) -> Vec<usize> {
    match *op {
        Op::Param | Op::Constant => Vec::new(),
        Op::MatMul(a, b) | Op::Binary(_, _, a, b) | Op::ConcatCols(a, b) => vec![a, b],
        Op::Unary(_, a) | Op::Reduce(_, _, a) => vec![a],
    }
}

fn accumulate(grads: &mut [Option<Tensor>], index: usize, shape: &[usize], g: Vec<f64>, factor: f64) {
    match &mut grads[index] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g) {
                *e += v * factor;
            }
        }
        slot @ None => {
            let data = if factor == 1.0 {
                g
            } else {
                g.into_iter().map(|v| v * factor).collect()
            };
            *slot = Some(Tensor::from_parts(shape.to_vec(), data));
        }
    }
}

fn broadcast_mode(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    let count = |s: &[usize]| s.iter().product::<usize>();
    if a == b {
        return Ok(Broadcast::Same);
    }
    if count(b) == 1 {
        return Ok(Broadcast::RhsScalar);
    }
    if count(a) == 1 {
        return Ok(Broadcast::LhsScalar);
    }
    let is_row_of = |row: &[usize], mat: &[usize]| {
        mat.len() == 2
            && match row {
                [n] => *n == mat[1],
                [1, n] => *n == mat[1],
                _ => false,
            }
    };
    if is_row_of(b, a) {
        return Ok(Broadcast::RhsRow);
    }
    if is_row_of(a, b) {
        return Ok(Broadcast::LhsRow);
    }
    Err(TensorError::Shape(format!("cannot broadcast {a:?} with {b:?}")))
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut t = Tape::new();
        let i = t.constant(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let m = t.constant(mat(&[vec![1.5, -2.0], vec![3.0, 4.25]]));
        let p = t.matmul(i, m).unwrap();
        assert_eq!(t.value(p), t.value(m));

        let a = t.constant(mat(&[vec![1.0, 2.0]]));
        let b = t.constant(mat(&[vec![3.0], vec![4.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut naive = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for p in 0..4 {
                    naive[i * 2 + j] += a[i * 4 + p] * b[p * 2 + j];
                }
            }
        }
        let mut t = Tape::new();
        let va = t.constant(Tensor::matrix(3, 4, a).unwrap());
        let vb = t.constant(Tensor::matrix(4, 2, b).unwrap());
        let c = t.matmul(va, vb).unwrap();
        for (x, y) in t.value(c).data().iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(t.matmul(a, b), Err(TensorError::Shape(_))));
    }

    #[test]
    fn unary_reference_values() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::scalar(0.0));
        let th = t.tanh(z).unwrap();
        let sg = t.sigmoid(z).unwrap();
        assert_eq!(t.item(th).unwrap(), 0.0);
        assert_eq!(t.item(sg).unwrap(), 0.5);
        let x = t.constant(Tensor::scalar(0.476_936_276_2));
        let e = t.erf(x).unwrap();
        assert!((t.item(e).unwrap() - 0.5).abs() < 1e-10);
    }

    #[test]
    fn domain_errors() {
        let mut t = Tape::new();
        let neg = t.constant(Tensor::vector(vec![1.0, -1.0]).unwrap());
        assert!(matches!(t.log(neg), Err(TensorError::Domain { op: "log", .. })));
        assert!(matches!(t.sqrt(neg), Err(TensorError::Domain { op: "sqrt", .. })));
        let zero = t.constant(Tensor::scalar(0.0));
        assert!(matches!(t.log(zero), Err(TensorError::Domain { .. })));
        let one = t.constant(Tensor::scalar(1.0));
        assert!(matches!(t.div(one, zero), Err(TensorError::Domain { op: "div", .. })));
    }

    #[test]
    fn overflow_is_reported_as_non_finite() {
        let mut t = Tape::new();
        let big = t.constant(Tensor::scalar(1000.0));
        assert!(matches!(t.exp(big), Err(TensorError::NonFinite { op: "exp", .. })));
    }

    #[test]
    fn broadcasting_rules() {
        let mut t = Tape::new();
        let m = t.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let row = t.constant(Tensor::vector(vec![10.0, 20.0]).unwrap());
        let s = t.constant(Tensor::scalar(2.0));
        let a = t.add(m, row).unwrap();
        assert_eq!(t.value(a).data(), &[11.0, 22.0, 13.0, 24.0]);
        let b = t.mul(s, m).unwrap();
        assert_eq!(t.value(b).data(), &[2.0, 4.0, 6.0, 8.0]);
        let c = t.sub(row, m).unwrap();
        assert_eq!(t.value(c).data(), &[9.0, 18.0, 7.0, 16.0]);
        let col = t.constant(Tensor::zeros(&[2, 1]));
        assert!(t.add(m, col).is_err());
        let wide = t.constant(Tensor::zeros(&[3]));
        assert!(t.add(m, wide).is_err());
    }

    #[test]
    fn reductions() {
        let mut t = Tape::new();
        let v = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let s = t.sum(v).unwrap();
        assert_eq!(t.item(s).unwrap(), 6.0);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[1.0, 1.0, 1.0]);

        let c = t.constant(Tensor::filled(&[4, 3], 2.5));
        let m = t.mean(c).unwrap();
        assert_eq!(t.item(m).unwrap(), 2.5);

        let mm = t.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let cols = t.reduce(Reduction::Sum, mm, Some(0)).unwrap();
        assert_eq!(t.value(cols).data(), &[4.0, 6.0]);
        let rows = t.reduce(Reduction::Mean, mm, Some(1)).unwrap();
        assert_eq!(t.value(rows).data(), &[1.5, 3.5]);
        assert!(matches!(
            t.reduce(Reduction::Sum, mm, Some(2)),
            Err(TensorError::InvalidAxis { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn concat_shapes_and_values() {
        let mut t = Tape::new();
        let a = t.constant(mat(&[vec![1.0]]));
        let b = t.constant(mat(&[vec![2.0]]));
        let c = t.concat_cols(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0]);

        let z = t.constant(Tensor::zeros(&[5, 3]));
        let xi = t.constant(Tensor::zeros(&[5, 2]));
        let zc = t.concat_cols(z, xi).unwrap();
        assert_eq!(t.shape(zc), &[5, 5]);
        let short = t.constant(Tensor::zeros(&[4, 2]));
        assert!(t.concat_cols(z, short).is_err());
    }

    #[test]
    fn analytic_backward_examples() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let sq = t.square(w).unwrap();
        let loss = t.sum(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[2.0, 4.0]);

        let mut t = Tape::new();
        let w = t.param(Tensor::scalar(0.0));
        let s = t.sigmoid(w).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[0.25]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let w = t.param(Tensor::zeros(&[2]));
        let e = t.exp(w).unwrap();
        assert!(matches!(t.backward(e), Err(TensorError::NonScalar(_))));
    }

    #[test]
    fn constants_and_foreign_vars() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::scalar(3.0));
        let p = t.param(Tensor::scalar(2.0));
        let y = t.mul(c, p).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[3.0]);

        let mut other = Tape::new();
        let q = other.param(Tensor::scalar(1.0));
        assert!(matches!(t.exp(q), Err(TensorError::ForeignVar)));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let p = t.param(Tensor::scalar(2.0));
        let d = t.detach(p).unwrap();
        let y = t.mul(p, d).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_wrt_prunes_but_agrees() {
        let mut t = Tape::new();
        let a = t.param(mat(&[vec![0.3, -0.2], vec![0.1, 0.7]]));
        let b = t.param(mat(&[vec![1.1], vec![-0.4]]));
        let h = t.matmul(a, b).unwrap();
        let h = t.tanh(h).unwrap();
        let loss = t.sum(h).unwrap();
        let full = t.backward(loss).unwrap();
        let only_b = t.backward_wrt(loss, &[b]).unwrap();
        assert_eq!(full.get(b), only_b.get(b));
        assert!(only_b.get(a).is_none());
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let mut t = Tape::new();
        let a = t.param(mat(&[vec![0.3, -0.2, 0.9], vec![0.1, 0.7, -1.3]]));
        let e = t.tanh(a).unwrap();
        let s = t.square(e).unwrap();
        let loss = t.mean(s).unwrap();
        assert_eq!(t.backward(loss).unwrap(), t.backward(loss).unwrap());
    }
}
