//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation in execution order; node ids are
//! therefore already a topological order and [`Tape::backward`] is a single
//! reverse sweep. Parameters enter the tape by reference (no copy) and the
//! resulting [`Grads`] outlive the tape, so they can be folded back into the
//! parameter tensors once the tape borrow ends.

mod capsule_ops;
mod conv;
mod elementwise;
mod linear;
mod norm;

use alloc::borrow::Cow;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

pub use elementwise::Activation;
pub use norm::{BatchNormMode, BatchStats};

use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    AddRowBias { x: Var, bias: Var },
    AddChannelBias { x: Var, bias: Var, channels: usize, plane: usize },
    Conv2d { x: Var, kernel: Var, geom: ConvGeom, batch: usize },
    ConvTranspose2d { x: Var, kernel: Var, geom: ConvGeom, batch: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, inv_std: Vec<f32>, train: bool, channels: usize, plane: usize },
    Activation { x: Var, kind: Activation },
    Reshape { x: Var },
    Gather { x: Var, index: Vec<u32> },
    MulConst { x: Var, factor: Vec<f32> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { x: Var, scale: f32 },
    Sum { x: Var },
    LogClamped { x: Var, floor: f32 },
    SoftmaxCrossEntropy { logits: Var, probs: Vec<f32>, labels: Vec<usize>, classes: usize },
    Squash { x: Var, dim: usize },
    SoftmaxLast { x: Var, dim: usize },
    CapsulePredict { u: Var, w: Var, dims: capsule_ops::PredictDims },
    RoutingSum { c: Var, uhat: Var, dims: capsule_ops::PredictDims },
    Agreement { uhat: Var, v: Var, dims: capsule_ops::PredictDims },
    Outer { a: Var, b: Var, batch: usize, p: usize, q: usize },
    ChannelContract { x: Var, w: Var, batch: usize, channels: usize, len: usize },
}

struct Node<'a> {
    shape: Shape,
    value: Cow<'a, [f32]>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Lifetime `'a` is the borrow of bound parameters.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Binds a tensor by reference; it is differentiated iff it requires grad.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.param_with(t, t.requires_grad())
    }

    /// Binds a tensor by reference, overriding its `requires_grad` flag.
    pub fn param_with(&mut self, t: &'a Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape().clone(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an owned leaf (an input batch, a latent sample, ...).
    pub fn input(&mut self, t: Tensor, needs_grad: bool) -> Var {
        let shape = t.shape().clone();
        self.nodes.push(Node { shape, value: Cow::Owned(t.into_data()), op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: impl Into<Shape>, data: Vec<f32>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.input(t, false))
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &Shape {
        &self.nodes[v.0].shape
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("tape node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Shape, value: Vec<f32>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.numel(), value.len());
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { shape, value: Cow::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Sweeps the tape backwards from a scalar `loss`, returning gradients of
    /// every leaf that needs one.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {}",
                self.nodes[loss.0].shape
            )));
        }
        let mut buf = GradBuf { slots: vec![None; self.nodes.len()] };
        buf.slots[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = buf.slots[id].take() else { continue };
            self.backprop(id, &g, &mut buf);
        }
        let mut leaves = Vec::new();
        for (id, slot) in buf.slots.into_iter().enumerate() {
            if let (Op::Leaf, Some(g)) = (&self.nodes[id].op, slot) {
                if !self.nodes[id].needs_grad {
                    continue;
                }
                if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "non-finite gradient at leaf {id} element {bad}"
                    )));
                }
                leaves.push((Var(id), g));
            }
        }
        Ok(Grads { leaves })
    }

    fn backprop(&self, id: usize, g: &[f32], buf: &mut GradBuf) {
        use Op::*;
        match &self.nodes[id].op {
            Leaf => {}
            MatMul { a, b, m, k, n } => linear::matmul_backward(self, *a, *b, *m, *k, *n, g, buf),
            AddRowBias { x, bias } => linear::add_row_bias_backward(self, *x, *bias, g, buf),
            AddChannelBias { x, bias, channels, plane } => {
                linear::add_channel_bias_backward(self, *x, *bias, *channels, *plane, g, buf)
            }
            Conv2d { x, kernel, geom, batch } => conv::conv2d_backward(self, *x, *kernel, geom, *batch, g, buf),
            ConvTranspose2d { x, kernel, geom, batch } => {
                conv::conv_transpose2d_backward(self, *x, *kernel, geom, *batch, g, buf)
            }
            BatchNorm { x, gamma, beta, xhat, inv_std, train, channels, plane } => norm::batch_norm_backward(
                self, *x, *gamma, *beta, xhat, inv_std, *train, *channels, *plane, g, buf,
            ),
            Activation { x, kind } => elementwise::activation_backward(self, id, *x, *kind, g, buf),
            Reshape { x } => buf.add(self, *x, g),
            Gather { x, index } => {
                if let Some(dx) = buf.slot(self, *x) {
                    for (&i, v) in index.iter().zip(g) {
                        dx[i as usize] += v;
                    }
                }
            }
            MulConst { x, factor } => {
                if let Some(dx) = buf.slot(self, *x) {
                    for ((d, f), v) in dx.iter_mut().zip(factor).zip(g) {
                        *d += f * v;
                    }
                }
            }
            Add { a, b } => {
                buf.add(self, *a, g);
                buf.add(self, *b, g);
            }
            Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(da) = buf.slot(self, *a) {
                    for ((d, y), v) in da.iter_mut().zip(bv).zip(g) {
                        *d += y * v;
                    }
                }
                if let Some(db) = buf.slot(self, *b) {
                    for ((d, y), v) in db.iter_mut().zip(av).zip(g) {
                        *d += y * v;
                    }
                }
            }
            Affine { x, scale } => {
                if let Some(dx) = buf.slot(self, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += scale * v);
                }
            }
            Sum { x } => {
                if let Some(dx) = buf.slot(self, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            LogClamped { x, floor } => {
                let xv = self.value(*x);
                if let Some(dx) = buf.slot(self, *x) {
                    for ((d, &a), v) in dx.iter_mut().zip(xv).zip(g) {
                        *d += v / clamp_below(a, *floor);
                    }
                }
            }
            SoftmaxCrossEntropy { logits, probs, labels, classes } => {
                elementwise::softmax_ce_backward(self, *logits, probs, labels, *classes, g, buf)
            }
            Squash { x, dim } => capsule_ops::squash_backward(self, id, *x, *dim, g, buf),
            SoftmaxLast { x, dim } => capsule_ops::softmax_backward(self, id, *x, *dim, g, buf),
            CapsulePredict { u, w, dims } => capsule_ops::predict_backward(self, *u, *w, dims, g, buf),
            RoutingSum { c, uhat, dims } => capsule_ops::routing_sum_backward(self, *c, *uhat, dims, g, buf),
            Agreement { uhat, v, dims } => capsule_ops::agreement_backward(self, *uhat, *v, dims, g, buf),
            Outer { a, b, batch, p, q } => linear::outer_backward(self, *a, *b, *batch, *p, *q, g, buf),
            ChannelContract { x, w, batch, channels, len } => {
                linear::channel_contract_backward(self, *x, *w, *batch, *channels, *len, g, buf)
            }
        }
    }

    // ---- shape-generic ops -------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: impl Into<Shape>) -> Result<Var> {
        let shape = shape.into();
        if shape.numel() != self.value(x).len() {
            return Err(Error::dim("reshape", format!("{} -> {shape}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape, value, Op::Reshape { x }, &[x]))
    }

    /// `out[k] = x[index[k]]` over flat storage.
    pub fn gather(&mut self, x: Var, index: Vec<u32>, shape: impl Into<Shape>) -> Result<Var> {
        let shape = shape.into();
        let n = self.value(x).len();
        if shape.numel() != index.len() {
            return Err(Error::dim("gather", format!("{} indices for shape {shape}", index.len())));
        }
        if let Some(bad) = index.iter().find(|&&i| i as usize >= n) {
            return Err(Error::dim("gather", format!("index {bad} out of {n}")));
        }
        let xv = self.value(x);
        let value = index.iter().map(|&i| xv[i as usize]).collect();
        Ok(self.push(shape, value, Op::Gather { x, index }, &[x]))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Vec<f32>) -> Result<Var> {
        if factor.len() != self.value(x).len() {
            return Err(Error::dim("mul_const", format!("{} factors for {}", factor.len(), self.shape(x))));
        }
        let value = self.value(x).iter().zip(&factor).map(|(a, b)| a * b).collect();
        let shape = self.shape(x).clone();
        Ok(self.push(shape, value, Op::MulConst { x, factor }, &[x]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, format!("{} vs {}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).clone();
        Ok(self.push(shape, value, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).clone();
        Ok(self.push(shape, value, Op::Mul { a, b }, &[a, b]))
    }

    /// `scale * x + offset`.
    pub fn affine(&mut self, x: Var, scale: f32, offset: f32) -> Var {
        let value = self.value(x).iter().map(|v| scale * v + offset).collect();
        let shape = self.shape(x).clone();
        self.push(shape, value, Op::Affine { x, scale }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        // f64 accumulation keeps large reductions order-insensitive enough for
        // finite-difference checks.
        let s: f64 = self.value(x).iter().map(|&v| v as f64).sum();
        self.push(Shape::scalar(), vec![s as f32], Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f32;
        let s = self.sum(x);
        self.affine(s, 1.0 / n, 0.0)
    }

    /// `ln(max(x, floor))`; the derivative is taken at the clamped argument.
    pub fn log_clamped(&mut self, x: Var, floor: f32) -> Var {
        let value = self.value(x).iter().map(|&v| crate::math::ln(clamp_below(v, floor))).collect();
        let shape = self.shape(x).clone();
        self.push(shape, value, Op::LogClamped { x, floor }, &[x])
    }
}

/// `max(x, floor)` that lets NaN through.
fn clamp_below(x: f32, floor: f32) -> f32 {
    if x < floor {
        floor
    } else {
        x
    }
}

/// Gradients of the differentiable leaves of one backward sweep.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    leaves: Vec<(Var, Vec<f32>)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.leaves
            .binary_search_by_key(&v, |(k, _)| *k)
            .ok()
            .map(|i| self.leaves[i].1.as_slice())
    }

    /// Adds the gradient of `v` (if any) into `t`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

pub(crate) struct GradBuf {
    slots: Vec<Option<Vec<f32>>>,
}

impl GradBuf {
    /// Mutable gradient slot of `v`, or `None` when `v` is not differentiated.
    fn slot(&mut self, tape: &Tape<'_>, v: Var) -> Option<&mut [f32]> {
        if !tape.needs_grad(v) {
            return None;
        }
        let len = tape.value(v).len();
        Some(self.slots[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn add(&mut self, tape: &Tape<'_>, v: Var, g: &[f32]) {
        if let Some(d) = self.slot(tape, v) {
            d.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
}

#[cfg(test)]
pub(crate) mod testutil;
