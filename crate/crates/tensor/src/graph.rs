//! Tape of recorded operations and the reverse sweep over it.
//!
//! Every op appends one node holding its forward value. Node ids are
//! assigned in creation order, so the tape is already topologically sorted
//! and backward is a single reverse pass.

use crate::error::{Result, TensorError};
use crate::ops::{channel, conv, loss, pointwise, reduce, resample};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const fn same(dilation: usize) -> Self {
        Self {
            stride: 1,
            pad: dilation,
            dilation,
        }
    }

    pub const fn down2() -> Self {
        Self {
            stride: 2,
            pad: 1,
            dilation: 1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum UnaryKind<T> {
    LeakyRelu(T),
    Relu,
    Tanh,
    Sigmoid,
    Log,
    Exp,
    Sqrt,
    Abs,
    Square,
    AddScalar(T),
    MulScalar(T),
    ClampMin(T),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// How the right operand of a binary op is indexed against the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Bcast {
    Same,
    /// rhs shape equals the trailing dims of lhs; `period` = rhs numel.
    Suffix {
        period: usize,
    },
    /// rhs is `[C]` against lhs `[N, C, H, W]`.
    Channel {
        channels: usize,
        plane: usize,
    },
}

impl Bcast {
    #[inline]
    pub(crate) fn rhs_index(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Suffix { period } => i % period,
            Bcast::Channel { channels, plane } => (i / plane) % channels,
        }
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Upsample {
        input: Var,
        factor: usize,
        mode: UpsampleMode,
    },
    AvgPool2 {
        input: Var,
    },
    Unary {
        input: Var,
        kind: UnaryKind<T>,
    },
    Binary {
        lhs: Var,
        rhs: Var,
        kind: BinaryKind,
        bcast: Bcast,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Slice {
        input: Var,
        start: usize,
        len: usize,
    },
    Softmax {
        input: Var,
    },
    NormalizeChannels {
        input: Var,
    },
    ChannelMean {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    Composite {
        known: Var,
        pred: Var,
        keep: Vec<bool>,
    },
    BceLogits {
        input: Var,
        target: T,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, bias, .. } => {
                let mut v = vec![input, weight];
                v.extend(bias);
                v
            }
            Op::Upsample { input, .. }
            | Op::AvgPool2 { input }
            | Op::Unary { input, .. }
            | Op::Slice { input, .. }
            | Op::Softmax { input }
            | Op::NormalizeChannels { input }
            | Op::ChannelMean { input }
            | Op::Sum { input }
            | Op::Mean { input }
            | Op::BceLogits { input, .. } => vec![input],
            Op::Binary { lhs, rhs, .. } => vec![lhs, rhs],
            Op::Concat { a, b } => vec![a, b],
            Op::Composite { known, pred, .. } => vec![known, pred],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation and differentiates it in reverse.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that accumulates a gradient during [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the current value into a new constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("congruent grad"))
    }

    /// Reverse sweep from a single-element `loss`. Gradients of all nodes
    /// that require them are retained until the next call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(upstream) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &upstream);
            self.grads[id] = Some(upstream);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contribution) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, id: usize, g: &[T]) {
        let nodes = &self.nodes;
        let out = &nodes[id].value;
        let mut contributions: Vec<(Var, Vec<T>)> = Vec::with_capacity(3);
        match &nodes[id].op {
            Op::Leaf => {}
            &Op::Conv2d { input, weight, bias, geom } => {
                let grads = conv::conv2d_backward(
                    &nodes[input.0].value,
                    &nodes[weight.0].value,
                    geom,
                    out.shape(),
                    g,
                    self.wants(input),
                    self.wants(weight),
                );
                if let Some(dx) = grads.input {
                    contributions.push((input, dx));
                }
                if let Some(dw) = grads.weight {
                    contributions.push((weight, dw));
                }
                if let Some(b) = bias {
                    if self.wants(b) {
                        contributions.push((b, conv::bias_backward(out.shape(), g)));
                    }
                }
            }
            &Op::Upsample { input, factor, mode } => {
                let dx = resample::upsample_backward(nodes[input.0].value.shape(), factor, mode, g);
                contributions.push((input, dx));
            }
            &Op::AvgPool2 { input } => {
                let dx = resample::avg_pool2_backward(nodes[input.0].value.shape(), g);
                contributions.push((input, dx));
            }
            &Op::Unary { input, kind } => {
                let dx = pointwise::unary_backward(kind, nodes[input.0].value.data(), out.data(), g);
                contributions.push((input, dx));
            }
            &Op::Binary { lhs, rhs, kind, bcast } => {
                let (dl, dr) = pointwise::binary_backward(
                    kind,
                    bcast,
                    nodes[lhs.0].value.data(),
                    nodes[rhs.0].value.data(),
                    g,
                    self.wants(lhs),
                    self.wants(rhs),
                );
                contributions.extend(dl.map(|d| (lhs, d)));
                contributions.extend(dr.map(|d| (rhs, d)));
            }
            &Op::Concat { a, b } => {
                let (da, db) = channel::concat_backward(nodes[a.0].value.shape(), nodes[b.0].value.shape(), g);
                contributions.push((a, da));
                contributions.push((b, db));
            }
            &Op::Slice { input, start, len } => {
                let dx = channel::slice_backward(nodes[input.0].value.shape(), start, len, g);
                contributions.push((input, dx));
            }
            &Op::Softmax { input } => {
                contributions.push((input, channel::softmax_backward(out, g)));
            }
            &Op::NormalizeChannels { input } => {
                contributions.push((input, channel::normalize_backward(&nodes[input.0].value, g)));
            }
            &Op::ChannelMean { input } => {
                contributions.push((input, channel::channel_mean_backward(nodes[input.0].value.shape(), g)));
            }
            &Op::Sum { input } => {
                contributions.push((input, vec![g[0]; nodes[input.0].value.numel()]));
            }
            &Op::Mean { input } => {
                let n = nodes[input.0].value.numel();
                contributions.push((input, vec![g[0] / T::lit(n as f64); n]));
            }
            Op::Composite { known, pred, keep } => {
                let (dk, dp) = reduce::composite_backward(nodes[known.0].value.shape(), keep, g);
                contributions.push((*known, dk));
                contributions.push((*pred, dp));
            }
            &Op::BceLogits { input, target } => {
                contributions.push((input, loss::bce_backward(nodes[input.0].value.data(), target, g[0])));
            }
        }
        for (v, d) in contributions {
            self.accumulate(v, d);
        }
    }
}
