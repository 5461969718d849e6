//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value and the
//! information its backward rule needs. [`Tape::backward`] walks the nodes in
//! exact reverse order of creation. A fresh tape (or [`Tape::clear`]) is used
//! per training step; parameters are copied in as leaves.

use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::ops::conv::ConvGeom;
use crate::ops::elementwise::BinaryKind;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var },
    AddScalar { a: Var },
    MulScalar { a: Var, c: T },
    Relu { a: Var },
    Sigmoid { a: Var },
    MatMul { a: Var, b: Var },
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom },
    Deconv2d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom },
    LocalLinear { input: Var, kernels: Var, bias: Option<Var>, geom: ConvGeom },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Sum { a: Var },
    Mean { a: Var },
    SumAxis { a: Var, axis: usize },
    Softmax { a: Var, axis: usize },
    L2Norm { a: Var, axis: usize },
    Squash { a: Var },
    CapsPredict { u: Var, w: Var },
    WeightedSum { c: Var, uhat: Var },
    Agreement { uhat: Var, v: Var },
    SelectCapsule { a: Var, index: Vec<usize> },
    MaskCapsules { a: Var, index: Vec<usize> },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            Binary { a, b, .. } | MatMul { a, b } => vec![*a, *b],
            AddScalar { a }
            | MulScalar { a, .. }
            | Relu { a }
            | Sigmoid { a }
            | Reshape { a }
            | Permute { a, .. }
            | Sum { a }
            | Mean { a }
            | SumAxis { a, .. }
            | Softmax { a, .. }
            | L2Norm { a, .. }
            | Squash { a }
            | SelectCapsule { a, .. }
            | MaskCapsules { a, .. } => vec![*a],
            Conv2d { input, kernel, bias, .. }
            | Deconv2d { input, kernel, bias, .. }
            | LocalLinear { input, kernels: kernel, bias, .. } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias.iter().copied());
                v
            }
            Concat { parts, .. } => parts.clone(),
            CapsPredict { u, w } => vec![*u, *w],
            WeightedSum { c, uhat } => vec![*c, *uhat],
            Agreement { uhat, v } => vec![*uhat, *v],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradient buffers indexed by node, used while replaying the tape.
pub(crate) struct Grads<T> {
    slots: Vec<Option<Vec<T>>>,
    wants: Vec<bool>,
    lens: Vec<usize>,
}

impl<T: Element> Grads<T> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.wants[v.0]
    }

    /// Mutable gradient buffer for `v`, zero-initialized on first use.
    pub(crate) fn slot(&mut self, v: Var) -> &mut [T] {
        let len = self.lens[v.0];
        self.slots[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    pub(crate) fn accumulate(&mut self, v: Var, g: Vec<T>) {
        if !self.wants[v.0] {
            return;
        }
        debug_assert_eq!(g.len(), self.lens[v.0]);
        match &mut self.slots[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(g) {
                    *e = *e + x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Records a leaf. It takes part in differentiation iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` with gradient flow cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
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

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Tape::backward`] root with respect to `v`.
    /// Populated for leaves created with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Back-propagates from a single-element `root`.
    ///
    /// Nodes are visited from `root` down to the first node. Every
    /// differentiable leaf ends up with a full gradient buffer (zeros when it
    /// does not influence `root`).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::InvalidArgument(alloc::format!(
                "backward root must hold one element, shape is {:?}",
                self.shape(root)
            )));
        }
        let n = root.0 + 1;
        let mut grads = Grads {
            slots: (0..n).map(|_| None).collect(),
            wants: self.nodes[..n].iter().map(|node| node.requires_grad).collect(),
            lens: self.nodes[..n].iter().map(|node| node.value.numel()).collect(),
        };
        if !grads.wants[root.0] {
            return Ok(());
        }
        grads.slots[root.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for i in (0..n).rev() {
            let Some(g) = grads.slots[i].take() else {
                continue;
            };
            match &self.nodes[i].op {
                Op::Leaf => leaf_grads.push((i, g)),
                op => self.backward_op(Var(i), op, &g, &mut grads),
            }
        }
        for (i, g) in leaf_grads {
            self.nodes[i].value.set_grad(g);
        }
        for node in &mut self.nodes[..n] {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.value.grad().is_none() {
                let len = node.value.numel();
                node.value.set_grad(vec![T::zero(); len]);
            }
        }
        Ok(())
    }

    fn backward_op(&self, out: Var, op: &Op<T>, g: &[T], grads: &mut Grads<T>) {
        use crate::ops::*;
        match op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => elementwise::binary_backward(self, *kind, *a, *b, g, grads),
            Op::AddScalar { a } => grads.accumulate(*a, g.to_vec()),
            Op::MulScalar { a, c } => grads.accumulate(*a, g.iter().map(|&x| x * *c).collect()),
            Op::Relu { a } => elementwise::relu_backward(self, *a, g, grads),
            Op::Sigmoid { a } => elementwise::sigmoid_backward(self, out, *a, g, grads),
            Op::MatMul { a, b } => matmul::matmul_backward(self, *a, *b, g, grads),
            Op::Conv2d { input, kernel, bias, geom } => {
                conv::conv2d_backward(self, *input, *kernel, *bias, geom, g, grads)
            }
            Op::Deconv2d { input, kernel, bias, geom } => {
                conv::deconv2d_backward(self, *input, *kernel, *bias, geom, g, grads)
            }
            Op::LocalLinear { input, kernels, bias, geom } => {
                conv::local_linear_backward(self, *input, *kernels, *bias, geom, g, grads)
            }
            Op::Reshape { a } => grads.accumulate(*a, g.to_vec()),
            Op::Permute { a, axes } => shape::permute_backward(self, *a, axes, g, grads),
            Op::Concat { parts, axis } => shape::concat_backward(self, parts, *axis, g, grads),
            Op::Sum { a } => {
                let n = self.value(*a).numel();
                grads.accumulate(*a, vec![g[0]; n]);
            }
            Op::Mean { a } => {
                let n = self.value(*a).numel();
                let share = g[0] / T::from_f64(n as f64);
                grads.accumulate(*a, vec![share; n]);
            }
            Op::SumAxis { a, axis } => reduce::sum_axis_backward(self, *a, *axis, g, grads),
            Op::Softmax { a, axis } => reduce::softmax_backward(self, out, *a, *axis, g, grads),
            Op::L2Norm { a, axis } => reduce::l2_norm_backward(self, out, *a, *axis, g, grads),
            Op::Squash { a } => capsule::squash_backward(self, *a, g, grads),
            Op::CapsPredict { u, w } => capsule::predict_backward(self, *u, *w, g, grads),
            Op::WeightedSum { c, uhat } => capsule::weighted_sum_backward(self, *c, *uhat, g, grads),
            Op::Agreement { uhat, v } => capsule::agreement_backward(self, *uhat, *v, g, grads),
            Op::SelectCapsule { a, index } => capsule::select_backward(self, *a, index, g, grads),
            Op::MaskCapsules { a, index } => capsule::mask_backward(self, *a, index, g, grads),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap().with_grad());
        let y = tape.leaf(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap().with_grad());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
        assert_eq!(tape.grad(y).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn constants_do_not_record_backward_rules() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.add(a, a).unwrap();
        assert!(!tape.requires_grad(b));
        let s = tape.sum(b);
        tape.backward(s).unwrap();
        assert!(tape.grad(a).is_none());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::full(&[3], 1.0).with_grad());
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn detach_cuts_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[1], &[2.0]).unwrap().with_grad());
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        // d/dx (x * stop(x)) = stop(x)
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn shared_operand_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[2], &[3.0, -1.0]).unwrap().with_grad());
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0, -2.0]);
    }
}
