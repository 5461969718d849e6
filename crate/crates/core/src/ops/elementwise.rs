use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Grads, Op, Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Element>(self, a: T, b: T) -> T {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Div => a / b,
        }
    }
}

/// Trailing-dimension broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` seen through a broadcast to `out` (0 on broadcast axes).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[offset + i] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast
/// output, in row-major order.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        let (mut ia, mut ib) = (base_a, base_b);
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        // advance the odometer over the outer axes
        let mut axis = rank - 1;
        while axis > 0 {
            axis -= 1;
            idx[axis] += 1;
            base_a += sa[axis];
            base_b += sb[axis];
            if idx[axis] < out[axis] {
                break;
            }
            base_a -= sa[axis] * out[axis];
            base_b -= sb[axis] * out[axis];
            idx[axis] = 0;
        }
    }
}

pub(crate) fn binary_forward<T: Element>(
    kind: BinaryKind,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let out_shape = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| Error::shape(kind.name(), a.shape(), b.shape()))?;
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<T> = if a.shape() == b.shape() {
        ad.iter().zip(bd).map(|(&x, &y)| kind.apply(x, y)).collect()
    } else if bd.len() == 1 {
        ad.iter().map(|&x| kind.apply(x, bd[0])).collect()
    } else {
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        let mut data = vec![T::zero(); numel(&out_shape)];
        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
            data[o] = kind.apply(ad[ia], bd[ib]);
        });
        data
    };
    Tensor::new(&out_shape, data)
}

pub(crate) fn binary_backward<T: Element>(
    tape: &Tape<T>,
    kind: BinaryKind,
    a: Var,
    b: Var,
    g: &[T],
    grads: &mut Grads<T>,
) {
    let (av, bv) = (tape.value(a), tape.value(b));
    let out_shape = broadcast_shape(av.shape(), bv.shape()).expect("checked in forward");
    let sa = broadcast_strides(av.shape(), &out_shape);
    let sb = broadcast_strides(bv.shape(), &out_shape);
    let (ad, bd) = (av.data(), bv.data());
    if grads.wants(a) {
        let mut ga = vec![T::zero(); ad.len()];
        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
            let d = match kind {
                BinaryKind::Add | BinaryKind::Sub => g[o],
                BinaryKind::Mul => g[o] * bd[ib],
                BinaryKind::Div => g[o] / bd[ib],
            };
            ga[ia] = ga[ia] + d;
        });
        grads.accumulate(a, ga);
    }
    if grads.wants(b) {
        let mut gb = vec![T::zero(); bd.len()];
        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
            let d = match kind {
                BinaryKind::Add => g[o],
                BinaryKind::Sub => -g[o],
                BinaryKind::Mul => g[o] * ad[ia],
                BinaryKind::Div => -g[o] * ad[ia] / (bd[ib] * bd[ib]),
            };
            gb[ib] = gb[ib] + d;
        });
        grads.accumulate(b, gb);
    }
}

pub(crate) fn relu_backward<T: Element>(tape: &Tape<T>, a: Var, g: &[T], grads: &mut Grads<T>) {
    let x = tape.data(a);
    let ga = x
        .iter()
        .zip(g)
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    grads.accumulate(a, ga);
}

pub(crate) fn sigmoid_backward<T: Element>(
    tape: &Tape<T>,
    out: Var,
    a: Var,
    g: &[T],
    grads: &mut Grads<T>,
) {
    let y = tape.data(out);
    let ga = y
        .iter()
        .zip(g)
        .map(|(&y, &g)| g * y * (T::one() - y))
        .collect();
    grads.accumulate(a, ga);
}

impl<T: Element> Tape<T> {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let value = binary_forward(kind, self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| x + c).collect();
        let value = Tensor::new(v.shape(), data).expect("shape preserved");
        self.push(value, Op::AddScalar { a })
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(v.shape(), data).expect("shape preserved");
        self.push(value, Op::MulScalar { a, c })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -T::one())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("identical shapes")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| x.max(T::zero())).collect();
        let value = Tensor::new(v.shape(), data).expect("shape preserved");
        self.push(value, Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = v
            .data()
            .iter()
            .map(|&x| T::one() / (T::one() + (-x).exp()))
            .collect();
        let value = Tensor::new(v.shape(), data).expect("shape preserved");
        self.push(value, Op::Sigmoid { a })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn add_vectors() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.data(c), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_zero_annihilates_value_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.5, -2.0, 7.0]).with_grad());
        let z = tape.constant(t(&[1], &[0.0]));
        let y = tape.mul(x, z).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn incompatible_broadcast_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let err = tape.add(a, b).unwrap_err();
        assert_eq!(
            err,
            Error::ShapeMismatch {
                op: "add",
                lhs: vec![2, 3],
                rhs: vec![4]
            }
        );
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"));
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 1, 3], &[4, 1]), Some(vec![2, 4, 3]));
        assert_eq!(broadcast_shape(&[5], &[]), Some(vec![5]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 3]), None);
    }

    #[test]
    fn broadcast_middle_axis() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.constant(t(&[2, 1], &[10.0, 20.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.data(c), &[11.0, 12.0, 13.0, 24.0, 25.0, 26.0]);
    }

    #[test]
    fn broadcast_gradient_reduces_over_expanded_axes() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_grad());
        let b = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_grad());
        let c = tape.mul(a, b).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[5.0, 7.0, 9.0]);
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn sigmoid_and_relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        let s = tape.sigmoid(x);
        assert_eq!(tape.data(r), &[0.0, 0.0, 2.0]);
        assert_eq!(tape.data(s)[1], 0.5);
    }
}
