use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Grads, Op, Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::ops::shape::split_at_axis;
use crate::tensor::Tensor;

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(alloc::format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape.to_vec();
    out.remove(axis);
    if out.is_empty() {
        out.push(1);
    }
    out
}

pub(crate) fn sum_axis_backward<T: Element>(
    tape: &Tape<T>,
    a: Var,
    axis: usize,
    g: &[T],
    grads: &mut Grads<T>,
) {
    let shape = tape.shape(a);
    let (outer, inner) = split_at_axis(shape, axis);
    let len = shape[axis];
    let mut ga = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        for l in 0..len {
            let dst = &mut ga[(o * len + l) * inner..][..inner];
            dst.copy_from_slice(&g[o * inner..(o + 1) * inner]);
        }
    }
    grads.accumulate(a, ga);
}

pub(crate) fn softmax_backward<T: Element>(
    tape: &Tape<T>,
    out: Var,
    a: Var,
    axis: usize,
    g: &[T],
    grads: &mut Grads<T>,
) {
    let y = tape.data(out);
    let shape = tape.shape(a);
    let (outer, inner) = split_at_axis(shape, axis);
    let len = shape[axis];
    let mut ga = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let dot: T = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
            for l in 0..len {
                ga[at(l)] = y[at(l)] * (g[at(l)] - dot);
            }
        }
    }
    grads.accumulate(a, ga);
}

pub(crate) fn l2_norm_backward<T: Element>(
    tape: &Tape<T>,
    out: Var,
    a: Var,
    axis: usize,
    g: &[T],
    grads: &mut Grads<T>,
) {
    let x = tape.data(a);
    let norms = tape.data(out);
    let shape = tape.shape(a);
    let (outer, inner) = split_at_axis(shape, axis);
    let len = shape[axis];
    let mut ga = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let n = norms[o * inner + i];
            if n == T::zero() {
                continue;
            }
            let scale = g[o * inner + i] / n;
            for l in 0..len {
                let at = (o * len + l) * inner + i;
                ga[at] = x[at] * scale;
            }
        }
    }
    grads.accumulate(a, ga);
}

impl<T: Element> Tape<T> {
    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.sum() / T::from_f64(v.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean { a })
    }

    /// Sum along `axis`, which is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(&shape, axis)?;
        let (outer, inner) = split_at_axis(&shape, axis);
        let len = shape[axis];
        let x = self.data(a);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..][..inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let value = Tensor::new(&without_axis(&shape, axis), out)?;
        Ok(self.push(value, Op::SumAxis { a, axis }))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(&shape, axis)?;
        let (outer, inner) = split_at_axis(&shape, axis);
        let len = shape[axis];
        let x = self.data(a);
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| x[at(l)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for l in 0..len {
                    let e = (x[at(l)] - max).exp();
                    out[at(l)] = e;
                    total = total + e;
                }
                for l in 0..len {
                    out[at(l)] = out[at(l)] / total;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Softmax { a, axis }))
    }

    /// Euclidean norm along `axis`, which is removed from the shape.
    /// The gradient at a zero vector is taken as zero.
    pub fn l2_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(&shape, axis)?;
        let (outer, inner) = split_at_axis(&shape, axis);
        let len = shape[axis];
        let x = self.data(a);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let sq: T = (0..len).map(|l| {
                    let v = x[(o * len + l) * inner + i];
                    v * v
                }).sum();
                out[o * inner + i] = sq.sqrt();
            }
        }
        let value = Tensor::new(&without_axis(&shape, axis), out)?;
        Ok(self.push(value, Op::L2Norm { a, axis }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.data(y), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one_along_inner_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3, 2], &[1., -2., 3., 0.5, 100., 7., -1., 0., 2., 2., 50., -50.]));
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y);
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|l| v.get(&[o, l, i])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn l2_norm_three_four_five() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[3.0, 4.0]));
        let n = tape.l2_norm(x, 0).unwrap();
        assert_eq!(tape.data(n), &[5.0]);
    }

    #[test]
    fn l2_norm_of_zero_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[0.0, 0.0]).with_grad());
        let n = tape.l2_norm(x, 1).unwrap();
        let s = tape.sum(n);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn sum_axis_and_mean() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let s0 = tape.sum_axis(x, 0).unwrap();
        let s1 = tape.sum_axis(x, 1).unwrap();
        let m = tape.mean(x);
        assert_eq!(tape.data(s0), &[5., 7., 9.]);
        assert_eq!(tape.data(s1), &[6., 15.]);
        assert_eq!(tape.data(m), &[3.5]);
        assert!(tape.sum_axis(x, 2).is_err());
    }
}
