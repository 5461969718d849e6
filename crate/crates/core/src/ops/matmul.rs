use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Grads, Op, Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::ops::elementwise::{broadcast_shape, broadcast_strides};
use crate::tensor::{numel, Tensor};

/// Shapes of a (possibly batched) matmul after promoting 1-D operands.
struct Plan {
    m: usize,
    k: usize,
    n: usize,
    batch: Vec<usize>,
    a_batch_strides: Vec<usize>,
    b_batch_strides: Vec<usize>,
    out_shape: Vec<usize>,
}

impl Plan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.is_empty() || b.is_empty() {
            return Err(Error::shape("matmul", a, b));
        }
        let a_vec = a.len() == 1;
        let b_vec = b.len() == 1;
        let (am, ak) = if a_vec { (1, a[0]) } else { (a[a.len() - 2], a[a.len() - 1]) };
        let (bk, bn) = if b_vec { (b[0], 1) } else { (b[b.len() - 2], b[b.len() - 1]) };
        if ak != bk {
            return Err(Error::shape("matmul", a, b));
        }
        let a_lead = if a_vec { &[][..] } else { &a[..a.len() - 2] };
        let b_lead = if b_vec { &[][..] } else { &b[..b.len() - 2] };
        let batch = broadcast_shape(a_lead, b_lead).ok_or_else(|| Error::shape("matmul", a, b))?;
        let a_batch_strides = broadcast_strides(a_lead, &batch)
            .into_iter()
            .map(|s| s * am * ak)
            .collect();
        let b_batch_strides = broadcast_strides(b_lead, &batch)
            .into_iter()
            .map(|s| s * bk * bn)
            .collect();
        let mut out_shape = batch.clone();
        if !a_vec {
            out_shape.push(am);
        }
        if !b_vec {
            out_shape.push(bn);
        }
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(Self {
            m: am,
            k: ak,
            n: bn,
            batch,
            a_batch_strides,
            b_batch_strides,
            out_shape,
        })
    }

    /// `(batch_index, a_offset, b_offset)` for every batch element.
    fn offsets(&self) -> Vec<(usize, usize, usize)> {
        let total = numel(&self.batch);
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; self.batch.len()];
        for t in 0..total {
            let mut oa = 0;
            let mut ob = 0;
            for (axis, &i) in idx.iter().enumerate() {
                oa += i * self.a_batch_strides[axis];
                ob += i * self.b_batch_strides[axis];
            }
            out.push((t, oa, ob));
            for axis in (0..idx.len()).rev() {
                idx[axis] += 1;
                if idx[axis] < self.batch[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        out
    }
}

pub(crate) fn matmul_backward<T: Element>(
    tape: &Tape<T>,
    a: Var,
    b: Var,
    g: &[T],
    grads: &mut Grads<T>,
) {
    let (av, bv) = (tape.value(a), tape.value(b));
    let plan = Plan::new(av.shape(), bv.shape()).expect("checked in forward");
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let offsets = plan.offsets();
    if grads.wants(a) {
        let bd = bv.data();
        let ga = grads.slot(a);
        for &(t, oa, ob) in &offsets {
            // dA = dC * B^T
            T::gemm(
                m, n, k, T::one(),
                &g[t * m * n..], n, 1,
                &bd[ob..], 1, n,
                T::one(),
                &mut ga[oa..], k, 1,
            );
        }
    }
    if grads.wants(b) {
        let ad = av.data();
        let gb = grads.slot(b);
        for &(t, oa, ob) in &offsets {
            // dB = A^T * dC
            T::gemm(
                k, m, n, T::one(),
                &ad[oa..], 1, k,
                &g[t * m * n..], n, 1,
                T::one(),
                &mut gb[ob..], n, 1,
            );
        }
    }
}

impl<T: Element> Tape<T> {
    /// Matrix product over the last two axes with broadcast leading axes.
    /// A 1-D operand is treated as a row (lhs) or column (rhs) vector and
    /// that axis is dropped from the result.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let plan = Plan::new(av.shape(), bv.shape())?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut out = vec![T::zero(); numel(&plan.batch) * m * n];
        let (ad, bd) = (av.data(), bv.data());
        for (t, oa, ob) in plan.offsets() {
            T::gemm(
                m, k, n, T::one(),
                &ad[oa..], k, 1,
                &bd[ob..], n, 1,
                T::zero(),
                &mut out[t * m * n..], n, 1,
            );
        }
        let value = Tensor::new(&plan.out_shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    /// `x @ weight + bias` with `weight: [in, out]`, `bias: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn row_times_column() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[1, 1]);
        assert_eq!(tape.data(c), &[11.0]);
    }

    #[test]
    fn identity_on_vector() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let x = tape.constant(t(&[3], &[0.5, -2.0, 9.0]));
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.shape(y), &[3]);
        assert_eq!(tape.data(y), &[0.5, -2.0, 9.0]);
    }

    #[test]
    fn inner_dimension_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(Error::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn batched_with_broadcast_rhs() {
        let mut tape = Tape::new();
        // two 1x2 rows against one shared 2x2 matrix
        let a = tape.constant(t(&[2, 1, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1, 2]);
        assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn broadcast_rhs_gradient_sums_over_batch() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let b = tape.leaf(t(&[2, 1], &[1.0, 1.0]).with_grad());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[4.0, 6.0]);
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }
}
