use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Grads, Op, Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::{numel, strides, Tensor};

/// Gathers `src` (with `shape`) into the layout of `shape` permuted by `axes`.
fn permute_data<T: Element>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            off += gather[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            off -= gather[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
    out
}

fn inverse(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub(crate) fn permute_backward<T: Element>(
    tape: &Tape<T>,
    a: Var,
    axes: &[usize],
    g: &[T],
    grads: &mut Grads<T>,
) {
    let in_shape = tape.shape(a);
    let out_shape: Vec<usize> = axes.iter().map(|&ax| in_shape[ax]).collect();
    grads.accumulate(a, permute_data(g, &out_shape, &inverse(axes)));
}

/// `(outer, inner)` block sizes around `axis`.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize) {
    (numel(&shape[..axis]), numel(&shape[axis + 1..]))
}

pub(crate) fn concat_backward<T: Element>(
    tape: &Tape<T>,
    parts: &[Var],
    axis: usize,
    g: &[T],
    grads: &mut Grads<T>,
) {
    let (outer, inner) = split_at_axis(tape.shape(parts[0]), axis);
    let total: usize = parts.iter().map(|&p| tape.shape(p)[axis]).sum();
    let mut start = 0;
    for &p in parts {
        let len = tape.shape(p)[axis] * inner;
        if grads.wants(p) {
            let mut gp = Vec::with_capacity(outer * len);
            for o in 0..outer {
                let base = o * total * inner + start;
                gp.extend_from_slice(&g[base..base + len]);
            }
            grads.accumulate(p, gp);
        }
        start += len;
    }
}

impl<T: Element> Tape<T> {
    /// Reinterprets `a` with a new shape of equal element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let value = Tensor::new(shape, value.into_data())?;
        Ok(self.push(value, Op::Reshape { a }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&ax| ax >= shape.len() || core::mem::replace(&mut seen[ax], true)) {
            return Err(Error::InvalidArgument(alloc::format!(
                "{axes:?} is not a permutation of the axes of {shape:?}"
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let data = permute_data(self.data(a), &shape, axes);
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Permute { a, axes: axes.to_vec() }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidArgument(alloc::format!(
                "concat axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        for &p in &parts[1..] {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
        }
        let (outer, inner) = split_at_axis(&base, axis);
        let total: usize = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.data(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }))
    }
}
